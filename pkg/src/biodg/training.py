"""Training-loop plumbing shared by every network in the package."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Sequential, Tensor, assign_params, load_checkpoint, save_checkpoint
from .errors import DivergenceError
from .features import N_FILTERS, N_FRAMES

INPUT_SHAPE = (N_FILTERS, N_FRAMES, 1)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    theta: float = 1.0
    alpha: float = 1.0
    patience: int | None = None  # stop after this many epochs without a validation improvement

    def to_json(self):
        return asdict(self)


def as_input(maps, dtype=np.float32) -> Tensor:
    """(B, 26, 99) maps -> channels-last (B, 26, 99, 1) tensor."""
    x = np.asarray(maps, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    return Tensor(x[..., None])


def check_finite(value, what: str, seed: int, step: int, epoch: int):
    v = float(np.asarray(value))
    if not np.isfinite(v):
        raise DivergenceError(f"{what}: loss became {v} at epoch {epoch}, step {step} (seed {seed})")
    return v


def should_stop(cfg: TrainConfig, epoch: int, best_epoch: int) -> bool:
    return bool(cfg.patience) and best_epoch >= 0 and epoch - best_epoch >= cfg.patience


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def stratified_batches(groups, per_group: int, rng: np.random.Generator):
    """Domain-stratified batches: ``per_group`` indices from every group per batch.

    Each group is shuffled once per epoch and consumed in order; groups that run
    out early are reshuffled and cycled so every batch keeps its composition.
    The number of batches is set by the largest group.
    """
    groups = [np.asarray(g) for g in groups if len(g)]
    n_batches = max(-(-len(g) // per_group) for g in groups)
    streams = []
    for g in groups:
        need = n_batches * per_group
        reps = -(-need // len(g))
        streams.append(np.concatenate([rng.permutation(g) for _ in range(reps)])[:need])
    for b in range(n_batches):
        yield np.concatenate([s[b * per_group:(b + 1) * per_group] for s in streams])


class Model:
    """A bundle of named Sequential parts with checkpoint support."""

    kind = "model"
    parts: dict[str, Sequential]

    def named_params(self):
        for part in self.parts.values():
            yield from part.named_params()

    def parameters(self):
        return [p for _, p in self.named_params()]

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(INPUT_SHAPE),
            "parts": {name: seq.specs() for name, seq in self.parts.items()},
            "part_order": list(self.parts),
        }

    def snapshot(self):
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snap):
        for p, v in zip(self.parameters(), snap):
            p.data = v.copy()

    def save(self, prefix, extra: dict | None = None):
        desc = self.descriptor()
        desc.update(extra or {})
        return save_checkpoint(prefix, desc, self.named_params())

    def load_values(self, prefix):
        desc, values = load_checkpoint(prefix)
        assign_params(self.named_params(), values)
        return desc
