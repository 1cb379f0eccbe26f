"""One-shot domain recognizer: a CNN emitting a 72-d unit embedding plus a class head.

Trained with online semi-hard triplet mining on domain labels and a binary
cross-entropy class term; domain relationships for an unseen instance are
the fraction of each basis domain's stored embeddings within distance lambda.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Adam,
    Conv2D,
    Dense,
    Flatten,
    L2Normalize,
    MaxPool2D,
    ReLU,
    Sequential,
    Sigmoid,
    Tensor,
    bce_loss,
    combined_loss,
    no_grad,
    triplet_loss,
)
from .autodiff import tensor as T
from .errors import ConfigError
from .training import INPUT_SHAPE, Model, TrainConfig, as_input, check_finite, should_stop, stratified_batches

log = logging.getLogger(__name__)

EMBED_DIM = 72
MARGIN = 1.0
EASY, HARD, SEMI_HARD = "easy", "hard", "semi_hard"


def triplet_net_layers():
    """Six conv layers in three pooled blocks, then two dense layers (the last is the embedding)."""
    trunk = [
        Conv2D(8, (3, 3), stride=(2, 2)), ReLU(),
        Conv2D(16, (3, 3)), ReLU(), MaxPool2D((2, 2)),
        Conv2D(16, (2, 3)), ReLU(),
        Conv2D(16, (2, 3)), ReLU(),
        Conv2D(16, (2, 3)), ReLU(),
        Conv2D(16, (1, 3)), ReLU(), MaxPool2D((1, 2)),
        Flatten(),
        Dense(64), ReLU(),
        Dense(EMBED_DIM), L2Normalize(),
    ]
    head = [Dense(40), ReLU(), Dense(1), Sigmoid()]
    return trunk, head


class TripletNet(Model):
    kind = "triplet_net"

    def __init__(self, seed: int = 0, dtype=np.float32, margin: float = MARGIN, layers=None):
        if margin <= 0:
            raise ConfigError("margin must be positive")
        trunk, head = layers or triplet_net_layers()
        self.margin = margin
        self.parts = {"embed": Sequential(trunk, "embed"), "cls": Sequential(head, "cls")}
        rng = np.random.default_rng(seed)
        out = self.parts["embed"].build(INPUT_SHAPE, rng, dtype)
        self.parts["cls"].build(out, rng, dtype)

    def forward(self, x: Tensor):
        emb = self.parts["embed"](x)
        return emb, self.parts["cls"](emb)

    def embed(self, maps, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for s in range(0, len(maps), batch_size):
                out.append(self.parts["embed"](as_input(maps[s:s + batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, EMBED_DIM), np.float32)

    def predict(self, maps, batch_size: int = 256):
        """(embeddings, class probabilities) without recording a graph."""
        embs, probs = [], []
        with no_grad():
            for s in range(0, len(maps), batch_size):
                e, p = self.forward(as_input(maps[s:s + batch_size]))
                embs.append(e.data)
                probs.append(p.data[:, 0])
        return np.concatenate(embs), np.concatenate(probs)

    def descriptor(self):
        d = super().descriptor()
        d.update({"embed_dim": EMBED_DIM, "margin": self.margin})
        return d


# triplet categories and mining

def categorize_triplet(d_ap: float, d_an: float, margin: float = MARGIN) -> str:
    """easy iff d_ap + margin <= d_an; hard iff d_an <= d_ap; semi-hard otherwise."""
    if d_ap + margin <= d_an:
        return EASY
    if d_an <= d_ap:
        return HARD
    return SEMI_HARD


def pairwise_distances(emb) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float64)
    diff = e[:, None, :] - e[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


@dataclass
class MiningResult:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    categories: list
    pairs_examined: int = 0
    fallback_easy: int = 0
    skipped_pairs: int = 0
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.anchors)

    def as_tuples(self):
        return list(zip(self.anchors.tolist(), self.positives.tolist(), self.negatives.tolist()))


def mine_semi_hard(labels, embeddings, margin: float = MARGIN) -> MiningResult:
    """For every ordered (anchor, positive) pair pick one negative.

    Preference: the semi-hard negative with the smallest d(a, n); failing that
    the easy negative with the smallest d(a, n). Pairs with only hard
    negatives are skipped. Ties go to the lowest index.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0 or len(np.unique(labels)) < 2:
        return MiningResult(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), [],
                            warnings=["batch has fewer than two domains; no triplets"])
    d = pairwise_distances(embeddings)
    same = labels[:, None] == labels[None, :]
    a_idx, p_idx = np.nonzero(same & ~np.eye(n, dtype=bool))
    d_ap = d[a_idx, p_idx][:, None]
    d_an = d[a_idx]  # (pairs, n)
    neg = ~same[a_idx]
    semi = neg & (d_an > d_ap) & (d_an < d_ap + margin)
    easy = neg & (d_ap + margin <= d_an)
    big = np.inf
    semi_d = np.where(semi, d_an, big)
    easy_d = np.where(easy, d_an, big)
    has_semi = semi.any(axis=1)
    has_easy = easy.any(axis=1)
    pick = np.where(has_semi, semi_d.argmin(axis=1), easy_d.argmin(axis=1))
    keep = has_semi | has_easy
    cats = [SEMI_HARD if s else EASY for s in has_semi[keep]]
    return MiningResult(
        anchors=a_idx[keep], positives=p_idx[keep], negatives=pick[keep], categories=cats,
        pairs_examined=len(a_idx), fallback_easy=int((~has_semi & has_easy).sum()),
        skipped_pairs=int((~keep).sum()),
    )


def batch_all_triplet_loss(labels, embeddings, margin: float = MARGIN) -> float:
    """Mean hinge over every valid (a, p, n) triplet; used as the validation metric."""
    labels = np.asarray(labels)
    d = pairwise_distances(embeddings)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    # loss[a, p, n] = d[a, p] - d[a, n] + margin
    loss = np.maximum(d[:, :, None] - d[:, None, :] + margin, 0.0)
    valid = pos[:, :, None] & neg[:, None, :]
    return float(loss[valid].mean()) if valid.any() else 0.0


# training

@dataclass
class TripletTrainConfig(TrainConfig):
    per_domain: int = 8
    margin: float = MARGIN


@dataclass
class TripletHistory:
    train_loss: list = field(default_factory=list)
    val_triplet_loss: list = field(default_factory=list)
    initial_val_triplet_loss: float | None = None
    mining: list = field(default_factory=list)
    best_epoch: int = -1


def _val_triplet_loss(model, maps, domains, rng_seed, per_domain=8, n_batches=8, margin=MARGIN):
    if maps is None or len(maps) == 0:
        return None
    emb = model.embed(maps)
    rng = np.random.default_rng(rng_seed)
    groups = [np.nonzero(domains == d)[0] for d in np.unique(domains)]
    losses = []
    for b, idx in enumerate(stratified_batches(groups, per_domain, rng)):
        if b >= n_batches:
            break
        losses.append(batch_all_triplet_loss(domains[idx], emb[idx], margin))
    return float(np.mean(losses))


def train_triplet_recognizer(maps, domains, classes, cfg: TripletTrainConfig,
                             val=None, model: TripletNet | None = None):
    """Train on feature maps (B, 26, 99) with integer domain ids and 0/1 classes.

    ``val`` is an optional (maps, domains) pair for the validation triplet loss.
    Returns (model, history).
    """
    domains = np.asarray(domains)
    classes = np.asarray(classes, dtype=np.float32)
    if len(np.unique(domains)) < 2:
        raise ConfigError("triplet training needs at least two basis domains")
    model = model or TripletNet(seed=cfg.seed, margin=cfg.margin)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    groups = [np.nonzero(domains == d)[0] for d in np.unique(domains)]
    hist = TripletHistory()
    val_maps, val_domains = (val if val is not None else (None, None))
    if val_domains is not None:
        val_domains = np.asarray(val_domains)
    hist.initial_val_triplet_loss = _val_triplet_loss(model, val_maps, val_domains, cfg.seed, margin=cfg.margin)
    step = 0
    for epoch in range(cfg.epochs):
        ep_losses, mined, fallback = [], 0, 0
        for idx in stratified_batches(groups, cfg.per_domain, rng):
            x = as_input(maps[idx])
            emb, prob = model.forward(x)
            res = mine_semi_hard(domains[idx], emb.data, cfg.margin)
            if len(res):
                l_tr = triplet_loss(T.take_rows(emb, res.anchors), T.take_rows(emb, res.positives),
                                    T.take_rows(emb, res.negatives), cfg.margin)
            else:
                l_tr = Tensor(np.zeros((), dtype=emb.dtype))
            l_bce = bce_loss(prob, classes[idx])
            loss = combined_loss(l_tr, l_bce, cfg.theta, cfg.alpha)
            step += 1
            ep_losses.append(check_finite(loss.data, "triplet recognizer", cfg.seed, step, epoch))
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
            opt.step(context=f" (seed {cfg.seed}, epoch {epoch})")
            mined += len(res)
            fallback += res.fallback_easy
        hist.train_loss.append(float(np.mean(ep_losses)))
        hist.mining.append({"triplets": mined, "fallback_easy": fallback})
        vl = _val_triplet_loss(model, val_maps, val_domains, cfg.seed, margin=cfg.margin)
        if vl is not None:
            hist.val_triplet_loss.append(vl)
            if hist.best_epoch < 0 or vl < hist.val_triplet_loss[hist.best_epoch]:
                hist.best_epoch = epoch
        log.debug("triplet epoch %d loss %.4f val %s", epoch, hist.train_loss[-1], vl)
        if should_stop(cfg, epoch, hist.best_epoch):
            break
    return model, hist


# embedding index and relationship factors

_INDEX_MAGIC = b"BDGE"


@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray  # (N, 72) float32, unit norm
    domain_ids: np.ndarray  # (N,) int32, positions into ``domains``
    domains: list

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int32)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.domain_ids):
            raise ConfigError("embedding index: embeddings and domain ids disagree")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ConfigError("embedding index holds non-unit vectors")
        self.embeddings.setflags(write=False)
        self.domain_ids.setflags(write=False)

    @property
    def counts(self) -> list[int]:
        return [int((self.domain_ids == i).sum()) for i in range(len(self.domains))]

    @classmethod
    def build(cls, model: TripletNet, maps, domain_ids, domains) -> "EmbeddingIndex":
        return cls(model.embed(maps), domain_ids, list(domains))

    def save(self, path) -> None:
        header = json.dumps({"dim": int(self.embeddings.shape[1]), "domains": list(self.domains),
                             "counts": self.counts, "n": int(len(self.domain_ids))}, sort_keys=True).encode()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(_INDEX_MAGIC + struct.pack("<I", len(header)) + header
                               + self.embeddings.astype("<f4").tobytes() + self.domain_ids.astype("<i4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        raw = Path(path).read_bytes()
        if raw[:4] != _INDEX_MAGIC:
            raise ConfigError(f"{path}: not an embedding index")
        (hlen,) = struct.unpack("<I", raw[4:8])
        h = json.loads(raw[8:8 + hlen])
        n, dim = h["n"], h["dim"]
        off = 8 + hlen
        emb = np.frombuffer(raw[off:off + 4 * n * dim], dtype="<f4").reshape(n, dim)
        ids = np.frombuffer(raw[off + 4 * n * dim:off + 4 * n * dim + 4 * n], dtype="<i4")
        return cls(emb.copy(), ids.copy(), h["domains"])


def relationship_factor(embedding, index: EmbeddingIndex, lam: float, chunk: int = 32) -> np.ndarray:
    """beta_i = |{j in domain i : ||e - e_j|| < lam}| / N_i.

    Accepts one embedding (72,) or a batch (B, 72); returns (n_domains,) or (B, n_domains).
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    counts = np.asarray(index.counts)
    if np.any(counts == 0):
        empty = [index.domains[i] for i in np.nonzero(counts == 0)[0]]
        raise ConfigError(f"embedding index has empty domains: {empty}")
    e = np.asarray(embedding, dtype=np.float64)
    single = e.ndim == 1
    e = np.atleast_2d(e)
    ref = index.embeddings.astype(np.float64)
    n_dom = len(index.domains)
    out = np.zeros((len(e), n_dom))
    for s in range(0, len(e), chunk):
        blk = e[s:s + chunk]
        diff = blk[:, None, :] - ref[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        close = dist < lam
        for i in range(n_dom):
            out[s:s + chunk, i] = close[:, index.domain_ids == i].sum(axis=1)
    out /= counts[None, :]
    return out[0] if single else out
