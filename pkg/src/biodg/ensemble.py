"""Per-domain classifiers, threshold/majority-vote fusion and the joint-learning baseline."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Adam, Conv2D, Dense, Flatten, MaxPool2D, ReLU, Sequential, Sigmoid, Softmax,
                       bce_loss, cce_loss, combined_loss, no_grad)
from .autodiff import tensor as T
from .bayes import N_DOMAINS, bayes_trunk_layers, task_val_loss
from .corpus import CLASSES, balance_classes
from .errors import BalanceError, ConfigError
from .training import INPUT_SHAPE, Model, TrainConfig, as_input, check_finite, should_stop, shuffled_batches

log = logging.getLogger(__name__)

ONE_TO_ONE, ONE_TO_N, ONE_TO_NONE = "one_to_one", "one_to_n", "one_to_none"
VOTE_THRESHOLD = 0.5


def _predict_column(seq: Sequential, maps, batch_size=256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(maps), batch_size):
            out.append(seq(as_input(maps[s:s + batch_size])).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0, np.float32)


# per-domain classifier

def domain_classifier_layers():
    """Two conv layers of 20 filters, each followed by relu and 2x2 pooling, then a sigmoid unit."""
    return [
        Conv2D(20, (3, 3), stride=(2, 2)), ReLU(), MaxPool2D((2, 2)),
        Conv2D(20, (3, 3)), ReLU(), MaxPool2D((2, 2)),
        Flatten(),
        Dense(1), Sigmoid(),
    ]


class DomainClassifier(Model):
    kind = "domain_classifier"

    def __init__(self, seed: int = 0, dtype=np.float32, domain_id: str = ""):
        self.domain_id = domain_id
        self.parts = {"net": Sequential(domain_classifier_layers(), "net")}
        self.parts["net"].build(INPUT_SHAPE, np.random.default_rng(seed), dtype)

    def __call__(self, x, ctx=None):
        return self.parts["net"](x)

    def predict_proba(self, maps) -> np.ndarray:
        return _predict_column(self.parts["net"], np.asarray(maps))

    def predict(self, maps) -> np.ndarray:
        return (self.predict_proba(maps) >= VOTE_THRESHOLD).astype(np.int64)

    def descriptor(self):
        d = super().descriptor()
        d["domain_id"] = self.domain_id
        return d


@dataclass
class ClassifierHistory:
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1
    n_balanced: int = 0


def train_domain_classifier(maps, classes, cfg: TrainConfig, val=None, domain_id: str = ""):
    """BCE training on class-balanced windows of a single basis domain.

    ``val`` = (maps, classes) keeps the epoch with the best validation accuracy.
    """
    classes = np.asarray(classes)
    if len(np.unique(classes)) < 2:
        raise BalanceError(f"domain {domain_id or '?'} has a single class; a binary classifier needs both")
    keep = np.asarray(balance_classes(list(range(len(classes))), cfg.seed, labels=classes.tolist()))
    x, y = np.asarray(maps)[keep], classes[keep].astype(np.float32)
    model = DomainClassifier(seed=cfg.seed, domain_id=domain_id)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 3])
    hist = ClassifierHistory(n_balanced=len(keep))
    best, best_acc, best_loss, step = None, -1.0, np.inf, 0
    for epoch in range(cfg.epochs):
        ep = []
        for idx in shuffled_batches(len(x), cfg.batch_size, rng):
            loss = bce_loss(model(as_input(x[idx])), y[idx])
            step += 1
            ep.append(check_finite(loss.data, f"classifier {domain_id}", cfg.seed, step, epoch))
            opt.zero_grad()
            loss.backward()
            opt.step(context=f" (seed {cfg.seed}, epoch {epoch})")
        hist.train_loss.append(float(np.mean(ep)))
        if val is not None:
            p = model.predict_proba(val[0])
            yv = np.asarray(val[1])
            acc = float(((p >= VOTE_THRESHOLD) == yv).mean())
            # small val sets saturate; ties go to the lower val BCE
            pc = np.clip(p.astype(np.float64), 1e-7, 1 - 1e-7)
            vloss = float(-np.mean(yv * np.log(pc) + (1 - yv) * np.log1p(-pc)))
            hist.val_acc.append(acc)
            if (acc, -vloss) > (best_acc, -best_loss):
                best, best_acc, best_loss, hist.best_epoch = model.snapshot(), acc, vloss, epoch
            if should_stop(cfg, epoch, hist.best_epoch):
                break
    if best is not None:
        model.restore(best)
    return model, hist


# fusion

def thr(v, phi: float) -> np.ndarray:
    """Elementwise 1 where v_i >= phi (inclusive), else 0."""
    return (np.asarray(v, dtype=np.float64) >= phi).astype(np.int64)


@dataclass
class RelationshipVector:
    beta: np.ndarray
    source: str  # "triplet" or "bayes"
    uncertainty: np.ndarray | None = None

    def __post_init__(self):
        if self.source not in ("triplet", "bayes"):
            raise ConfigError(f"unknown relationship source {self.source!r}")
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if np.any(self.beta < 0) or np.any(self.beta > 1) or not np.all(np.isfinite(self.beta)):
            raise ConfigError("relationship factors must lie in [0, 1]")


def select_domains(rel: RelationshipVector, phi: float | None = None) -> np.ndarray:
    """Selection mask. Triplet factors already carry lambda, so any nonzero factor selects."""
    if rel.source == "triplet":
        return (rel.beta > 0).astype(np.int64)
    if phi is None:
        raise ConfigError("bayes-sourced fusion needs a phi threshold")
    return thr(rel.beta, phi)


@dataclass
class Vote:
    domain: str
    class_label: str
    probability: float


@dataclass
class FusionResult:
    selected_domains: list
    votes: list
    relationship_kind: str
    final_class: str
    fallback_used: bool
    fallback_probability: float | None = None

    def to_json(self) -> dict:
        return {
            "selected_domains": list(self.selected_domains),
            "votes": [{"domain": v.domain, "class": v.class_label, "probability": round(v.probability, 6)}
                      for v in self.votes],
            "relationship_kind": self.relationship_kind,
            "final_class": self.final_class,
            "fallback_used": self.fallback_used,
            "fallback_probability": None if self.fallback_probability is None
            else round(self.fallback_probability, 6),
        }


def fuse_votes(mask, probs, beta, fallback_prob: float, domains) -> FusionResult:
    """Majority vote over the selected classifiers' hard predictions.

    An even split goes to the vote of the highest-beta selected domain; if
    several share that beta and disagree, abnormal wins. An empty selection
    falls back to the recognizer's class head.
    """
    mask = np.asarray(mask).astype(bool)
    probs = np.asarray(probs, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    sel = np.nonzero(mask)[0]
    if len(sel) == 0:
        return FusionResult([], [], ONE_TO_NONE, CLASSES[int(fallback_prob >= VOTE_THRESHOLD)], True,
                            float(fallback_prob))
    hard = (probs[sel] >= VOTE_THRESHOLD).astype(np.int64)
    n_abn = int(hard.sum())
    n_norm = len(sel) - n_abn
    if n_abn != n_norm:
        final = int(n_abn > n_norm)
    else:
        top = beta[sel] == beta[sel].max()
        tops = set(hard[top].tolist())
        final = tops.pop() if len(tops) == 1 else 1
    votes = [Vote(domains[i], CLASSES[h], float(probs[i])) for i, h in zip(sel, hard)]
    kind = ONE_TO_ONE if len(sel) == 1 else ONE_TO_N
    return FusionResult([domains[i] for i in sel], votes, kind, CLASSES[final], False)


def fuse(fmap, rel: RelationshipVector, phi: float | None, classifiers, recognizer_class_prob: float,
         domains=None) -> FusionResult:
    """Fuse one instance: select by ``rel``, then vote among the selected classifiers."""
    domains = domains or [getattr(c, "domain_id", str(i)) for i, c in enumerate(classifiers)]
    if len(rel.beta) != len(classifiers):
        raise ConfigError("relationship vector and classifier list differ in length")
    mask = select_domains(rel, phi)
    probs = np.zeros(len(classifiers))
    x = np.asarray(fmap)[None]
    for i in np.nonzero(mask)[0]:
        probs[i] = classifiers[i].predict_proba(x)[0]
    return fuse_votes(mask, probs, rel.beta, recognizer_class_prob, domains)


def fuse_batch(masks, probs, betas, fallback_probs, domains) -> list[FusionResult]:
    """Vectorised-input helper: rows of precomputed masks, classifier probabilities and factors."""
    return [fuse_votes(m, p, b, f, domains) for m, p, b, f in zip(masks, probs, betas, fallback_probs)]


# joint-learning baseline

def combine_branches(di, dsc) -> np.ndarray:
    """y = sum_i di_i * dsc_i (numpy reference for the baseline's fused output)."""
    return (np.asarray(di, dtype=np.float64) * np.asarray(dsc, dtype=np.float64)).sum(axis=-1)


class BaselineModel(Model):
    """Domain identifier (non-Bayesian recognizer topology) plus one classifier branch per domain."""

    kind = "baseline"

    def __init__(self, n_domains: int = N_DOMAINS, seed: int = 0, dtype=np.float32):
        self.n_domains = n_domains
        di = bayes_trunk_layers(conv=Conv2D, dense=Dense) + [Dense(n_domains), Softmax()]
        self.parts = {"di": Sequential(di, "di")}
        for i in range(n_domains):
            self.parts[f"dsc{i}"] = Sequential(domain_classifier_layers(), f"dsc{i}")
        rng = np.random.default_rng(seed)
        for seq in self.parts.values():
            seq.build(INPUT_SHAPE, rng, dtype)

    def forward(self, x):
        di = self.parts["di"](x)
        dsc = T.stack_last([self.parts[f"dsc{i}"](x) for i in range(self.n_domains)])
        y = T.row_sum(T.mul(di, dsc))
        return di, dsc, T.reshape(y, (y.shape[0],))

    def predict(self, maps, batch_size: int = 256):
        """(domain probabilities, branch outputs, fused class probability)."""
        dis, dscs, ys = [], [], []
        with no_grad():
            for s in range(0, len(maps), batch_size):
                di, dsc, y = self.forward(as_input(maps[s:s + batch_size]))
                dis.append(di.data)
                dscs.append(dsc.data)
                ys.append(y.data)
        return np.concatenate(dis), np.concatenate(dscs), np.concatenate(ys)


def baseline_predict(model: BaselineModel, fmap) -> float:
    _, _, y = model.predict(np.asarray(fmap)[None])
    return float(y[0])


@dataclass
class BaselineTrainConfig(TrainConfig):
    theta: float = 0.9
    alpha: float = 0.1


@dataclass
class BaselineHistory:
    train_loss: list = field(default_factory=list)
    val_domain_acc: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_domain_acc: float = float("nan")


def train_baseline(maps, domains, classes, cfg: BaselineTrainConfig, val=None, n_domains: int = N_DOMAINS):
    """One backward pass per batch through theta*CCE(di) + alpha*BCE(fused y).

    ``val`` = (maps, domains[, classes]) keeps the checkpoint with the best
    domain accuracy; with classes given, ties go to the lower task loss.
    """
    domains = np.asarray(domains)
    classes = np.asarray(classes, dtype=np.float32)
    if len(np.unique(domains)) != n_domains:
        raise ConfigError(f"baseline training needs all {n_domains} basis domains")
    model = BaselineModel(n_domains=n_domains, seed=cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 4])
    hist = BaselineHistory()
    best, best_loss, step = None, np.inf, 0
    for epoch in range(cfg.epochs):
        ep = []
        for idx in shuffled_batches(len(maps), cfg.batch_size, rng):
            di, _, y = model.forward(as_input(maps[idx]))
            loss = combined_loss(cce_loss(di, domains[idx]), bce_loss(y, classes[idx]), cfg.theta, cfg.alpha)
            step += 1
            ep.append(check_finite(loss.data, "baseline", cfg.seed, step, epoch))
            opt.zero_grad()
            loss.backward()
            opt.step(context=f" (seed {cfg.seed}, epoch {epoch})")
        hist.train_loss.append(float(np.mean(ep)))
        if val is not None:
            di, _, y = model.predict(val[0])
            vd = np.asarray(val[1])
            acc = float((di.argmax(axis=1) == vd).mean())
            vloss = task_val_loss(di, y, vd, val[2], cfg) if len(val) > 2 else 0.0
            hist.val_domain_acc.append(acc)
            if best is None or (acc, -vloss) > (hist.best_val_domain_acc, -best_loss):
                hist.best_val_domain_acc, hist.best_epoch, best_loss = acc, epoch, vloss
                best = model.snapshot()
            if should_stop(cfg, epoch, hist.best_epoch):
                break
    if best is not None:
        model.restore(best)
    return model, hist
