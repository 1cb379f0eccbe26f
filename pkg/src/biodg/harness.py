"""Experiment orchestration: corpora, feature cache, cross-validation and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bayes import BayesNet, BayesTrainConfig, mc_predict, train_bayes_recognizer
from .corpus import (CLASSES, SynthConfig, generate_synthetic_domain, list_domains, load_window, read_manifest,
                     split_folds, write_domain)
from .ensemble import (BaselineModel, BaselineTrainConfig, DomainClassifier, fuse_batch, thr,
                       train_baseline, train_domain_classifier)
from .errors import ConfigError, MissingFeaturesError, ShapeError
from .features import FeatureStats, compute_mfcc_batch, read_feature_block, standardize, write_feature_block
from .training import TrainConfig
from .triplet import (EMBED_DIM, MARGIN, EmbeddingIndex, TripletNet, TripletTrainConfig, relationship_factor,
                      train_triplet_recognizer)

log = logging.getLogger(__name__)

BASELINE_COL, BCNN_COL, TRIPLET_COL = "BL", "BCNN", "1-Sh-Cl"
TRIPLET_FUSION, BAYES_FUSION = "OneSh+Ense", "BCNN+Ense"
BASIS_ROW = "basis (held-out folds)"

# Published reference values for the same table layout on clinical data.
# They are context only: nothing in this package reproduces them.
PAPER_CONTEXT = {
    "note": "published reference values on clinical corpora; not reproduced by this run",
    "rows": {
        "m3-h": {"BL": 52.27, "best_OneSh+Ense": 68.45, "gain_OneSh+Ense": 16.18,
                 "best_BCNN+Ense": 62.17, "gain_BCNN+Ense": 9.90},
        "ph-net": {"BL": 88.14, "BCNN": 86.17, "1-Sh-Cl": 81.20},
    },
    "recognizers": {"bayes_domain_accuracy": 93.12, "baseline_domain_accuracy": 89.29,
                    "triplet_train_loss": 0.34, "triplet_val_loss": 0.22},
}


# synthetic preset corpus

BASIS_PRESET = {
    "a": dict(s1_center_hz=40, s2_center_hz=70, murmur_band_hz=(150, 250), device_coloration=(1.0, 1.0),
              heart_rate_bpm=(60, 80), noise_std=0.02, shelf_crossover_hz=150, hum_hz=50, hum_gain=0.1),
    "b": dict(s1_center_hz=70, s2_center_hz=110, murmur_band_hz=(250, 400), device_coloration=(1.0, 0.5),
              heart_rate_bpm=(70, 90), noise_std=0.01, shelf_crossover_hz=120, hum_hz=120, hum_gain=0.1),
    "c": dict(s1_center_hz=100, s2_center_hz=160, murmur_band_hz=(350, 500), device_coloration=(0.5, 1.5),
              heart_rate_bpm=(50, 70), noise_std=0.04, shelf_crossover_hz=250, hum_hz=230, hum_gain=0.1),
    "d": dict(s1_center_hz=130, s2_center_hz=190, murmur_band_hz=(260, 380), device_coloration=(1.5, 0.7),
              heart_rate_bpm=(85, 105), noise_std=0.02, shelf_crossover_hz=200, hum_hz=480, hum_gain=0.1),
    "e": dict(s1_center_hz=160, s2_center_hz=240, murmur_band_hz=(420, 560), device_coloration=(0.7, 1.0),
              heart_rate_bpm=(65, 85), noise_std=0.06, shelf_crossover_hz=300, hum_hz=330, hum_gain=0.1),
    "f": dict(s1_center_hz=200, s2_center_hz=280, murmur_band_hz=(300, 450), device_coloration=(1.0, 1.4),
              heart_rate_bpm=(120, 150), noise_std=0.03, shelf_crossover_hz=150, hum_hz=560, hum_gain=0.1,
              n_records=(15, 5)),
}
# u1 is built to overlap f (same bands and device, faster and noisier); u2 sits between a and b.
UNSEEN_PRESET = {
    "u1": dict(s1_center_hz=200, s2_center_hz=280, murmur_band_hz=(300, 450), device_coloration=(1.0, 1.4),
               heart_rate_bpm=(130, 160), noise_std=0.04, shelf_crossover_hz=150, hum_hz=560, hum_gain=0.1,
               murmur_gain=0.2, record_s=10.0, n_records=(12, 12)),
    "u2": dict(s1_center_hz=55, s2_center_hz=90, murmur_band_hz=(200, 330), device_coloration=(1.0, 0.75),
               heart_rate_bpm=(65, 85), noise_std=0.015, shelf_crossover_hz=135, hum_hz=85, hum_gain=0.1,
               record_s=10.0, n_records=(12, 12)),
}
OVERLAP_DOMAIN = "u1"
EXECUTION_ONLY = ("out_dir", "jobs", "save_models")


def build_synthetic_corpus(out_dir, seed: int = 0, basis=None, unseen=None) -> list[str]:
    """Write the six-basis/two-unseen preset (or custom dicts of SynthConfig overrides)."""
    basis = BASIS_PRESET if basis is None else basis
    unseen = UNSEEN_PRESET if unseen is None else unseen
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, (dom, over) in enumerate(list(basis.items()) + list(unseen.items())):
        role = "basis" if dom in basis else "unseen"
        cfg = SynthConfig.from_dict({**over, "seed": seed * 1000 + i})
        shift = 0.2 if role == "basis" else 0.5
        synth = generate_synthetic_domain(cfg, dom, role, window_shift_s=shift)
        write_domain(out, synth.manifest, synth.records, synth.instances)
        ids.append(dom)
    (out / "corpus.json").write_text(json.dumps({"domains": ids, "seed": seed}, indent=2, sort_keys=True))
    return ids


# feature cache

def _feature_path(corpus_dir, domain):
    return Path(corpus_dir) / "features" / f"{domain}.feat"


def extract_features(corpus_dir, domains=None) -> dict:
    """Compute MFCC maps for every instance and cache one block per domain."""
    out = {}
    for dom in domains or list_domains(corpus_dir):
        _, rows = read_manifest(corpus_dir, dom)
        cache: dict = {}
        windows = np.stack([load_window(corpus_dir, dom, r, cache).samples for r in rows])
        maps = compute_mfcc_batch(windows)
        write_feature_block(_feature_path(corpus_dir, dom), maps)
        out[dom] = len(rows)
    return out


@dataclass
class DomainData:
    domain_id: str
    role: str
    maps: np.ndarray  # raw (unstandardized) MFCC maps, (N, 26, 99)
    classes: np.ndarray  # 0 normal, 1 abnormal
    record_ids: list
    rows: list

    def subset(self, idx) -> "DomainData":
        idx = np.asarray(idx, dtype=np.int64)
        return DomainData(self.domain_id, self.role, self.maps[idx], self.classes[idx],
                          [self.record_ids[i] for i in idx], [self.rows[i] for i in idx])

    def pairs(self):
        return [(r, CLASSES[c]) for r, c in zip(self.record_ids, self.classes)]


def load_domain(corpus_dir, domain) -> DomainData:
    manifest, rows = read_manifest(corpus_dir, domain)
    path = _feature_path(corpus_dir, domain)
    if not path.exists():
        raise MissingFeaturesError(f"no cached features for domain {domain!r}; "
                                   f"run `biodg features extract --corpus {corpus_dir}` first")
    maps = read_feature_block(path)
    if len(maps) != len(rows):
        raise MissingFeaturesError(f"feature cache for {domain!r} is stale ({len(maps)} maps, {len(rows)} rows); "
                                   f"rerun `biodg features extract --corpus {corpus_dir}`")
    classes = np.asarray([CLASSES.index(r["class"]) for r in rows], dtype=np.int64)
    return DomainData(domain, manifest.role, maps, classes, [r["record_id"] for r in rows], rows)


def load_corpus(corpus_dir) -> tuple[list[DomainData], list[DomainData]]:
    data = [load_domain(corpus_dir, d) for d in list_domains(corpus_dir)]
    return [d for d in data if d.role == "basis"], [d for d in data if d.role == "unseen"]


# configuration

@dataclass
class ExperimentConfig:
    corpus_dir: str = "corpus"
    out_dir: str = "runs/experiment"
    recognizers: list = field(default_factory=lambda: ["triplet", "bayes"])
    theta: float = 1.0
    alpha: float = 1.0
    baseline_theta: float = 0.9
    baseline_alpha: float = 0.1
    epochs: int = 300
    patience: int | None = None
    batch_size: int = 64
    learning_rate: float = 1e-3
    per_domain: int = 8
    margin: float = MARGIN
    k_folds: int = 10
    inner_val_k: int = 8
    seed: int = 0
    lambdas: list = field(default_factory=lambda: [0.2, 0.5, 1.0])
    phis: list = field(default_factory=lambda: [0.2, 0.5, 0.7])
    mc_samples: int = 100
    folds: list | None = None  # subset of fold ids to run; None runs all
    save_models: bool = True
    jobs: int = 1  # folds trained in parallel worker processes

    def validate(self, check_corpus: bool = True):
        for name in ("lambdas", "phis"):
            vals = getattr(self, name)
            if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
                raise ConfigError(f"{name} must be a nonempty grid within [0, 1]")
        bad = set(self.recognizers) - {"triplet", "bayes"}
        if bad or not self.recognizers:
            raise ConfigError(f"recognizers must be drawn from triplet/bayes, got {self.recognizers}")
        if self.k_folds < 2 or self.inner_val_k < 2:
            raise ConfigError("k_folds and inner_val_k must be at least 2")
        if self.epochs < 1 or self.mc_samples < 1 or self.batch_size < 1 or self.jobs < 1:
            raise ConfigError("epochs, mc_samples, batch_size and jobs must be positive")
        if min(self.theta, self.alpha, self.baseline_theta, self.baseline_alpha) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.folds is not None and any(not 0 <= f < self.k_folds for f in self.folds):
            raise ConfigError(f"fold ids must lie in 0..{self.k_folds - 1}")
        if check_corpus:
            doms = list_domains(self.corpus_dir)
            if not doms:
                raise ConfigError(f"no domains found under {self.corpus_dir}")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    def result_settings(self) -> dict:
        """Settings that can change results; output location and parallelism cannot."""
        d = self.to_json()
        for k in EXECUTION_ONLY:
            d.pop(k)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=seed, patience=self.patience)

    def triplet_config(self, seed):
        return TripletTrainConfig(**{**asdict(self.train_config(seed)), "theta": self.theta, "alpha": self.alpha,
                                     "per_domain": self.per_domain, "margin": self.margin})

    def bayes_config(self, seed):
        return BayesTrainConfig(**{**asdict(self.train_config(seed)), "theta": self.theta, "alpha": self.alpha})

    def baseline_config(self, seed):
        return BaselineTrainConfig(**{**asdict(self.train_config(seed)), "theta": self.baseline_theta,
                                      "alpha": self.baseline_alpha})


def synthetic_experiment_config(corpus_dir, out_dir, seed: int = 0) -> ExperimentConfig:
    """Desk-scale settings: 60 epochs with early stopping, batch 32, 5 folds."""
    return ExperimentConfig(corpus_dir=str(corpus_dir), out_dir=str(out_dir), epochs=60, patience=15,
                            batch_size=32, k_folds=5, seed=seed)


# trained bundle

@dataclass
class ModelBundle:
    domains: list
    stats: FeatureStats
    triplet: TripletNet | None = None
    index: EmbeddingIndex | None = None
    bayes: BayesNet | None = None
    classifiers: list = field(default_factory=list)
    baseline: BaselineModel | None = None
    histories: dict = field(default_factory=dict)

    def save(self, out_dir):
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "bundle.json").write_text(json.dumps({"domains": self.domains, "stats": self.stats.to_json()},
                                                  indent=2, sort_keys=True))
        if self.triplet is not None:
            self.triplet.save(d / "triplet")
        if self.index is not None:
            self.index.save(d / "triplet.index.bin")
        if self.bayes is not None:
            self.bayes.save(d / "bayes")
        for c in self.classifiers:
            c.save(d / f"classifier.{c.domain_id}")
        if self.baseline is not None:
            self.baseline.save(d / "baseline")

    @classmethod
    def load(cls, out_dir, need=()) -> "ModelBundle":
        d = Path(out_dir)
        meta_path = d / "bundle.json"
        if not meta_path.exists():
            raise ConfigError(f"{d} holds no trained models (bundle.json missing)")
        meta = json.loads(meta_path.read_text())
        b = cls(meta["domains"], FeatureStats.from_json(meta["stats"]))
        if (d / "triplet.ckpt.json").exists():
            b.triplet = TripletNet()
            b.triplet.load_values(d / "triplet")
            b.index = EmbeddingIndex.load(d / "triplet.index.bin")
        if (d / "bayes.ckpt.json").exists():
            b.bayes = BayesNet(n_domains=len(b.domains))
            b.bayes.load_values(d / "bayes")
        if all((d / f"classifier.{dom}.ckpt.json").exists() for dom in b.domains):
            for dom in b.domains:
                c = DomainClassifier(domain_id=dom)
                c.load_values(d / f"classifier.{dom}")
                b.classifiers.append(c)
        if (d / "baseline.ckpt.json").exists():
            b.baseline = BaselineModel(n_domains=len(b.domains))
            b.baseline.load_values(d / "baseline")
        for what in need:
            missing = getattr(b, what) in (None, [])
            if missing:
                raise ConfigError(f"{d}: no trained {what}; run the matching `biodg train` command first")
        return b


def _inner_split(data: list[DomainData], k: int, seed: int):
    """Per-domain record-atomic carve of one validation fold out of the training data."""
    fit, val = [], []
    for j, dd in enumerate(data):
        folds = split_folds(dd.pairs(), k, seed + 7919 * j)
        mask = np.zeros(len(dd.classes), bool)
        mask[folds[0]] = True
        fit.append(dd.subset(np.nonzero(~mask)[0]))
        val.append(dd.subset(np.nonzero(mask)[0]))
    return fit, val


def _pool(data: list[DomainData], stats: FeatureStats):
    maps = np.concatenate([standardize(d.maps, stats) for d in data]).astype(np.float32)
    doms = np.concatenate([np.full(len(d.classes), j) for j, d in enumerate(data)])
    classes = np.concatenate([d.classes for d in data])
    return maps, doms, classes


def train_bundle(train: list[DomainData], cfg: ExperimentConfig, seed: int, which=("triplet", "bayes",
                 "classifiers", "baseline"), stats: FeatureStats | None = None) -> ModelBundle:
    """Fit standardization, recognizers, per-domain classifiers and the baseline on training data only."""
    if stats is None:
        stats = FeatureStats.fit(np.concatenate([d.maps for d in train]))
    fit, val = _inner_split(train, cfg.inner_val_k, seed)
    x_fit, d_fit, c_fit = _pool(fit, stats)
    x_val, d_val, c_val = _pool(val, stats)
    b = ModelBundle([d.domain_id for d in train], stats)
    timings = {}
    if "triplet" in which:
        t = time.perf_counter()
        b.triplet, h = train_triplet_recognizer(x_fit, d_fit, c_fit, cfg.triplet_config(seed), val=(x_val, d_val))
        x_all, d_all, _ = _pool(train, stats)
        b.index = EmbeddingIndex.build(b.triplet, x_all, d_all, b.domains)
        b.histories["triplet"] = {"epochs_run": len(h.train_loss), "final_train_loss": h.train_loss[-1],
                                  "initial_val_triplet_loss": h.initial_val_triplet_loss,
                                  "final_val_triplet_loss": h.val_triplet_loss[-1] if h.val_triplet_loss else None}
        timings["triplet"] = time.perf_counter() - t
    if "bayes" in which:
        t = time.perf_counter()
        b.bayes, h = train_bayes_recognizer(x_fit, d_fit, c_fit, cfg.bayes_config(seed + 1),
                                            val=(x_val, d_val, c_val),
                                            n_domains=len(train))
        b.histories["bayes"] = {"epochs_run": len(h.train_loss), "best_epoch": h.best_epoch,
                                "best_val_domain_acc": h.best_val_domain_acc}
        timings["bayes"] = time.perf_counter() - t
    if "classifiers" in which:
        t = time.perf_counter()
        b.histories["classifiers"] = {}
        for j, (f, v) in enumerate(zip(fit, val)):
            c, h = train_domain_classifier(standardize(f.maps, stats).astype(np.float32), f.classes,
                                           cfg.train_config(seed + 10 + j),
                                           val=(standardize(v.maps, stats).astype(np.float32), v.classes),
                                           domain_id=f.domain_id)
            b.classifiers.append(c)
            b.histories["classifiers"][f.domain_id] = {"epochs_run": len(h.train_loss), "best_epoch": h.best_epoch,
                                                       "n_balanced": h.n_balanced}
        timings["classifiers"] = time.perf_counter() - t
    if "baseline" in which:
        t = time.perf_counter()
        b.baseline, h = train_baseline(x_fit, d_fit, c_fit, cfg.baseline_config(seed + 2),
                                       val=(x_val, d_val, c_val),
                                       n_domains=len(train))
        b.histories["baseline"] = {"epochs_run": len(h.train_loss), "best_epoch": h.best_epoch,
                                   "best_val_domain_acc": h.best_val_domain_acc}
        timings["baseline"] = time.perf_counter() - t
    b.histories["timings_s"] = timings
    return b


# evaluation

def fusion_columns(cfg: ExperimentConfig) -> tuple[list, list]:
    lam = [f"{TRIPLET_FUSION} lambda<{v:g}" for v in cfg.lambdas] if "triplet" in cfg.recognizers else []
    phi = [f"{BAYES_FUSION} p>={v:g}" for v in cfg.phis] if "bayes" in cfg.recognizers else []
    return lam, phi


def table_columns(cfg: ExperimentConfig) -> list:
    lam, phi = fusion_columns(cfg)
    cols = [BASELINE_COL]
    if "bayes" in cfg.recognizers:
        cols.append(BCNN_COL)
    if "triplet" in cfg.recognizers:
        cols.append(TRIPLET_COL)
    return cols + lam + phi


def predict_all(b: ModelBundle, maps_raw, cfg: ExperimentConfig, mc_seed: int) -> dict:
    """Hard abnormal predictions of every pipeline column, plus recognition side outputs."""
    x = standardize(maps_raw, b.stats).astype(np.float32)
    out = {"pred": {}, "kinds": {}}
    clf_probs = np.stack([c.predict_proba(x) for c in b.classifiers], axis=1)
    out["classifier_probs"] = clf_probs
    di, _, y = b.baseline.predict(x)
    out["pred"][BASELINE_COL] = y >= 0.5
    out["baseline_domain"] = di.argmax(axis=1)
    lam_cols, phi_cols = fusion_columns(cfg)
    if b.bayes is not None:
        mc = mc_predict(b.bayes, x, cfg.mc_samples, mc_seed)
        out["pred"][BCNN_COL] = mc.class_prob >= 0.5
        out["bayes_domain"] = mc.domain_probs.argmax(axis=1)
        for col, phi in zip(phi_cols, cfg.phis):
            res = fuse_batch(thr(mc.domain_probs, phi), clf_probs, mc.domain_probs, mc.class_prob, b.domains)
            out["pred"][col] = np.array([r.final_class == "abnormal" for r in res])
            out["kinds"][col] = Counter(r.relationship_kind for r in res)
    if b.triplet is not None:
        emb, prob = b.triplet.predict(x)
        out["pred"][TRIPLET_COL] = prob >= 0.5
        out["embeddings"] = emb
        for col, lam in zip(lam_cols, cfg.lambdas):
            beta = relationship_factor(emb, b.index, lam)
            res = fuse_batch(beta > 0, clf_probs, beta, prob, b.domains)
            out["pred"][col] = np.array([r.final_class == "abnormal" for r in res])
            out["kinds"][col] = Counter(r.relationship_kind for r in res)
    return out


def accuracy_stats(pred, classes) -> dict:
    """Overall and per-class accuracy in percent, with class counts."""
    pred = np.asarray(pred).astype(np.int64)
    classes = np.asarray(classes)
    if pred.shape != classes.shape:
        raise ShapeError(f"predictions {pred.shape} and labels {classes.shape} differ in shape")
    out = {"overall": 100.0 * float((pred == classes).mean()), "n": {}}
    for ci, name in enumerate(CLASSES):
        m = classes == ci
        out["n"][name] = int(m.sum())
        out[name] = 100.0 * float((pred[m] == ci).mean()) if m.any() else None
    return out


def domain_accuracy_matrix(classifiers, sets: dict) -> dict:
    """Entry (i, j): accuracy of classifier i on domain j, overall and per class."""
    names = list(sets)
    res = {"rows": [c.domain_id for c in classifiers], "cols": names,
           "overall": np.zeros((len(classifiers), len(names)))}
    for cname in CLASSES:
        res[cname] = np.full((len(classifiers), len(names)), np.nan)
    for j, name in enumerate(names):
        maps, classes = sets[name]
        for i, c in enumerate(classifiers):
            st = accuracy_stats(c.predict(maps), classes)
            res["overall"][i, j] = st["overall"]
            for cname in CLASSES:
                if st[cname] is not None:
                    res[cname][i, j] = st[cname]
    return res


def embedding_separation(emb, domains) -> dict:
    """Mean pairwise distance within and across domains (self-pairs excluded)."""
    e = np.asarray(emb, dtype=np.float64)
    g = e @ e.T
    sq = np.diag(g)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * g, 0.0))
    same = np.asarray(domains)[:, None] == np.asarray(domains)[None, :]
    off = ~np.eye(len(e), dtype=bool)
    intra = float(dist[same & off].mean())
    inter = float(dist[~same].mean())
    return {"intra": intra, "inter": inter, "ratio": intra / inter}


def export_embeddings(model: TripletNet, maps, labels, path) -> Path:
    """Write a raw float32 little-endian (N, 72) block plus one JSON label line per row."""
    emb = model.embed(np.asarray(maps, dtype=np.float32))
    if len(emb) != len(labels):
        raise ConfigError("one label row per embedding is required")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(emb.astype("<f4").tobytes())
    lab_path = path.with_name(path.stem + ".labels.jsonl")
    with open(lab_path, "w") as fh:
        for row in labels:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_embeddings(path) -> tuple[np.ndarray, list]:
    path = Path(path)
    emb = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(-1, EMBED_DIM).copy()
    lab_path = path.with_name(path.stem + ".labels.jsonl")
    labels = [json.loads(s) for s in lab_path.read_text().splitlines() if s]
    return emb, labels


# cross-validation

def _fold_assignments(basis: list[DomainData], k: int, seed: int) -> list[list[np.ndarray]]:
    return [split_folds(d.pairs(), k, seed + 104729 * j) for j, d in enumerate(basis)]


def run_fold(fold: int, basis, unseen, assignments, cfg: ExperimentConfig) -> dict:
    """Train on k-1 folds, evaluate on the held-out fold and on every unseen domain."""
    t0 = time.perf_counter()
    fold_seed = cfg.seed * 100003 + 1009 * fold
    train, test = [], []
    for dd, folds in zip(basis, assignments):
        mask = np.zeros(len(dd.classes), bool)
        mask[folds[fold]] = True
        train.append(dd.subset(np.nonzero(~mask)[0]))
        test.append(dd.subset(np.nonzero(mask)[0]))
    which = [w for w in ("triplet", "bayes") if w in cfg.recognizers] + ["classifiers", "baseline"]
    bundle = train_bundle(train, cfg, fold_seed, which)
    t_train = time.perf_counter() - t0

    held_maps = np.concatenate([d.maps for d in test])
    held_cls = np.concatenate([d.classes for d in test])
    held_dom = np.concatenate([np.full(len(d.classes), j) for j, d in enumerate(test)])
    sets = {BASIS_ROW: (held_maps, held_cls)}
    sets.update({d.domain_id: (d.maps, d.classes) for d in unseen})

    rows = {}
    recog = {}
    for r, (name, (maps, cls)) in enumerate(sets.items()):
        out = predict_all(bundle, maps, cfg, mc_seed=fold_seed + 17 + r)
        rows[name] = {
            "n": int(len(cls)),
            "columns": {col: accuracy_stats(p, cls) for col, p in out["pred"].items()},
            "relationship_kinds": {col: dict(sorted(c.items())) for col, c in out["kinds"].items()},
        }
        if name == BASIS_ROW:
            recog["baseline_domain_acc"] = 100.0 * float((out["baseline_domain"] == held_dom).mean())
            if "bayes_domain" in out:
                recog["bayes_domain_acc"] = 100.0 * float((out["bayes_domain"] == held_dom).mean())
            if "embeddings" in out:
                recog["embedding_separation"] = embedding_separation(out["embeddings"], held_dom)
            own = {}
            for j, d in enumerate(test):
                m = held_dom == j
                own[d.domain_id] = accuracy_stats(out["classifier_probs"][m, j] >= 0.5, held_cls[m])["overall"]
            recog["classifier_own_domain_acc"] = own

    mat_sets = {d.domain_id: (standardize(d.maps, bundle.stats).astype(np.float32), d.classes) for d in test}
    mat_sets.update({d.domain_id: (standardize(d.maps, bundle.stats).astype(np.float32), d.classes) for d in unseen})
    matrix = domain_accuracy_matrix(bundle.classifiers, mat_sets)

    audit = {
        "train_records": {d.domain_id: sorted(set(d.record_ids)) for d in train},
        "test_records": {d.domain_id: sorted(set(d.record_ids)) for d in test},
        "standardization_fit_windows": int(sum(len(d.classes) for d in train)),
        "embedding_index_windows": int(len(bundle.index.domain_ids)) if bundle.index is not None else 0,
    }
    histories = {k: v for k, v in bundle.histories.items() if k != "timings_s"}
    result = {
        "fold": fold,
        "seed": fold_seed,
        "rows": rows,
        "recognition": recog,
        "matrix": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in matrix.items()},
        "training": histories,
        "audit": audit,
    }
    runtime = {"fold": fold, "train_s": t_train, "total_s": time.perf_counter() - t0,
               "per_model_s": bundle.histories.get("timings_s", {})}
    return result, runtime, bundle


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return None if not np.isfinite(v) else v
    if isinstance(x, np.integer):
        return int(x)
    return x


def _write_fold_log(out_dir, result):
    path = Path(out_dir) / "folds" / f"fold{result['fold']:02d}.log.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, row in result["rows"].items():
        lines.append({"fold": result["fold"], "kind": "evaluation", "set": name, **row})
    lines.append({"fold": result["fold"], "kind": "recognition", **result["recognition"]})
    lines.append({"fold": result["fold"], "kind": "matrix", **result["matrix"]})
    lines.append({"fold": result["fold"], "kind": "training", "seed": result["seed"], **result["training"]})
    lines.append({"fold": result["fold"], "kind": "audit", **result["audit"]})
    with open(path, "w") as fh:
        for line in lines:
            fh.write(json.dumps(_jsonable(line), sort_keys=True) + "\n")
    return path


def _fold_job(args):
    f, keep_bundle, basis, unseen, assignments, cfg = args
    log.info("fold %d/%d", f + 1, cfg.k_folds)
    res, rt, bundle = run_fold(f, basis, unseen, assignments, cfg)
    return res, rt, bundle if keep_bundle else None


def _fold_runs(folds, basis, unseen, assignments, cfg):
    """Yield fold results in fold order. Every fold seeds itself, so parallelism does not change results."""
    jobs = [(f, i == 0, basis, unseen, assignments, cfg) for i, f in enumerate(folds)]
    if cfg.jobs == 1 or len(folds) == 1:
        yield from map(_fold_job, jobs)
        return
    with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(folds))) as pool:
        yield from pool.map(_fold_job, jobs)


def run_cross_validation(cfg: ExperimentConfig) -> dict:
    """Full protocol; writes fold logs, report files, matrix.csv and embeddings under ``cfg.out_dir``."""
    cfg.validate()
    basis, unseen = load_corpus(cfg.corpus_dir)
    if len(basis) < 2:
        raise ConfigError("the experiment needs at least two basis domains")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    assignments = _fold_assignments(basis, cfg.k_folds, cfg.seed)
    folds = cfg.folds if cfg.folds is not None else list(range(cfg.k_folds))
    results, runtimes = [], []
    for f, (res, rt, bundle) in zip(folds, _fold_runs(folds, basis, unseen, assignments, cfg)):
        _write_fold_log(out, res)
        results.append(res)
        runtimes.append(rt)
        if f == folds[0]:
            if bundle.triplet is not None:
                all_data = basis + unseen
                maps = np.concatenate([standardize(d.maps, bundle.stats) for d in all_data])
                labels = [{"domain": d.domain_id, "role": d.role, "class": CLASSES[c], "record_id": r["record_id"],
                           "window_start_s": r["window_start_s"]}
                          for d in all_data for c, r in zip(d.classes, d.rows)]
                export_embeddings(bundle.triplet, maps, labels, out / "embeddings.bin")
            if cfg.save_models:
                bundle.save(out / "models")
    report = aggregate(results, cfg, [d.domain_id for d in basis], [d.domain_id for d in unseen])
    emit_report(report, out)
    write_matrix_csv(report["matrix"], out / "matrix.csv")
    (out / "runtime.json").write_text(json.dumps({"folds": runtimes,
                                                  "total_s": sum(r["total_s"] for r in runtimes)}, indent=2))
    return report


# aggregation and report emission

def _r(v, nd=2):
    return None if v is None else round(float(v), nd)


def _mean_std(vals, nd=2):
    vals = [v for v in vals if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    return {"mean": _r(np.mean(vals), nd), "std": _r(np.std(vals), nd)}


def aggregate(results: list, cfg: ExperimentConfig, basis_ids, unseen_ids) -> dict:
    """Mean and (population) std across folds; gains use the rounded means."""
    cols = table_columns(cfg)
    lam_cols, phi_cols = fusion_columns(cfg)
    rows = []
    for name in [BASIS_ROW] + list(unseen_ids):
        per = [res["rows"][name] for res in results]
        values = {c: _mean_std([p["columns"][c]["overall"] for p in per]) for c in cols}
        per_class = {c: {cn: _mean_std([p["columns"][c][cn] for p in per])["mean"] for cn in CLASSES} for c in cols}
        bl = values[BASELINE_COL]["mean"]
        gains, best = {}, {}
        for group, gcols in ((TRIPLET_FUSION, lam_cols), (BAYES_FUSION, phi_cols)):
            if not gcols:
                continue
            top = max(gcols, key=lambda c: (values[c]["mean"], -gcols.index(c)))
            best[group] = top
            gains[group] = _r(values[top]["mean"] - bl)
        fallback = {c: _r(100.0 * np.mean([p["relationship_kinds"].get(c, {}).get("one_to_none", 0) / p["n"]
                                            for p in per])) for c in lam_cols + phi_cols}
        rows.append({"domain": name, "role": "basis" if name == BASIS_ROW else "unseen", "n": per[0]["n"],
                     "values": values, "per_class": per_class, "best": best, "gains": gains,
                     "fallback_rate": fallback})
    recog = {}
    for key in ("bayes_domain_acc", "baseline_domain_acc"):
        vals = [r["recognition"].get(key) for r in results]
        if any(v is not None for v in vals):
            recog[key] = _mean_std(vals)
    if any("embedding_separation" in r["recognition"] for r in results):
        recog["embedding_separation"] = {
            k: _mean_std([r["recognition"]["embedding_separation"][k] for r in results], 4)
            for k in ("intra", "inter", "ratio")}
    recog["classifier_own_domain_acc"] = {
        d: _mean_std([r["recognition"]["classifier_own_domain_acc"][d] for r in results]) for d in basis_ids}
    mcols = results[0]["matrix"]["cols"]
    matrix = {"rows": list(basis_ids), "cols": mcols}
    for metric in ("overall",) + CLASSES:
        stack = np.array([np.asarray(r["matrix"][metric], dtype=np.float64) for r in results])
        matrix[metric] = [[_r(v) for v in row] for row in np.nanmean(stack, axis=0)]
    return {
        "config": cfg.result_settings(),
        "folds_run": [r["fold"] for r in results],
        "columns": cols,
        "rows": rows,
        "recognition": recog,
        "matrix": matrix,
        "overlap_domain": OVERLAP_DOMAIN if OVERLAP_DOMAIN in unseen_ids else None,
        "paper_context": PAPER_CONTEXT,
    }


def _table(report):
    """Header and rows of the main table: mean values then gain columns."""
    cols = report["columns"]
    groups = [g for g in (TRIPLET_FUSION, BAYES_FUSION) if any(g in r["gains"] for r in report["rows"])]
    header = ["DB"] + cols + [f"Gain {g}" for g in groups]
    body = []
    for r in report["rows"]:
        body.append((r["domain"], [r["values"][c] for c in cols], [r["gains"].get(g) for g in groups]))
    return header, body, cols, groups


def _fmt(v):
    return "" if v is None else f"{v:.2f}"


def render_csv(report) -> str:
    header, body, cols, groups = _table(report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["DB"] + [x for c in cols for x in (c, f"{c} std")] + [f"Gain {g}" for g in groups])
    for name, vals, gains in body:
        w.writerow([name] + [x for v in vals for x in (_fmt(v["mean"]), _fmt(v["std"]))] + [_fmt(g) for g in gains])
    return buf.getvalue()


def render_markdown(report) -> str:
    header, body, cols, groups = _table(report)
    lines = ["# Cross-validation report", "",
             f"Folds run: {', '.join(str(f) for f in report['folds_run'])} of {report['config']['k_folds']}. "
             "Accuracies in percent, mean ± std across folds. Gains are best fusion column minus BL.", "",
             "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for name, vals, gains in body:
        cells = [f"{_fmt(v['mean'])} ± {_fmt(v['std'])}" for v in vals] + [f"{g:+.2f}" if g is not None else ""
                                                                         for g in gains]
        lines.append("| " + " | ".join([name] + cells) + " |")
    rec = report["recognition"]
    lines += ["", "## Recognition", ""]
    for key in ("bayes_domain_acc", "baseline_domain_acc"):
        if key in rec:
            lines.append(f"- {key}: {_fmt(rec[key]['mean'])} ± {_fmt(rec[key]['std'])}")
    if "embedding_separation" in rec:
        es = rec["embedding_separation"]
        lines.append(f"- embedding distance intra/inter: {es['intra']['mean']:.4f} / {es['inter']['mean']:.4f} "
                     f"(ratio {es['ratio']['mean']:.4f})")
    lines += ["", "## Per-domain classifiers (own held-out domain)", ""]
    for d, v in rec["classifier_own_domain_acc"].items():
        lines.append(f"- {d}: {_fmt(v['mean'])} ± {_fmt(v['std'])}")
    ctx = report["paper_context"]
    lines += ["", "## Reference values (not reproduced)", "", ctx["note"] + ":", ""]
    for db, vals in ctx["rows"].items():
        lines.append(f"- {db}: " + ", ".join(f"{k} {v:.2f}" for k, v in vals.items()))
    return "\n".join(lines) + "\n"


def emit_report(report: dict, out_dir, formats=("json", "csv", "markdown")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
        written.append(p)
    if "csv" in formats:
        p = out / "report.csv"
        p.write_text(render_csv(report))
        written.append(p)
    if "markdown" in formats or "md" in formats:
        p = out / "report.md"
        p.write_text(render_markdown(report))
        written.append(p)
    return written


def write_matrix_csv(matrix: dict, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "classifier"] + list(matrix["cols"]))
    for metric in ("overall",) + CLASSES:
        for name, row in zip(matrix["rows"], matrix[metric]):
            w.writerow([metric, name] + [_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())
    return Path(path)
