"""Command-line entry point ``biodg``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .bayes import mc_predict
from .corpus import (CANONICAL_RATE_HZ, CLASSES, DEFAULT_TRIM_S, DomainManifest, ingest_wav, list_domains,
                     read_manifest, resample, split_folds, window_record, write_manifest, write_wav)
from .ensemble import RelationshipVector, fuse_batch, thr
from .errors import BiodgError, ConfigError
from .features import compute_mfcc_batch, read_feature_block, standardize
from .triplet import relationship_factor

log = logging.getLogger("biodg")


def _emit(obj, out: str | None = None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _register_corpus_index(corpus: Path, domain: str):
    index = corpus / "corpus.json"
    doms = json.loads(index.read_text())["domains"] if index.exists() else list_domains(corpus)
    if domain not in doms:
        doms.append(domain)
    index.write_text(json.dumps({"domains": doms}, indent=2, sort_keys=True))


# corpus

def cmd_corpus_synth(a):
    if a.config:
        spec = json.loads(Path(a.config).read_text())
        ids = H.build_synthetic_corpus(a.out, a.seed, basis=spec.get("basis"), unseen=spec.get("unseen"))
    else:
        ids = H.build_synthetic_corpus(a.out, a.seed)
    _emit({"corpus": a.out, "domains": ids})


def cmd_corpus_ingest(a):
    corpus = Path(a.corpus)
    try:
        manifest, rows = read_manifest(corpus, a.domain)
        if manifest.role != a.role or manifest.window_shift_s != a.shift or manifest.trim_s != a.trim:
            raise ConfigError(f"domain {a.domain} exists with role={manifest.role}, shift={manifest.window_shift_s}, "
                              f"trim={manifest.trim_s}; pass matching values")
    except FileNotFoundError:
        manifest = DomainManifest(a.domain, a.role, a.shift, a.trim, CANONICAL_RATE_HZ, "ingested")
        rows = []
    known = {r["record_id"] for r in rows}
    added = 0
    for path in a.wav:
        rec = resample(ingest_wav(path, a.domain, a.label), CANONICAL_RATE_HZ)
        if rec.record_id in known:
            raise ConfigError(f"record {rec.record_id} already present in domain {a.domain}")
        rel = f"records/{a.domain}/{rec.record_id}.wav"
        write_wav(corpus / rel, rec.samples, rec.sample_rate_hz)
        for w in window_record(rec, a.shift, a.trim):
            rows.append({"record_id": w.source_record_id, "window_start_s": w.window_start_s,
                         "class": w.class_label, "sample_path": rel})
            added += 1
    write_manifest(corpus, manifest, rows)
    _register_corpus_index(corpus, a.domain)
    _emit({"domain": a.domain, "windows_added": added, "counts": manifest.counts})


def cmd_corpus_folds(a):
    _, rows = read_manifest(a.corpus, a.domain)
    folds = split_folds([(r["record_id"], r["class"]) for r in rows], a.k, a.seed)
    _emit({"domain": a.domain, "k": a.k, "seed": a.seed,
           "folds": [sorted({rows[i]["record_id"] for i in f}) for f in folds]}, a.out)


# features

def cmd_features_extract(a):
    counts = H.extract_features(a.corpus, a.domain or None)
    _emit({"corpus": a.corpus, "maps": counts})


# training

def _experiment_config(a, **over) -> H.ExperimentConfig:
    cfg = H.ExperimentConfig.load(a.config) if getattr(a, "config", None) else H.ExperimentConfig()
    fields = {"corpus": "corpus_dir", "out": "out_dir", "epochs": "epochs", "seed": "seed", "theta": "theta",
              "alpha": "alpha", "mc": "mc_samples", "k": "k_folds", "patience": "patience",
              "batch_size": "batch_size", "lr": "learning_rate", "jobs": "jobs"}
    for arg, key in fields.items():
        v = getattr(a, arg, None)
        if v is not None:
            setattr(cfg, key, v)
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


def cmd_train(a):
    cfg = _experiment_config(a)
    if a.what == "baseline":
        cfg.baseline_theta = a.theta if a.theta is not None else cfg.baseline_theta
        cfg.baseline_alpha = a.alpha if a.alpha is not None else cfg.baseline_alpha
    cfg.validate()
    basis, _ = H.load_corpus(cfg.corpus_dir)
    models = Path(a.models)
    stats = None
    if (models / "bundle.json").exists():
        prev = H.ModelBundle.load(models)
        if prev.domains != [d.domain_id for d in basis]:
            raise ConfigError(f"{models} was trained on domains {prev.domains}; corpus has "
                              f"{[d.domain_id for d in basis]}")
        stats = prev.stats
    which = {"triplet": ("triplet",), "bayes": ("bayes",), "ensemble": ("classifiers",),
             "baseline": ("baseline",)}[a.what]
    bundle = H.train_bundle(basis, cfg, cfg.seed, which, stats=stats)
    bundle.save(models)
    _emit({"trained": a.what, "models": str(models), "history": H._jsonable(bundle.histories)})


# inference

def _load_input(path, shift, trim) -> tuple[np.ndarray, list]:
    p = Path(path)
    if p.suffix == ".feat":
        maps = read_feature_block(p)
        return maps, [{"index": i} for i in range(len(maps))]
    rec = resample(ingest_wav(p, "input", CLASSES[0]), CANONICAL_RATE_HZ)
    wins = window_record(rec, shift, trim)
    return compute_mfcc_batch(np.stack([w.samples for w in wins])), [{"window_start_s": w.window_start_s}
                                                                      for w in wins]


def cmd_recognize(a):
    need = ("triplet",) if a.kind == "triplet" else ("bayes",)
    b = H.ModelBundle.load(a.models, need=need)
    maps, meta = _load_input(a.input, a.shift, a.trim)
    x = standardize(maps, b.stats).astype(np.float32)
    out = []
    if a.kind == "triplet":
        emb, prob = b.triplet.predict(x)
        beta = relationship_factor(emb, b.index, a.lam)
        for m, bt, p in zip(meta, beta, prob):
            out.append({**m, "source": "triplet", "lambda": a.lam, "beta": dict(zip(b.domains, bt.round(6).tolist())),
                        "class_probability": round(float(p), 6)})
    else:
        mc = mc_predict(b.bayes, x, a.mc, a.seed)
        for i, m in enumerate(meta):
            out.append({**m, "source": "bayes", "mc_samples": a.mc,
                        "beta": dict(zip(b.domains, mc.domain_probs[i].round(6).tolist())),
                        "uncertainty": dict(zip(b.domains, mc.domain_uncertainty[i].round(8).tolist())),
                        "class_probability": round(float(mc.class_prob[i]), 6)})
    _emit(out, a.output)


def cmd_predict(a):
    if (a.lam is None) == (a.phi is None):
        raise ConfigError("pass exactly one of --lambda (triplet) or --phi (bayes)")
    kind = a.recognizer or ("triplet" if a.lam is not None else "bayes")
    if (kind == "triplet") != (a.lam is not None):
        raise ConfigError("--lambda goes with --recognizer triplet, --phi with --recognizer bayes")
    b = H.ModelBundle.load(a.models, need=(kind, "classifiers"))
    maps, meta = _load_input(a.input, a.shift, a.trim)
    x = standardize(maps, b.stats).astype(np.float32)
    probs = np.stack([c.predict_proba(x) for c in b.classifiers], axis=1)
    if kind == "triplet":
        emb, fallback = b.triplet.predict(x)
        beta = relationship_factor(emb, b.index, a.lam)
        masks = (beta > 0).astype(np.int64)
    else:
        mc = mc_predict(b.bayes, x, a.mc, a.seed)
        beta, fallback = mc.domain_probs, mc.class_prob
        masks = thr(beta, a.phi)
    for row in beta:
        RelationshipVector(row, kind)  # range check
    results = fuse_batch(masks, probs, beta, fallback, b.domains)
    _emit([{**m, "recognizer": kind, **r.to_json()} for m, r in zip(meta, results)], a.output)


# experiment

def cmd_run(a):
    cfg = _experiment_config(a)
    if a.folds:
        cfg.folds = [int(f) for f in a.folds.split(",")]
    report = H.run_cross_validation(cfg)
    formats = {"json": ("json",), "csv": ("csv",), "md": ("markdown",), "markdown": ("markdown",),
               "all": ("json", "csv", "markdown")}[a.format]
    H.emit_report(report, cfg.out_dir, formats)
    print(H.render_markdown(report))


def cmd_config(a):
    if a.synthetic:
        cfg = H.synthetic_experiment_config(a.corpus or "corpus", a.out or "runs/experiment", a.seed or 0)
    else:
        cfg = _experiment_config(a)
    _emit(cfg.to_json(), a.output)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="biodg", description="Domain-generalized heart-sound classification",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="build and inspect corpora").add_subparsers(dest="sub", required=True)
    s = corpus.add_parser("synth", parents=[common], help="write the seeded synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON with 'basis' and 'unseen' maps of synthesis overrides")
    s.set_defaults(func=cmd_corpus_synth, seed_default=0)
    s = corpus.add_parser("ingest", parents=[common], help="add WAV recordings to a domain")
    s.add_argument("--corpus", required=True)
    s.add_argument("--domain", required=True)
    s.add_argument("--class", dest="label", required=True, choices=CLASSES)
    s.add_argument("--role", default="basis", choices=("basis", "unseen"))
    s.add_argument("--shift", type=float, default=0.2)
    s.add_argument("--trim", type=float, default=DEFAULT_TRIM_S)
    s.add_argument("wav", nargs="+")
    s.set_defaults(func=cmd_corpus_ingest)
    s = corpus.add_parser("folds", parents=[common], help="print record-atomic folds of a domain")
    s.add_argument("--corpus", required=True)
    s.add_argument("--domain", required=True)
    s.add_argument("-k", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_corpus_folds, seed_default=0)

    feats = sub.add_parser("features", help="feature cache").add_subparsers(dest="sub", required=True)
    s = feats.add_parser("extract", parents=[common], help="compute and cache MFCC maps")
    s.add_argument("--corpus", required=True)
    s.add_argument("--domain", action="append")
    s.set_defaults(func=cmd_features_extract)

    s = sub.add_parser("train", parents=[common], help="train one component on all basis domains")
    s.add_argument("what", choices=("triplet", "bayes", "ensemble", "baseline"))
    s.add_argument("--corpus", required=True)
    s.add_argument("--models", default="models", help="model directory (shared by all components)")
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--theta", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--mc", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train, seed_default=0)

    for name, func in (("recognize", cmd_recognize), ("predict", cmd_predict)):
        s = sub.add_parser(name, parents=[common])
        if name == "recognize":
            s.add_argument("kind", choices=("triplet", "bayes"))
        else:
            s.add_argument("--recognizer", choices=("triplet", "bayes"))
            s.add_argument("--phi", type=float)
        s.add_argument("--lambda", dest="lam", type=float, default=None if name == "predict" else 0.2)
        s.add_argument("--input", required=True, help="WAV recording or .feat feature block")
        s.add_argument("--models", default="models")
        s.add_argument("--mc", type=int, default=100)
        s.add_argument("--shift", type=float, default=0.5, help="window shift for WAV input")
        s.add_argument("--trim", type=float, default=DEFAULT_TRIM_S)
        s.add_argument("--output", help="write JSON here instead of stdout")
        s.set_defaults(func=func, seed_default=0)

    s = sub.add_parser("run", parents=[common], help="cross-validated experiment")
    s.add_argument("--config")
    s.add_argument("--corpus")
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.add_argument("--theta", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--mc", type=int)
    s.add_argument("-k", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--folds", help="comma-separated subset of fold ids")
    s.add_argument("--jobs", type=int, help="folds to train in parallel processes")
    s.add_argument("--format", default="all", choices=("json", "csv", "md", "markdown", "all"))
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("config", parents=[common], help="print an experiment config")
    s.add_argument("--synthetic", action="store_true", help="desk-scale preset")
    s.add_argument("--corpus")
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.add_argument("--output")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None:
        args.seed = getattr(args, "seed_default", None)
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except BiodgError as e:
        print(f"biodg: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"biodg: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
