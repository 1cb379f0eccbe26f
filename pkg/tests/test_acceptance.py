"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line.

Criteria 9 and 10 run the full seeded synthetic experiment twice (once via the
API, once via the CLI), which takes most of an hour on one core.
"""
from __future__ import annotations

import contextlib
import itertools
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from biodg import harness as H
from biodg.autodiff import Pass, bce_loss, cce_loss, combined_loss, triplet_loss
from biodg.autodiff import tensor as T
from biodg.autodiff.layers import Conv2D, Dense
from biodg.bayes import BayesNet, mc_predict
from biodg.bayes_layers import Conv2DFlipout, DenseFlipout, elbo_loss, kl_normal, philox_rng, rho_for_stddev
from biodg.corpus import CANONICAL_RATE_HZ, SynthConfig, generate_synthetic_domain
from biodg.ensemble import (CLASSES, ONE_TO_N, ONE_TO_NONE, ONE_TO_ONE, BaselineModel, combine_branches,
                            fuse_votes, thr)
from biodg.features import (DEFAULT_FILTERBANK, N_FILTERS, N_FRAMES, compute_mfcc, compute_mfcc_batch,
                            filterbank_energies)
from biodg.triplet import (EASY, SEMI_HARD, EmbeddingIndex, mine_semi_hard, pairwise_distances,
                          relationship_factor)

import gradcheck as G

SEEDS = range(20)


@contextlib.contextmanager
def verdict(capsys, num, title, limit_s=None):
    """Print ``PASS``/``FAIL`` for one criterion and re-raise failures."""
    t0 = time.perf_counter()
    note = {}
    try:
        yield note
        dt = time.perf_counter() - t0
        if limit_s is not None:
            assert dt < limit_s, f"runtime {dt:.1f}s exceeds {limit_s}s"
    except BaseException as e:
        with capsys.disabled():
            print(f"\nCRITERION {num} FAIL: {title}: {str(e).splitlines()[0] if str(e) else type(e).__name__}")
        raise
    extra = f" ({note['msg']})" if "msg" in note else ""
    with capsys.disabled():
        print(f"\nCRITERION {num} PASS: {title} in {time.perf_counter() - t0:.1f}s{extra}")


# criterion 1

def _layer_check(layer, x_shape, rng, ctx_fn=None):
    """Gradcheck of sum(w * layer(x)) w.r.t. the input and every parameter."""
    layer.build(x_shape[1:], rng, np.float64)
    names = list(layer.params)
    x = rng.standard_normal(x_shape)
    params = [layer.params[n].data.copy() for n in names]
    if "kernel_rho" in names:
        params[names.index("kernel_rho")] = rho_for_stddev(0.1) + 0.3 * rng.standard_normal(params[0].shape)
        params[names.index("bias_rho")] = rho_for_stddev(0.1) + 0.3 * rng.standard_normal(params[-1].shape)
    for i, n in enumerate(names):
        if n.startswith("bias"):
            params[i] = rng.standard_normal(params[i].shape)
    ctx = ctx_fn(layer, x_shape[0]) if ctx_fn else Pass()
    out_shape = layer(T.Tensor(x), ctx).shape
    w = rng.standard_normal(out_shape)

    def build(xt, *ps):
        for n, p in zip(names, ps):
            layer.params[n] = p
        return T.sum_all(T.mul(layer(xt, ctx), w))

    return G.check(build, [x] + params)


def _frozen(layer, batch):
    noise = layer.draw_noise(np.random.default_rng(99), batch, np.float64)
    return Pass(noise={layer.name: noise})


def _named(layer, name):
    layer.name = name
    return layer


def _op_check(op, shape, rng):
    x = rng.standard_normal(shape)
    w = rng.standard_normal(op(T.Tensor(x)).shape)
    return G.check(lambda a: T.sum_all(T.mul(op(a), w)), [x])


def _gradient_cases(seed):
    rng = np.random.default_rng(seed)
    cases = {
        "conv2d": _layer_check(Conv2D(3, (3, 2)), (2, 6, 5, 2), rng),
        "conv2d stride 2": _layer_check(Conv2D(2, (3, 3), stride=(2, 2)), (2, 7, 7, 2), rng),
        "dense": _layer_check(Dense(4), (3, 5), rng),
        "dense flipout": _layer_check(_named(DenseFlipout(4), "df"), (3, 5), rng, _frozen),
        "conv2d flipout": _layer_check(_named(Conv2DFlipout(3, (2, 2), stride=(1, 2)), "cf"), (2, 5, 6, 2), rng,
                                       _frozen),
        "l2_normalize": _op_check(T.l2_normalize, (4, 6), rng),
        "softmax": _op_check(T.softmax, (4, 6), rng),
        "sigmoid": _op_check(T.sigmoid, (4, 6), rng),
        "max_pool2d": _op_check(T.max_pool2d, (2, 4, 6, 3), rng),
    }
    a, p, n = (rng.standard_normal((6, 5)) for _ in range(3))
    cases["triplet loss"] = G.check(lambda a, p, n: triplet_loss(a, p, n, margin=1.0), [a, p, n])
    dom = rng.integers(0, 6, 5)
    cases["cce loss"] = G.check(lambda z: cce_loss(T.softmax(z), dom), [rng.standard_normal((5, 6))])
    y = rng.integers(0, 2, 5)
    cases["bce loss"] = G.check(lambda z: bce_loss(T.sigmoid(z), y), [rng.standard_normal(5)])
    theta, alpha = rng.uniform(0.1, 2.0, 2)
    cases["combined loss"] = G.check(
        lambda zd, zc: combined_loss(cce_loss(T.softmax(zd), dom), bce_loss(T.sigmoid(zc), y), theta, alpha),
        [rng.standard_normal((5, 6)), rng.standard_normal(5)])
    mu, rho = rng.standard_normal((3, 4)), rho_for_stddev(0.2) + 0.3 * rng.standard_normal((3, 4))
    cases["elbo (task + KL/N)"] = G.check(
        lambda zd, m, r: elbo_loss(cce_loss(T.softmax(zd), dom), kl_normal(m, r), 37),
        [rng.standard_normal((5, 6)), mu, rho])
    return cases


def test_c1_gradient_correctness(capsys):
    with verdict(capsys, 1, "finite-difference gradients, 20 seeds, rel err < 1e-4", 120) as note:
        worst = {}
        for seed in SEEDS:
            for name, err in _gradient_cases(seed).items():
                worst[name] = max(worst.get(name, 0.0), err)
        bad = {k: v for k, v in worst.items() if not v < G.TOL}
        assert not bad, f"relative errors too large: {bad}"
        note["msg"] = f"{len(worst)} ops, worst {max(worst.values()):.1e}"


# criterion 2

def _miner_oracle(labels, emb, margin):
    """Exhaustive enumeration with explicit loops over a shared distance matrix."""
    n = len(labels)
    d = pairwise_distances(emb).tolist()
    out = []
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            semi, easy = [], []
            for k in range(n):
                if labels[k] == labels[a]:
                    continue
                if d[a][p] < d[a][k] < d[a][p] + margin:
                    semi.append((d[a][k], k))
                elif d[a][p] + margin <= d[a][k]:
                    easy.append((d[a][k], k))
            if semi:
                out.append((a, p, min(semi)[1], SEMI_HARD))
            elif easy:
                out.append((a, p, min(easy)[1], EASY))
    return out


def test_c2_triplet_mining_oracle(capsys):
    with verdict(capsys, 2, "semi-hard miner equals exhaustive enumeration on 200 batches", 60) as note:
        rng = np.random.default_rng(2)
        total = 0
        for b in range(200):
            n = int(rng.integers(2, 33))
            labels = rng.integers(0, int(rng.integers(1, 7)), n)
            emb = rng.standard_normal((n, 8))
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
            if b % 4 == 0:
                emb = np.round(emb, 1)  # force distance ties
            margin = float(rng.choice([0.2, 0.5, 1.0]))
            got = mine_semi_hard(labels, emb, margin)
            mine = [(a, p, k, c) for (a, p, k), c in zip(got.as_tuples(), got.categories)]
            want = _miner_oracle(labels, emb, margin)
            assert mine == want, f"batch {b} differs"
            total += len(want)
        note["msg"] = f"{total} triplets compared"


# criterion 3

def test_c3_relationship_factor_oracle(capsys):
    with verdict(capsys, 3, "relationship factor equals brute-force counting on 100 indices", 60):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(6, 301))
            ids = np.concatenate([np.arange(6), rng.integers(0, 6, n - 6)])
            emb = rng.standard_normal((n, 72))
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
            index = EmbeddingIndex(emb, ids, list("abcdef"))
            q = rng.standard_normal((4, 72))
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            q[0] = index.embeddings[0]  # a query that sits on an index point
            ref = index.embeddings.astype(np.float64)
            for lam in (0.0, 0.2, 0.5, 1.0, float(rng.uniform())):
                got = relationship_factor(q, index, lam)
                for r, e in enumerate(q):
                    for i in range(6):
                        members = [j for j in range(n) if index.domain_ids[j] == i]
                        close = sum(1 for j in members if np.sqrt(((e - ref[j]) ** 2).sum()) < lam)
                        assert got[r, i] == close / len(members)


# criterion 4

def _flipout_stats(layer, x, n):
    ctxs = (Pass(rng=philox_rng(4, k)) for k in range(n))
    first = layer(T.Tensor(x), next(ctxs)).data
    mean = first.copy()
    m2 = np.zeros_like(first)
    for k, ctx in enumerate(ctxs, start=2):
        v = layer(T.Tensor(x), ctx).data
        d = v - mean
        mean += d / k
        m2 += d * (v - mean)
    return mean, np.sqrt(m2 / (n - 1) / n)


def test_c4_flipout_unbiasedness(capsys):
    with verdict(capsys, 4, "flipout mean within 3 SE of the mean-weight pass; zero stddev is exact", 120) as note:
        rng = np.random.default_rng(4)
        worst = 0.0
        for layer, shape in ((_named(DenseFlipout(6, init_stddev=0.3), "d"), (4, 5)),
                             (_named(Conv2DFlipout(3, (2, 2), init_stddev=0.3), "c"), (2, 4, 4, 2))):
            layer.build(shape[1:], rng, np.float64)
            x = rng.standard_normal(shape)
            det = layer(T.Tensor(x), Pass()).data
            mean, se = _flipout_stats(layer, x, 10_000)
            z = np.abs(mean - det) / se
            assert np.all(z < 3.0), f"{layer.kind}: max |z| {z.max():.2f}"
            worst = max(worst, float(z.max()))
            for k in ("kernel_rho", "bias_rho"):
                layer.params[k].data = np.full_like(layer.params[k].data, -np.inf)
            sampled = layer(T.Tensor(x), Pass(rng=philox_rng(0, 1))).data
            assert np.array_equal(sampled, det), f"{layer.kind}: zero-stddev pass differs"
            assert sampled.tobytes() == det.tobytes()
        net = BayesNet(seed=1, dtype=np.float64)
        net.zero_stddev()
        maps = rng.standard_normal((3, 26, 99)).astype(np.float32).astype(np.float64)
        d0, c0 = net.predict_mean(maps)
        d1, c1 = net.forward(T.Tensor(maps[..., None]), Pass(rng=philox_rng(5)))
        assert d0.tobytes() == d1.data.tobytes() and c0.tobytes() == c1.data[:, 0].tobytes()
        note["msg"] = f"max |z| {worst:.2f}"


# criterion 5

def test_c5_mc_degeneracy(capsys):
    with verdict(capsys, 5, "MC inference: N=1, zero variance, seeded reproducibility", 30):
        rng = np.random.default_rng(5)
        maps = rng.standard_normal((4, 26, 99)).astype(np.float32)
        net = BayesNet(seed=2, init_stddev=0.2)
        one = mc_predict(net, maps, n_samples=1, seed=7)
        d, c = net.forward(T.Tensor(maps[..., None]), Pass(rng=philox_rng(7, 0, 0)))
        assert np.array_equal(one.domain_probs, d.data.astype(np.float64))
        assert np.array_equal(one.class_prob, c.data[:, 0].astype(np.float64))
        assert not one.domain_uncertainty.any() and not one.class_uncertainty.any()
        a = mc_predict(net, maps, n_samples=20, seed=11)
        b = mc_predict(net, maps, n_samples=20, seed=11)
        for f in ("domain_probs", "domain_uncertainty", "class_prob", "class_uncertainty"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert a.domain_uncertainty.max() > 0
        assert not np.array_equal(a.domain_probs, mc_predict(net, maps, n_samples=20, seed=12).domain_probs)
        net.zero_stddev()
        z = mc_predict(net, maps, n_samples=25, seed=3)
        assert not z.domain_uncertainty.any() and not z.class_uncertainty.any()
        dm, cm = net.predict_mean(maps)
        assert np.array_equal(z.domain_probs, dm.astype(np.float64))
        assert np.array_equal(z.class_prob, cm.astype(np.float64))


# criterion 6

def _vote_oracle(mask, probs, beta, fallback):
    sel = [i for i in range(6) if mask[i]]
    if not sel:
        return CLASSES[int(fallback >= 0.5)], ONE_TO_NONE
    votes = {i: int(probs[i] >= 0.5) for i in sel}
    abn = sum(votes.values())
    kind = ONE_TO_ONE if len(sel) == 1 else ONE_TO_N
    if 2 * abn != len(sel):
        return CLASSES[int(2 * abn > len(sel))], kind
    top = max(beta[i] for i in sel)
    tops = {votes[i] for i in sel if beta[i] == top}
    return CLASSES[tops.pop() if len(tops) == 1 else 1], kind


def test_c6_fusion_properties(capsys):
    with verdict(capsys, 6, "fusion properties over all 64 masks x random votes", 60) as note:
        rng = np.random.default_rng(6)
        doms = list("abcdef")
        # thr: inclusive boundary and monotone in phi
        for phi in np.linspace(0, 1, 41):
            v = np.array([phi, np.nextafter(phi, -1), np.nextafter(phi, 2)])
            assert thr(v, phi).tolist() == [1, 0, 1]
        for _ in range(500):
            v = rng.uniform(size=6)
            p1, p2 = np.sort(rng.uniform(size=2))
            assert np.all(thr(v, p2) <= thr(v, p1))
        checked = 0
        for bits in itertools.product((0, 1), repeat=6):
            mask = np.array(bits)
            for _ in range(40):
                probs = rng.choice([0.1, 0.49, 0.5, 0.9], size=6)
                beta = rng.choice([0.0, 0.3, 0.6, 1.0], size=6)
                fb = float(rng.choice([0.2, 0.5, 0.8]))
                res = fuse_votes(mask, probs, beta, fb, doms)
                assert (res.final_class, res.relationship_kind) == _vote_oracle(mask, probs, beta, fb)
                # fallback used exactly when nothing is selected, and only then does it matter
                assert res.fallback_used == (mask.sum() == 0)
                if mask.any():
                    other = fuse_votes(mask, probs, beta, 1.0 - fb, doms)
                    assert other.final_class == res.final_class and other.fallback_probability is None
                    assert [v.domain for v in res.votes] == [doms[i] for i in np.nonzero(mask)[0]]
                else:
                    assert res.final_class == CLASSES[int(fb >= 0.5)] and not res.votes
                if mask.sum() == 1:
                    i = int(np.nonzero(mask)[0][0])
                    assert res.final_class == CLASSES[int(probs[i] >= 0.5)]
                perm = rng.permutation(6)
                pres = fuse_votes(mask[perm], probs[perm], beta[perm], fb, [doms[i] for i in perm])
                assert pres.final_class == res.final_class
                assert sorted(pres.selected_domains) == sorted(res.selected_domains)
                checked += 1
        note["msg"] = f"{checked} cases"


# criterion 7

def test_c7_baseline_identities(capsys):
    with verdict(capsys, 7, "baseline one-hot, uniform and random-weight identities", 30):
        rng = np.random.default_rng(7)
        maps = rng.standard_normal((5, 26, 99))
        model = BaselineModel(seed=3, dtype=np.float64)
        final = model.parts["di"].layers[-2]
        assert final.kind == "dense"
        # random weights: arithmetic oracle
        di, dsc, y = model.predict(maps)
        oracle = [sum(float(di[n, i]) * float(dsc[n, i]) for i in range(6)) for n in range(5)]
        assert np.max(np.abs(y - np.array(oracle))) < 1e-6
        assert np.allclose(y, combine_branches(di, dsc), atol=1e-12)
        # one-hot domain weights select one branch exactly
        for k in range(6):
            final.params["kernel"].data[:] = 0.0
            final.params["bias"].data[:] = 0.0
            final.params["bias"].data[k] = 1000.0
            di, dsc, y = model.predict(maps)
            assert np.array_equal(di, np.eye(6)[[k] * 5])
            assert np.array_equal(y, dsc[:, k])
        # uniform weights give the plain branch average
        final.params["bias"].data[:] = 0.0
        di, dsc, y = model.predict(maps)
        assert np.all(di == 1.0 / 6.0)
        assert np.array_equal(y, (dsc * (1.0 / 6.0)).sum(axis=-1))


# criterion 8

def test_c8_feature_pipeline(capsys):
    with verdict(capsys, 8, "26x99 maps, filterbank argmax for all 26 filters, finite on silence", 60) as note:
        cfg = SynthConfig.from_dict({**H.BASIS_PRESET["a"], "n_records": (2, 2), "seed": 8})
        synth = generate_synthetic_domain(cfg, "a", "basis", window_shift_s=0.2)
        for inst in synth.instances:
            assert compute_mfcc(inst).shape == (N_FILTERS, N_FRAMES)
        batch = compute_mfcc_batch(np.stack([i.samples for i in synth.instances]))
        assert batch.shape == (len(synth.instances), N_FILTERS, N_FRAMES)
        t = np.arange(CANONICAL_RATE_HZ) / CANONICAL_RATE_HZ
        for j, fc in enumerate(DEFAULT_FILTERBANK.centers_hz):
            for phase in np.linspace(0, 2 * np.pi, 5)[:-1]:
                e = filterbank_energies(np.sin(2 * np.pi * fc * t + phase))
                assert int(np.argmax(e.mean(axis=1))) == j, f"filter {j} at {fc:.1f} Hz"
        zero = compute_mfcc(np.zeros(CANONICAL_RATE_HZ))
        assert np.all(np.isfinite(zero)) and zero.shape == (N_FILTERS, N_FRAMES)
        note["msg"] = f"{len(synth.instances)} instances"


# criteria 9 and 10: the full synthetic experiment

@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiment")
    corpus, out = root / "corpus", root / "run"
    t0 = time.perf_counter()
    H.build_synthetic_corpus(corpus, seed=0)
    H.extract_features(corpus)
    cfg = H.synthetic_experiment_config(str(corpus), str(out), seed=0)
    report = H.run_cross_validation(cfg)
    return {"root": root, "corpus": corpus, "out": out, "cfg": cfg, "report": report,
            "elapsed_s": time.perf_counter() - t0}


def _row(report, name):
    return next(r for r in report["rows"] if r["domain"] == name)


def test_c9_synthetic_experiment(capsys, experiment):
    report, cfg = experiment["report"], experiment["cfg"]
    rec = report["recognition"]
    with verdict(capsys, "9", "end-to-end synthetic experiment") as note:
        basis, unseen = H.load_corpus(experiment["corpus"])
        sizes = {d.domain_id: len(d.classes) for d in basis + unseen}
        assert len(basis) == 6 and len(unseen) == 2 and min(sizes.values()) >= 400, sizes
        assert cfg.epochs == 60 and cfg.k_folds == 5 and report["folds_run"] == list(range(5))
        failures = []
        bayes = rec["bayes_domain_acc"]["mean"]
        if not bayes >= 90.0:
            failures.append(f"(a) Bayes domain accuracy {bayes}")
        own = {d: v["mean"] for d, v in rec["classifier_own_domain_acc"].items()}
        if min(own.values()) < 90.0:
            failures.append(f"(b) classifier own-domain accuracy {own}")
        row = _row(report, report["overlap_domain"])
        bl = row["values"][H.BASELINE_COL]["mean"]
        for group in (H.TRIPLET_FUSION, H.BAYES_FUSION):
            best = row["values"][row["best"][group]]["mean"]
            if not best >= bl:
                failures.append(f"(c) {group} {best} < BL {bl} on {row['domain']}")
        ratio = rec["embedding_separation"]["ratio"]["mean"]
        if not ratio < 0.5:
            failures.append(f"(d) intra/inter ratio {ratio}")
        if experiment["elapsed_s"] >= 1800:
            failures.append(f"runtime {experiment['elapsed_s']:.0f}s")
        cols = {c: row["values"][c]["mean"] for c in report["columns"]}
        with capsys.disabled():
            print(f"\n  9a Bayes domain acc {bayes}; 9b own-domain {own}")
            print(f"  9c {row['domain']}: {cols}")
            print(f"  9d intra/inter ratio {ratio}; elapsed {experiment['elapsed_s']:.0f}s")
        assert not failures, "; ".join(failures)
        note["msg"] = f"u-gain {row['gains']}, ratio {ratio}, {experiment['elapsed_s']:.0f}s"


REPORT_FILES = ("report.json", "report.csv", "report.md", "matrix.csv")


def test_c10_determinism(capsys, experiment):
    with verdict(capsys, 10, "rerun via the CLI yields byte-identical reports") as note:
        cfg_path = experiment["root"] / "rerun.json"
        data = experiment["cfg"].to_json()
        data["out_dir"] = str(experiment["root"] / "rerun")
        cfg_path.write_text(json.dumps(data))
        env = {**os.environ, "PYTHONHASHSEED": "123"}
        subprocess.run([sys.executable, "-m", "biodg", "run", "--config", str(cfg_path)], check=True,
                       capture_output=True, env=env)
        for name in REPORT_FILES:
            a = (experiment["out"] / name).read_bytes()
            b = (Path(data["out_dir"]) / name).read_bytes()
            assert a == b, f"{name} differs"
        note["msg"] = ", ".join(REPORT_FILES)
