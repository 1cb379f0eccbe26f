"""Multi-task Bayesian domain recognizer (flipout CNN, domain + class heads)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Flatten, MaxPool2D, Pass, ReLU, Sequential, Sigmoid, Softmax, bce_loss, cce_loss, no_grad
from .autodiff import tensor as T
from .bayes_layers import Conv2DFlipout, DenseFlipout, is_flipout, network_kl, philox_rng
from .errors import ConfigError
from .training import INPUT_SHAPE, Model, TrainConfig, as_input, check_finite, should_stop, shuffled_batches

log = logging.getLogger(__name__)

N_DOMAINS = 6
MC_SAMPLES = 100


def bayes_trunk_layers(conv=Conv2DFlipout, dense=DenseFlipout):
    """Three conv and two dense layers. Filter counts 16/16/8 and dense 64/32 are our choice."""
    return [
        conv(16, (3, 3), stride=(2, 2)), ReLU(), MaxPool2D((2, 2)),
        conv(16, (3, 3)), ReLU(), MaxPool2D((2, 2)),
        conv(8, (2, 2)), ReLU(),
        Flatten(),
        dense(64), ReLU(),
        dense(32), ReLU(),
    ]


class BayesNet(Model):
    kind = "bayes_net"

    def __init__(self, n_domains: int = N_DOMAINS, seed: int = 0, dtype=np.float32, init_stddev=None):
        kw = {} if init_stddev is None else {"init_stddev": init_stddev}
        self.n_domains = n_domains
        trunk = [layer for layer in bayes_trunk_layers()]
        if kw:
            for layer in trunk:
                if is_flipout(layer):
                    layer.init_stddev = float(init_stddev)
        self.parts = {
            "trunk": Sequential(trunk, "trunk"),
            "domain": Sequential([DenseFlipout(n_domains, **kw), Softmax()], "domain"),
            "cls": Sequential([DenseFlipout(1, **kw), Sigmoid()], "cls"),
        }
        rng = np.random.default_rng(seed)
        out = self.parts["trunk"].build(INPUT_SHAPE, rng, dtype)
        self.parts["domain"].build(out, rng, dtype)
        self.parts["cls"].build(out, rng, dtype)

    def forward(self, x, ctx: Pass = Pass()):
        h = self.parts["trunk"](x, ctx)
        return self.parts["domain"](h, ctx), self.parts["cls"](h, ctx)

    def kl(self):
        terms = [network_kl(p) for p in self.parts.values()]
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return total

    def flipout_layers(self):
        return [layer for part in self.parts.values() for layer in part.layers if is_flipout(layer)]

    def zero_stddev(self):
        """Collapse the posterior to its mean (softplus(-inf) == 0)."""
        for layer in self.flipout_layers():
            for k in ("kernel_rho", "bias_rho"):
                layer.params[k].data = np.full_like(layer.params[k].data, -np.inf)

    def predict_mean(self, maps, batch_size: int = 256):
        """Single deterministic pass on the posterior means."""
        doms, clss = [], []
        with no_grad():
            for s in range(0, len(maps), batch_size):
                d, c = self.forward(as_input(maps[s:s + batch_size]))
                doms.append(d.data)
                clss.append(c.data[:, 0])
        return np.concatenate(doms), np.concatenate(clss)


@dataclass
class McPrediction:
    """Monte-Carlo summary; arrays carry a leading batch axis when predicting a batch."""

    domain_probs: np.ndarray
    domain_uncertainty: np.ndarray
    class_prob: np.ndarray
    class_uncertainty: np.ndarray
    n_samples: int

    def __getitem__(self, i) -> "McPrediction":
        return McPrediction(self.domain_probs[i], self.domain_uncertainty[i], self.class_prob[i],
                            self.class_uncertainty[i], self.n_samples)


def mc_predict(model: BayesNet, maps, n_samples: int = MC_SAMPLES, seed: int = 0,
               batch_size: int = 256) -> McPrediction:
    """Average ``n_samples`` sampled forward passes.

    Pass i draws its flipout noise from the stream keyed (seed, i, chunk), so
    results are reproducible for a given seed and input order. Means are
    taken over softmax/sigmoid outputs; variances are population variances.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    x = np.asarray(maps)
    single = x.ndim == 2
    if single:
        x = x[None]
    n = len(x)
    # Welford updates: identical passes leave the variance exactly zero
    mean_d = np.zeros((n, model.n_domains))
    m2_d = np.zeros((n, model.n_domains))
    mean_c = np.zeros(n)
    m2_c = np.zeros(n)
    with no_grad():
        for i in range(n_samples):
            for ci, s in enumerate(range(0, n, batch_size)):
                ctx = Pass(rng=philox_rng(seed, i, ci))
                d, c = model.forward(as_input(x[s:s + batch_size]), ctx)
                sl = slice(s, s + batch_size)
                for val, mean, m2 in ((d.data.astype(np.float64), mean_d, m2_d),
                                      (c.data[:, 0].astype(np.float64), mean_c, m2_c)):
                    delta = val - mean[sl]
                    mean[sl] += delta / (i + 1)
                    m2[sl] += delta * (val - mean[sl])
    var_d = np.maximum(m2_d / n_samples, 0.0)
    var_c = np.maximum(m2_c / n_samples, 0.0)
    pred = McPrediction(mean_d, var_d, mean_c, var_c, n_samples)
    return pred[0] if single else pred


def relationship_from_probs(pred: McPrediction):
    """The relationship vector is the mean domain distribution itself."""
    from .ensemble import RelationshipVector

    return RelationshipVector(np.asarray(pred.domain_probs, dtype=np.float64), "bayes",
                              uncertainty=np.asarray(pred.domain_uncertainty, dtype=np.float64))


# training

@dataclass
class BayesTrainConfig(TrainConfig):
    pass


@dataclass
class BayesHistory:
    train_loss: list = field(default_factory=list)
    val_domain_acc: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_domain_acc: float = float("nan")


def task_val_loss(dprob, cprob, domains, classes, cfg) -> float:
    """theta*CCE + alpha*BCE on precomputed probabilities (checkpoint tie-break)."""
    eps = 1e-7
    d = np.clip(dprob[np.arange(len(domains)), domains].astype(np.float64), eps, 1.0)
    c = np.clip(cprob.astype(np.float64), eps, 1 - eps)
    y = np.asarray(classes, dtype=np.float64)
    bce = -np.mean(y * np.log(c) + (1 - y) * np.log1p(-c))
    return float(cfg.theta * -np.mean(np.log(d)) + cfg.alpha * bce)


def train_bayes_recognizer(maps, domains, classes, cfg: BayesTrainConfig, val=None, n_domains: int = N_DOMAINS,
                           model: BayesNet | None = None):
    """Minimise theta*CCE(domain) + alpha*BCE(class) + KL/N with one posterior sample per step.

    ``val`` = (maps, domains[, classes]) selects the checkpoint: the epoch with
    the best validation domain accuracy (posterior-mean pass) is restored at
    the end. With classes given, accuracy ties go to the lower task loss.
    """
    domains = np.asarray(domains)
    classes = np.asarray(classes, dtype=np.float32)
    if domains.min() < 0 or domains.max() >= n_domains:
        raise ConfigError(f"domain labels must lie in 0..{n_domains - 1}")
    model = model or BayesNet(n_domains=n_domains, seed=cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 2])
    n_train = len(maps)
    hist = BayesHistory()
    best, best_loss = None, np.inf
    step = 0
    for epoch in range(cfg.epochs):
        ep = []
        for idx in shuffled_batches(n_train, cfg.batch_size, rng):
            ctx = Pass(rng=philox_rng(cfg.seed, step))
            d, c = model.forward(as_input(maps[idx]), ctx)
            task = T.add(T.mul(cce_loss(d, domains[idx]), cfg.theta), T.mul(bce_loss(c, classes[idx]), cfg.alpha))
            loss = T.add(task, T.mul(model.kl(), 1.0 / n_train))
            step += 1
            ep.append(check_finite(loss.data, "bayes recognizer", cfg.seed, step, epoch))
            opt.zero_grad()
            loss.backward()
            opt.step(context=f" (seed {cfg.seed}, epoch {epoch})")
        hist.train_loss.append(float(np.mean(ep)))
        if val is not None:
            probs, cprob = model.predict_mean(val[0])
            vd = np.asarray(val[1])
            acc = float((probs.argmax(axis=1) == vd).mean())
            vloss = task_val_loss(probs, cprob, vd, val[2], cfg) if len(val) > 2 else 0.0
            hist.val_domain_acc.append(acc)
            if best is None or (acc, -vloss) > (hist.best_val_domain_acc, -best_loss):
                hist.best_val_domain_acc, hist.best_epoch, best_loss = acc, epoch, vloss
                best = model.snapshot()
            if should_stop(cfg, epoch, hist.best_epoch):
                break
        log.debug("bayes epoch %d loss %.4f", epoch, hist.train_loss[-1])
    if best is not None:
        model.restore(best)
    return model, hist
