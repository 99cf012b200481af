"""Private training pipeline: pretrain, release relevance, perturb once, then SGD.

``train`` runs every preprocessing draw up front and packs the results into a
``PerturbedDataset``. The SGD loop reads only that object; the raw dataset's
access counter is checked before and after the loop.
"""
import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from adlm import _accel, _container, lrp
from adlm import mechanism as mech
from adlm.data import BatchPlan
from adlm.loss import cross_entropy_from_logits, perturbed_taylor_loss, taylor_coefficients
from adlm.network import BOUNDED_KINDS, ConfigurationError, backward, build_network, forward, sgd_step

MECHANISMS = ("adlm", "ilm", "noiseless")
LOSSES = ("taylor", "exact")
DEFAULT_ARCH = ("dense:64", "relu", "lrn", "dense:25", "relu", "lrn")
METRICS_COLUMNS = ("step", "epoch", "loss", "test_accuracy", "epsilon_spent", "wall_ms")
METRICS_SCHEMA = "adlm-metrics/1"


class TrainingDiverged(RuntimeError):
    pass


class RawDataAccessError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    ``lr`` is applied to the batch-mean gradient and multiplied by
    ``lr_decay`` after every epoch. ``noise_multiplier`` scales every
    preprocessing noise draw (0 gives the zero-noise limit). With
    ``uniform_relevance`` the adaptive mechanism skips the relevance release
    and allocates the feature budget uniformly.
    """

    mechanism: str = "adlm"
    epsilon: float = 1.0
    epsilon_split: tuple = (1.0, 1.0, 1.0)
    batch_size: int = 600
    epochs: int = 50
    lr: float = 0.1
    lr_decay: float = 1.0
    seed: int = 0
    arch: tuple = DEFAULT_ARCH
    pretrain_arch: tuple = None
    pretrain_epochs: int = 12
    pretrain_lr: float = None
    mu: float = lrp.DEFAULT_MU
    normalization: str = "symmetric"
    loss: str = "taylor"
    ratio_floor: float = mech.DEFAULT_RATIO_FLOOR
    noise_multiplier: float = 1.0
    uniform_relevance: bool = False
    eval_every: int = 1

    def __post_init__(self):
        self.epsilon_split = tuple(float(v) for v in self.epsilon_split)
        self.arch = tuple(self.arch)
        if self.pretrain_arch is not None:
            self.pretrain_arch = tuple(self.pretrain_arch)

    def validate(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigurationError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss == "exact" and self.mechanism != "noiseless":
            raise ConfigurationError("the exact loss reads true labels; only the noiseless baseline may use it")
        if self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigurationError("batch size must be >= 1 and epoch counts >= 0")
        if not self.lr > 0 or not self.lr_decay > 0:
            raise ConfigurationError("learning rate and decay must be positive")
        if self.normalization not in ("symmetric", "unit"):
            raise ConfigurationError(f"unknown relevance normalization {self.normalization!r}")
        if self.noise_multiplier < 0:
            raise ConfigurationError("noise multiplier must be >= 0")
        if self.mechanism != "noiseless":
            self.budget()

    def budget(self):
        """The (eps1, eps2, eps3) split; raises ``mech.ParameterError`` on a bad budget."""
        return mech.PrivacyBudget.split(self.epsilon, self.epsilon_split)

    def epsilon_spent(self):
        if self.mechanism == "noiseless":
            return math.inf
        b = self.budget()
        if self.mechanism == "ilm" or self.uniform_relevance:
            return b.eps2 + b.eps3
        return b.total

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsLog:
    """One row per SGD step. ``test_accuracy`` is filled on evaluation steps
    and left empty otherwise; ``epsilon_spent`` never changes."""

    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({c: row.get(c) for c in METRICS_COLUMNS})

    def column(self, name):
        return [r[name] for r in self.rows]

    @property
    def accuracies(self):
        return [r["test_accuracy"] for r in self.rows if r["test_accuracy"] is not None]

    @property
    def final_accuracy(self):
        acc = self.accuracies
        return acc[-1] if acc else None

    def to_csv(self, include_wall=True):
        buf = io.StringIO()
        cols = METRICS_COLUMNS if include_wall else METRICS_COLUMNS[:-1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
        return buf.getvalue()

    def write(self, path):
        _container.atomic_write_text(path, self.to_csv())

    def content_hash(self):
        """SHA-256 of the CSV without the wall-clock column."""
        return hashlib.sha256(self.to_csv(include_wall=False).encode()).hexdigest()

    @classmethod
    def read(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                log.append(step=int(r["step"]), epoch=int(r["epoch"]), loss=float(r["loss"]),
                           test_accuracy=float(r["test_accuracy"]) if r["test_accuracy"] else None,
                           epsilon_spent=float(r["epsilon_spent"]), wall_ms=float(r["wall_ms"]))
        return log


# ---------------------------------------------------------------------------
# evaluation and plain training
# ---------------------------------------------------------------------------


def _as_input(net, x):
    return np.asarray(x).reshape((x.shape[0],) + net.input_shape)


def evaluate(net, testset):
    """Fraction of argmax-correct predictions on the clean test features.

    The whole set goes through in one batch, so batch-normalizing layers see
    the full set and the result does not depend on row order.
    """
    x = testset.features
    y = testset.labels.argmax(axis=1)
    logits = forward(net, _as_input(net, x)).logits
    return float(np.mean(logits.argmax(axis=1) == y))


def _check_finite(value, step, epoch):
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at step {step} (epoch {epoch})")


def pretrain(config, dataset):
    """Noiseless model used only to estimate feature relevance. Never released."""
    arch = config.pretrain_arch or config.arch
    lr = config.pretrain_lr or config.lr
    net = build_network(arch, _input_shape_for(arch, dataset), dataset.n_classes, mech.substream(config.seed, "init"))
    x, y = dataset.features, dataset.labels
    plan = BatchPlan(dataset.n, min(config.batch_size, dataset.n), config.pretrain_epochs)
    rng = mech.substream(config.seed, "shuffle")
    step = 0
    for epoch in range(config.pretrain_epochs):
        for idx in plan.epoch_batches(rng):
            trace = forward(net, _as_input(net, x[idx]))
            value, gz = cross_entropy_from_logits(trace.logits, y[idx])
            _check_finite(value, step, epoch)
            sgd_step(net, backward(net, trace, gz), lr / len(idx))
            step += 1
        lr *= config.lr_decay
    return net


def _input_shape(dataset):
    if dataset.image_shape is not None:
        return (1,) + tuple(dataset.image_shape)
    return (dataset.d,)


def _input_shape_for(arch, dataset):
    # image-shaped input only when the architecture starts with a convolution
    first = str(arch[0]).lower() if arch else ""
    return _input_shape(dataset) if first.startswith("conv") else (dataset.d,)


# ---------------------------------------------------------------------------
# private training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: object
    log: MetricsLog
    perturbed: mech.PerturbedDataset
    sensitivities: mech.Sensitivities = None
    relevance: object = None
    private_relevance: object = None
    allocation: object = None

    def __iter__(self):
        return iter((self.net, self.log))


def preprocess(config, dataset, net, pretrained=None):
    """Steps 1, 2 and 4: release relevance, then perturb features, biases and
    loss coefficients once. Returns ``(PerturbedDataset, extras)``."""
    n = dataset.n
    mult = config.noise_multiplier
    sens = mech.Sensitivities.for_network(net, n)
    extras = {"sensitivities": sens}
    x = dataset.features
    coeffs = taylor_coefficients(dataset.labels)
    meta = {"mechanism": config.mechanism, "seed": config.seed, "batch_size": config.batch_size,
            "noise_multiplier": mult, "sensitivities": asdict(sens)}
    if config.mechanism == "noiseless":
        bias = np.zeros(net.h0_units)
        return mech.PerturbedDataset(x.copy(), coeffs, bias, meta, dataset.image_shape), extras

    budget = config.budget()
    meta["budget"] = asdict(budget)
    L = config.batch_size
    if config.mechanism == "adlm" and not config.uniform_relevance:
        if pretrained is None:
            pretrained = pretrain(config, dataset)
        rel = lrp.average_relevance(pretrained, dataset, config.mu, batch_size=L, normalization=config.normalization)
        priv = mech.privatize_relevance(rel, budget.eps1, n, mech.substream(config.seed, "relevance-noise"), mult)
        alloc = mech.budget_ratios(priv, budget.eps2, config.ratio_floor)
        extras.update(relevance=rel, private_relevance=priv)
    else:
        alloc = mech.BudgetAllocation.uniform(dataset.d, budget.eps2)
    extras["allocation"] = alloc
    feat_rng = mech.substream(config.seed, "feature-noise")
    if config.mechanism == "ilm":
        xbar = mech.ilm_perturb_features(x, budget.eps2, sens.h0, L, feat_rng, mult)
    else:
        xbar = mech.perturb_features(x, alloc, sens.h0, L, feat_rng, mult)
    bias = mech.bias_noise(net.h0_units, budget.eps2, sens.h0, L,
                          mech.substream(config.seed, "bias-noise"), mult)
    cbar = mech.perturb_coefficients(coeffs, sens.loss, budget.eps3, L,
                                     mech.substream(config.seed, "coefficient-noise"), mult)
    meta["ratio_fallback"] = alloc.fallback
    meta["ratios_floored"] = alloc.n_floored
    return mech.PerturbedDataset(xbar, cbar, bias, meta, dataset.image_shape), extras


def train(config, dataset, testset=None, pretrained=None, perturbed=None):
    """Run the configured mechanism and return a ``TrainResult`` (unpacks as ``net, log``).

    ``perturbed`` reuses an earlier preprocessing draw instead of making a new one.
    """
    config.validate()
    arch = config.arch
    net = build_network(arch, _input_shape_for(arch, dataset), dataset.n_classes,
                        mech.substream(config.seed, "init"))
    if config.loss == "taylor" and net.layers[-2].kind not in BOUNDED_KINDS:
        raise ConfigurationError("the Taylor loss needs a bounded layer (LRN or sigmoid) right before the output")
    extras = {}
    if perturbed is None:
        perturbed, extras = preprocess(config, dataset, net, pretrained)
    net.h0.bias_noise = np.array(perturbed.bias_noise)

    frozen = dataset.access_count
    log = _sgd_loop(config, net, perturbed, testset)
    if dataset.access_count != frozen:
        raise RawDataAccessError(f"raw dataset read {dataset.access_count - frozen} times during training")
    return TrainResult(net, log, perturbed, **extras)


def _sgd_loop(config, net, pd, testset):
    plan = BatchPlan(pd.n, config.batch_size, config.epochs)
    rng = mech.substream(config.seed, "shuffle")
    eps = config.epsilon_spent()
    exact = config.loss == "exact"
    out = net.output_layer
    lr = config.lr
    log = MetricsLog()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        batches = plan.epoch_batches(rng)
        for b, idx in enumerate(batches):
            trace = forward(net, _as_input(net, pd.features[idx]))
            coeffs = pd.coefficients[idx]
            if exact:
                value, gz = cross_entropy_from_logits(trace.logits, 0.5 - coeffs[..., 1])
            else:
                lv = perturbed_taylor_loss(trace.top_hidden, out.params["W"], coeffs)
                value, gz = lv.value, lv.grad_logits
            _check_finite(value, step, epoch)
            sgd_step(net, backward(net, trace, gz), lr / len(idx))
            step += 1
            acc = None
            last = b == len(batches) - 1
            if testset is not None and last and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
                acc = evaluate(net, testset)
            log.append(step=step, epoch=epoch + 1, loss=value / len(idx), test_accuracy=acc,
                       epsilon_spent=eps, wall_ms=round((time.perf_counter() - t0) * 1000.0, 3))
        lr *= config.lr_decay
    return log


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def array_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(config, inputs=None, outputs=None, extra=None):
    """JSON-ready run description: resolved config, seed, content hashes."""
    man = {
        "schema": "adlm-manifest/1",
        "metrics_schema": METRICS_SCHEMA,
        "config": config,
        "backend": _accel.backend_name(),
        "inputs": inputs or {},
        "outputs": outputs or {},
    }
    if extra:
        man.update(extra)
    return man


def write_manifest(path, manifest):
    _container.atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
