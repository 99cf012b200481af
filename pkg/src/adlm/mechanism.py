"""Laplace-noise machinery for the adaptive mechanism.

Covers named RNG substreams, the Laplace sampler, the three sensitivity
constants, private relevance, relevance-proportional budget ratios, and the
one-shot perturbation of features, first-layer biases and loss coefficients.
"""
import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from adlm import _container

SUBSTREAMS = ("relevance-noise", "feature-noise", "bias-noise", "coefficient-noise", "shuffle", "init")
PERTURBED_MAGIC = b"ADLMPDAT"
DEFAULT_RATIO_FLOOR = 1e-3


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


def _stream_key(name):
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def substream(seed, name):
    """Counter-based (Philox) generator for ``(seed, name)``.

    Streams with different names are independent, so any one stage can be
    replayed in isolation.
    """
    if name not in SUBSTREAMS:
        raise ParameterError(f"unknown substream {name!r}; expected one of {SUBSTREAMS}")
    ss = np.random.SeedSequence([int(seed), _stream_key(name)])
    return np.random.Generator(np.random.Philox(ss))


def laplace_from_uniform(u, scale):
    """Inverse-CDF transform of ``u ~ U(-1/2, 1/2)`` to a Laplace(0, scale) draw."""
    u = np.asarray(u, dtype=np.float64)
    tail = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(np.float64).tiny)
    return -np.asarray(scale, dtype=np.float64) * np.sign(u) * np.log(tail)


def sample_laplace(scale, rng, size=None):
    """Laplace(0, ``scale``) draws by inverse CDF. ``scale`` may be an array
    that broadcasts against ``size``."""
    scale = np.asarray(scale, dtype=np.float64)
    if not np.all(scale > 0):
        raise ParameterError(f"Laplace scale must be > 0, got {scale}")
    u = rng.random(size) - 0.5
    out = laplace_from_uniform(u, scale)
    return float(out) if np.ndim(out) == 0 else out


def laplace_noise(scale, rng, size, multiplier=1.0):
    """Noise for a perturbation stage; all zeros when ``multiplier`` or the
    scale is 0 (the zero-noise limit used by equivalence tests)."""
    scale = np.asarray(scale, dtype=np.float64) * multiplier
    if np.all(scale == 0):
        return np.zeros(size)
    return sample_laplace(scale, rng, size)


# ---------------------------------------------------------------------------
# budgets and sensitivities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrivacyBudget:
    eps1: float
    eps2: float
    eps3: float

    def __post_init__(self):
        for name in ("eps1", "eps2", "eps3"):
            v = getattr(self, name)
            if not (v > 0):
                raise ParameterError(f"{name} must be > 0, got {v}")

    @property
    def total(self):
        return self.eps1 + self.eps2 + self.eps3

    @classmethod
    def split(cls, epsilon, fractions=(1.0, 1.0, 1.0)):
        """Split ``epsilon`` proportionally to ``fractions`` (equal thirds by default)."""
        if not epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {epsilon}")
        fractions = [float(f) for f in fractions]
        if len(fractions) != 3 or min(fractions) <= 0:
            raise ParameterError("epsilon split needs three positive parts")
        s = sum(fractions)
        return cls(*(epsilon * f / s for f in fractions))


def relevance_sensitivity(d, n_records):
    return 2.0 * d / n_records


def h0_sensitivity(h0_units, d):
    return 2.0 * h0_units * d


def loss_sensitivity(n_classes, top_units):
    return n_classes * (top_units + 0.25 * top_units ** 2)


@dataclass(frozen=True)
class Sensitivities:
    relevance: float
    h0: float
    loss: float

    @classmethod
    def compute(cls, d, n_records, h0_units, top_units, n_classes):
        return cls(relevance_sensitivity(d, n_records), h0_sensitivity(h0_units, d),
                   loss_sensitivity(n_classes, top_units))

    @classmethod
    def for_network(cls, net, n_records):
        d = int(np.prod(net.input_shape))
        return cls.compute(d, n_records, net.h0_units, net.top_units, net.n_classes)


# ---------------------------------------------------------------------------
# step 1: private relevance
# ---------------------------------------------------------------------------


@dataclass
class PrivateRelevance:
    values: np.ndarray
    scale: float
    substream: str = "relevance-noise"


def privatize_relevance(relevance, eps1, n_records, rng, multiplier=1.0):
    """Add ``Lap(2d / (|D| eps1))`` to every average relevance.

    ``eps1 = inf`` gives the noise-free limit.
    """
    r = np.asarray(getattr(relevance, "values", relevance), dtype=np.float64)
    if np.any(np.abs(r) > 1.0 + 1e-12):
        raise ParameterError("average relevances must lie in [-1, 1]")
    if not eps1 > 0:
        raise ParameterError(f"eps1 must be > 0, got {eps1}")
    scale = relevance_sensitivity(r.size, n_records) / eps1
    return PrivateRelevance(r + laplace_noise(scale, rng, r.shape, multiplier), scale)


# ---------------------------------------------------------------------------
# step 2: budget ratios and input perturbation
# ---------------------------------------------------------------------------


@dataclass
class BudgetAllocation:
    """Per-feature ratios ``beta_j`` (summing to ``d``) and budgets ``beta_j * eps2``."""

    ratios: np.ndarray
    eps2: float
    fallback: bool = False
    n_floored: int = 0

    @property
    def budgets(self):
        return self.ratios * self.eps2

    @property
    def d(self):
        return self.ratios.size

    @classmethod
    def uniform(cls, d, eps2):
        return cls(np.ones(d), eps2)


def budget_ratios(private_relevance, eps2, floor=DEFAULT_RATIO_FLOOR):
    """``beta_j = d |R_j| / sum |R_j|`` with a floor on tiny ratios.

    An all-zero relevance vector falls back to uniform ratios. Ratios below
    ``floor`` are pinned at ``floor`` and the rest rescaled so the total stays
    ``d``.
    """
    r = np.abs(np.asarray(getattr(private_relevance, "values", private_relevance), dtype=np.float64))
    d = r.size
    total = math.fsum(r)
    if total == 0 or not math.isfinite(total):
        return BudgetAllocation(np.ones(d), eps2, fallback=True)
    ratios = (d * r) / total
    pinned = np.zeros(d, dtype=bool)
    while floor and np.any(ratios[~pinned] < floor):
        pinned |= ratios < floor
        free = ~pinned
        remaining = d - floor * pinned.sum()
        ratios = np.where(pinned, floor, 0.0)
        ratios[free] = remaining * r[free] / math.fsum(r[free])
    return BudgetAllocation(ratios, eps2, n_floored=int(pinned.sum()))


def feature_noise_scales(allocation, delta_h0, batch_size):
    """Per-feature scale ``delta_h0 / (|L| eps_j)`` of the input noise."""
    return delta_h0 / (batch_size * allocation.budgets)


def _features_of(dataset):
    return np.asarray(getattr(dataset, "features", dataset), dtype=np.float64)


def perturb_features(dataset, allocation, delta_h0, batch_size, rng, multiplier=1.0):
    """``x_ij + (1/|L|) Lap(delta_h0 / eps_j)``, one fresh draw per entry. Not clipped."""
    x = _features_of(dataset)
    scales = feature_noise_scales(allocation, delta_h0, batch_size)
    return x + laplace_noise(scales, rng, x.shape, multiplier)


def ilm_perturb_features(dataset, eps2, delta_h0, batch_size, rng, multiplier=1.0):
    """Identical-noise baseline: every feature gets ``(1/|L|) Lap(delta_h0 / eps2)``."""
    x = _features_of(dataset)
    scale = delta_h0 / (batch_size * eps2)
    return x + laplace_noise(scale, rng, x.shape, multiplier)


def bias_noise(n_units, eps2, delta_h0, batch_size, rng, multiplier=1.0):
    return laplace_noise(delta_h0 / (batch_size * eps2), rng, (n_units,), multiplier)


def perturb_bias(bias, eps2, delta_h0, batch_size, rng, multiplier=1.0):
    """``b + (1/|L|) Lap(delta_h0 / eps2)``, one draw per first-layer unit."""
    bias = np.asarray(bias, dtype=np.float64)
    return bias + bias_noise(bias.size, eps2, delta_h0, batch_size, rng, multiplier).reshape(bias.shape)


# ---------------------------------------------------------------------------
# step 4: loss coefficients
# ---------------------------------------------------------------------------


def perturb_coefficients(coefficients, delta_f, eps3, batch_size, rng, multiplier=1.0):
    """``c + (1/|L|) Lap(delta_F / eps3)`` for every example, class and order."""
    c = np.asarray(coefficients, dtype=np.float64)
    return c + laplace_noise(delta_f / (batch_size * eps3), rng, c.shape, multiplier)


# ---------------------------------------------------------------------------
# the perturbed training set
# ---------------------------------------------------------------------------

_draw_serial = itertools.count(1)


@dataclass
class PerturbedDataset:
    """Everything the training loop is allowed to read.

    ``features`` are the noised inputs, ``coefficients`` the noised Taylor
    coefficients ``(n, M, 3)``, ``bias_noise`` the fixed offset for the
    first-layer biases. ``draw_serial`` identifies the preprocessing draw that
    produced this object and never changes afterwards.
    """

    features: np.ndarray
    coefficients: np.ndarray
    bias_noise: np.ndarray
    meta: dict = field(default_factory=dict)
    image_shape: tuple = None
    draw_serial: int = field(default_factory=lambda: next(_draw_serial))

    def __post_init__(self):
        for arr in (self.features, self.coefficients, self.bias_noise):
            arr.setflags(write=False)

    @property
    def n(self):
        return self.features.shape[0]

    def save(self, path):
        meta = dict(self.meta)
        meta["image_shape"] = list(self.image_shape) if self.image_shape else None
        _container.write(path, PERTURBED_MAGIC, {"kind": "perturbed-dataset", "meta": meta},
                         {"features": self.features, "coefficients": self.coefficients,
                          "bias_noise": self.bias_noise})

    @classmethod
    def load(cls, path):
        header, arrays = _container.read(path, PERTURBED_MAGIC)
        meta = header["meta"]
        shape = meta.pop("image_shape", None)
        return cls(arrays["features"], arrays["coefficients"], arrays["bias_noise"], meta,
                   tuple(shape) if shape else None)
