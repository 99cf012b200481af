"""Layer-wise relevance propagation down to the input features.

Relevance flows through affine layers by the ratio of each local contribution
``z_pm = a_p * W_mp`` to the neuron's full affine value ``z_m``, with a
stabilizer ``mu`` added away from zero. Point-wise layers (ReLU, sigmoid, the
normalization layers) pass relevance through unchanged; gating by the ReLU
happens implicitly because switched-off units carry ``a_p = 0`` into the next
affine layer.
"""
import os
from dataclasses import dataclass

import numpy as np

from adlm import _container, kernels
from adlm.network import Conv2D, Dense, Flatten, forward

DEFAULT_MU = 1e-9
SINGULAR_TOL = 1e-12


class LRPSingularityError(ArithmeticError):
    pass


def _denominator(z, mu, strict):
    if mu < 0:
        raise ValueError("stabilizer mu must be >= 0")
    if mu == 0 and strict and np.any(np.abs(z) < SINGULAR_TOL):
        raise LRPSingularityError("zero affine denominator with mu = 0")
    return np.where(z >= 0, z + mu, z - mu)


def output_relevance(top_hidden, out_weights, score, mu=DEFAULT_MU, strict=True):
    """Relevance of each top hidden unit for the decomposed output score.

    ``top_hidden`` is ``(B, k)``, ``out_weights`` the output-neuron weight rows
    (``(k,)`` or ``(B, k)``), ``score`` the value ``F`` being decomposed.
    """
    h = np.atleast_2d(np.asarray(top_hidden, dtype=np.float64))
    z_mo = h * out_weights
    z_o = z_mo.sum(axis=1)
    den = _denominator(z_o, mu, strict)
    return z_mo / den[:, None] * np.asarray(score, dtype=np.float64).reshape(-1, 1)


def propagate_layer(r_upper, z_pm, z_m, mu=DEFAULT_MU, strict=True):
    """``R_p = sum_m z_pm / (z_m +- mu) * R_m`` from explicit contributions.

    ``z_pm`` is ``(P, M)`` (or batched ``(B, P, M)``), ``z_m`` and ``r_upper``
    are ``(M,)`` (or ``(B, M)``).
    """
    z_pm = np.asarray(z_pm, dtype=np.float64)
    den = _denominator(np.asarray(z_m, dtype=np.float64), mu, strict)
    ratio = np.asarray(r_upper, dtype=np.float64) / den
    return np.einsum("...pm,...m->...p", z_pm, ratio)


def propagate_dense(r_upper, a_lower, weight, bias, mu=DEFAULT_MU, strict=True):
    z = a_lower @ weight.T
    if bias is not None:
        z = z + bias
    s = r_upper / _denominator(z, mu, strict)
    return a_lower * (s @ weight)


def propagate_conv(r_upper, a_lower, layer, mu=DEFAULT_MU, strict=True):
    z, xp = layer.forward(a_lower)
    s = r_upper / _denominator(z, mu, strict)
    c = kernels.conv2d_backward_input(s, layer.params["W"], xp.shape, layer.stride)
    if layer.padding:
        p = layer.padding
        c = c[:, :, p:-p, p:-p]
    return a_lower * c


@dataclass
class RelevanceTrace:
    """Per-layer relevances for one batch.

    ``layers[i]`` is the relevance on the input of network layer ``i``, so
    ``layers[0]`` is the per-feature relevance and ``layers[-1]`` the relevance
    of the top hidden units.
    """

    layers: list
    score: np.ndarray
    mu: float

    @property
    def features(self):
        return self.layers[0]

    def layer_sums(self):
        return [r.reshape(r.shape[0], -1).sum(axis=1) for r in self.layers]


def relevance_trace(net, x, classes, mu=DEFAULT_MU, strict=True, trace=None):
    """Decompose the (pre-sigmoid) score of ``classes`` down to the inputs."""
    if trace is None:
        trace = forward(net, x)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    out = net.output_layer
    if not isinstance(out, Dense) or out.use_bias:
        raise ValueError("relevance expects a bias-free dense output layer")
    logits = trace.logits
    rows = np.arange(logits.shape[0])
    score = logits[rows, classes]
    w_rows = out.params["W"][classes]
    r = output_relevance(trace.inputs[-1], w_rows, score, mu, strict)
    layers = [None] * len(net.layers)
    layers[-1] = r
    for i in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[i]
        a = trace.inputs[i]
        if isinstance(layer, Dense):
            r = propagate_dense(r, a, layer.params["W"], layer.effective_bias(), mu, strict)
        elif isinstance(layer, Conv2D):
            r = propagate_conv(r, a, layer, mu, strict)
        elif isinstance(layer, Flatten):
            r = r.reshape(a.shape)
        layers[i] = r
    return RelevanceTrace(layers, score, mu)


def normalize_relevance(r, mode="symmetric"):
    """Per-row affine rescale of relevances.

    ``symmetric`` maps each row's min/max to -1/+1; ``unit`` applies the
    literal ``(R - min) / (max - min)`` and lands in [0, 1]. Rows with a single
    repeated value map to zeros in both modes.
    """
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    r = r.reshape(r.shape[0], -1)
    lo = r.min(axis=1, keepdims=True)
    hi = r.max(axis=1, keepdims=True)
    span = hi - lo
    live = span > 0
    unit = np.where(live, (r - lo) / np.where(live, span, 1.0), 0.0)
    if mode == "unit":
        return unit
    if mode == "symmetric":
        return np.where(live, 2.0 * unit - 1.0, 0.0)
    raise ValueError(f"unknown normalization {mode!r}")


def input_relevance(net, x, classes, mu=DEFAULT_MU, normalization="symmetric", strict=True):
    """Normalized per-feature relevance for each row of ``x``, shape ``(B, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == len(net.input_shape):
        x = x[None]
    rt = relevance_trace(net, x, classes, mu, strict)
    return normalize_relevance(rt.features, normalization)


@dataclass
class FeatureRelevance:
    """Dataset mean of normalized per-example relevances, one value per feature."""

    values: np.ndarray
    n_examples: int
    mu: float
    normalization: str

    @property
    def d(self):
        return self.values.size


def average_relevance(net, dataset, mu=DEFAULT_MU, batch_size=None, normalization="symmetric", strict=True):
    """Mean normalized relevance per feature over ``dataset``.

    Examples go through the network in consecutive chunks of ``batch_size``
    (the whole set by default) so batch-normalizing layers see the same kind
    of batches they saw in training. The reduction order is fixed.
    """
    x = dataset.features
    classes = dataset.labels.argmax(axis=1)
    n = x.shape[0]
    step = n if batch_size is None else int(batch_size)
    total = np.zeros(x.shape[1])
    for start in range(0, n, step):
        stop = min(start + step, n)
        xb = x[start:stop].reshape((stop - start,) + net.input_shape)
        total += input_relevance(net, xb, classes[start:stop], mu, normalization, strict).sum(axis=0)
    return FeatureRelevance(total / n, n, mu, normalization)


def write_relevance_csv(path, values):
    lines = ["feature,relevance"]
    lines += [f"{j},{float(v)!r}" for j, v in enumerate(np.asarray(values).ravel())]
    _container.atomic_write_text(path, "\n".join(lines) + "\n")


def read_relevance_csv(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "feature,relevance":
            raise ValueError(f"{path}: unexpected header {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return np.array([float(v) for _, v in rows])


def write_pgm(path, values, shape):
    """Binary (P5) grayscale heatmap; min maps to 0 and max to 255."""
    v = np.asarray(values, dtype=np.float64).reshape(shape)
    lo, hi = v.min(), v.max()
    img = np.zeros(v.shape, dtype=np.uint8) if hi == lo else np.round(255 * (v - lo) / (hi - lo)).astype(np.uint8)
    header = f"P5\n{shape[1]} {shape[0]}\n255\n".encode("ascii")
    _container.atomic_write_bytes(path, header + img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{os.fspath(path)}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
