"""Small dense/convolutional network engine with exact forward and backward passes.

Tensors are plain ``float64`` numpy arrays. A batch of flat features has shape
``(B, d)``; image batches are NCHW. Each layer's ``forward`` returns its output
and a cache; ``backward`` consumes the cache and returns the input gradient
and a dict of parameter gradients.
"""
from dataclasses import dataclass

import numpy as np

from adlm import _container, kernels

CHECKPOINT_MAGIC = b"ADLMCKPT"


class ConfigurationError(ValueError):
    """Raised for architectures or inputs whose shapes do not compose."""


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"
    params = {}

    def out_shape(self, in_shape):
        return in_shape

    def spec(self):
        return {"kind": self.kind}

    @property
    def has_params(self):
        return bool(self.params)


class Dense(Layer):
    """Affine layer ``z = x W^T + b``; ``W`` has shape ``(out, in)``.

    ``bias_noise`` is a fixed, non-trainable offset added to ``b`` in every
    forward pass. The private trainer stores the perturbed-bias draw there.
    """

    kind = "dense"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        if in_features < 1 or out_features < 1:
            raise ConfigurationError("dense layer sizes must be positive")
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.use_bias = bool(bias)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {"W": glorot_uniform(rng, (out_features, in_features), in_features, out_features)}
        if self.use_bias:
            self.params["b"] = np.zeros(out_features)
        self.bias_noise = None

    def effective_bias(self):
        if not self.use_bias:
            return None
        b = self.params["b"]
        return b if self.bias_noise is None else b + self.bias_noise

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ConfigurationError(f"dense layer expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        z = x @ self.params["W"].T
        if self.use_bias:
            z = z + self.effective_bias()
        return z, None

    def backward(self, gout, x, cache):
        grads = {"W": gout.T @ x}
        if self.use_bias:
            grads["b"] = gout.sum(axis=0)
        return gout @ self.params["W"], grads

    def spec(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features, "bias": self.use_bias}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None):
        if min(in_channels, out_channels, kernel, stride) < 1 or padding < 0:
            raise ConfigurationError("conv dimensions must be positive")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        k2 = self.kernel * self.kernel
        self.params = {
            "W": glorot_uniform(rng, (out_channels, in_channels, kernel, kernel),
                                in_channels * k2, out_channels * k2),
            "b": np.zeros(out_channels),
        }
        self.bias_noise = None

    def effective_bias(self):
        b = self.params["b"]
        return b if self.bias_noise is None else b + self.bias_noise

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ConfigurationError(f"conv layer expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        h = in_shape[1] + 2 * self.padding
        w = in_shape[2] + 2 * self.padding
        if h < self.kernel or w < self.kernel:
            raise ConfigurationError("conv kernel larger than padded input")
        return (self.out_channels, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def _pad(self, x):
        if self.padding == 0:
            return x
        p = self.padding
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def forward(self, x):
        xp = self._pad(x)
        z = kernels.conv2d_forward(xp, self.params["W"], self.stride)
        return z + self.effective_bias()[None, :, None, None], xp

    def backward(self, gout, x, xp):
        grads = {
            "W": kernels.conv2d_backward_weight(gout, xp, self.kernel, self.stride),
            "b": gout.sum(axis=(0, 2, 3)),
        }
        gxp = kernels.conv2d_backward_input(gout, self.params["W"], xp.shape, self.stride)
        if self.padding:
            p = self.padding
            gxp = gxp[:, :, p:-p, p:-p]
        return gxp, grads

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), None

    def backward(self, gout, x, cache):
        return gout * (x > 0), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, gout, x, y):
        return gout * y * (1.0 - y), {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gout, x, shape):
        return gout.reshape(shape), {}


def lrn_dense(h):
    """Per-neuron min-max normalization over the batch axis.

    ``(h - min) / (max - min)`` column by column; constant columns map to 0.
    """
    h = np.asarray(h, dtype=np.float64)
    lo = h.min(axis=0)
    hi = h.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (h - lo) / safe, 0.0)


class LRNDense(Layer):
    """Min-max normalization of each neuron over the batch, output in [0, 1].

    The gradient is exact, including the dependence of the batch min and max
    on their arg-extremal rows (first occurrence on ties).
    """

    kind = "lrn_dense"

    def forward(self, x):
        y = lrn_dense(x)
        return y, None

    def backward(self, gout, x, cache):
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        span = hi - lo
        live = span > 0
        safe = np.where(live, span, 1.0)
        imin = x.argmin(axis=0)
        imax = x.argmax(axis=0)
        y = (x - lo) / safe
        g_direct = gout / safe
        # d y_i / d lo = (y_i - 1) / span ; d y_i / d hi = -y_i / span
        g_lo = ((y - 1.0) * gout).sum(axis=0) / safe
        g_hi = (-y * gout).sum(axis=0) / safe
        gin = g_direct.copy()
        cols = np.arange(x.shape[1])
        gin[imin, cols] += g_lo
        gin[imax, cols] += g_hi
        gin[:, ~live] = 0.0
        return gin, {}


def lrn_conv(h, q=2.0, size=5, alpha=1e-4, beta=0.75):
    """Cross-channel normalization ``h / max(h, (q + alpha * sum h_m^2) ** beta)``.

    The sum runs over channels ``max(0, k - size//2) .. min(N-1, k + size//2)``.
    Accepts NCHW tensors; a 2-D ``(B, N)`` input is treated as 1x1 maps.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 2:
        return kernels.lrn_conv_forward(h[:, :, None, None], q, size, alpha, beta)[0][:, :, 0, 0]
    return kernels.lrn_conv_forward(h, q, size, alpha, beta)[0]


class LRNConv(Layer):
    kind = "lrn_conv"

    def __init__(self, q=2.0, size=5, alpha=1e-4, beta=0.75):
        if q <= 0 or size <= 0 or alpha <= 0 or beta <= 0:
            raise ConfigurationError("LRN hyper-parameters must be positive")
        self.q, self.size, self.alpha, self.beta = float(q), int(size), float(alpha), float(beta)

    def forward(self, x):
        return kernels.lrn_conv_forward(x, self.q, self.size, self.alpha, self.beta)

    def backward(self, gout, x, base):
        return kernels.lrn_conv_backward(x, gout, base, self.q, self.size, self.alpha, self.beta), {}

    def spec(self):
        return {"kind": self.kind, "q": self.q, "size": self.size, "alpha": self.alpha, "beta": self.beta}


_LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Sigmoid, Flatten, LRNDense, LRNConv)}
AFFINE_KINDS = ("dense", "conv2d")
BOUNDED_KINDS = ("lrn_dense", "lrn_conv", "sigmoid")


@dataclass
class ActivationTrace:
    """Inputs and outputs of every layer for one forward pass.

    ``inputs[i]`` feeds layer ``i``; ``outputs[i]`` is what it produced (the
    affine output ``z`` for dense/conv layers, the activated value otherwise).
    """

    inputs: list
    outputs: list
    caches: list
    network_id: int

    @property
    def top_hidden(self):
        """Input of the output layer (the normalized top hidden state)."""
        return self.inputs[-1]

    @property
    def logits(self):
        return self.outputs[-1]


class Network:
    """Ordered stack of layers over a fixed per-example input shape.

    The first parameterized layer is the private affine layer ``h0``.
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.out_shape(self.shapes[-1])))
        affine = [i for i, layer in enumerate(self.layers) if layer.has_params]
        if not affine:
            raise ConfigurationError("network needs at least one parameterized layer")
        self.h0_index = affine[0]
        if self.layers[self.h0_index].kind not in AFFINE_KINDS:
            raise ConfigurationError("first parameterized layer must be affine")

    @property
    def h0(self):
        return self.layers[self.h0_index]

    @property
    def h0_units(self):
        layer = self.h0
        return layer.out_features if isinstance(layer, Dense) else layer.out_channels

    @property
    def output_layer(self):
        return self.layers[-1]

    @property
    def top_units(self):
        return int(np.prod(self.shapes[-2]))

    @property
    def n_classes(self):
        return self.shapes[-1][0]

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    def num_parameters(self):
        return sum(p.size for _, _, p in self.parameters())

    def copy(self):
        return network_from_spec(self.spec(), {f"{i}.{n}": p for i, n, p in self.parameters()},
                                 buffers=self._buffers())

    def _buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            if getattr(layer, "bias_noise", None) is not None:
                out[f"{i}.bias_noise"] = layer.bias_noise
        return out

    def spec(self):
        return {"input_shape": list(self.input_shape), "layers": [layer.spec() for layer in self.layers]}

    def __repr__(self):
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"Network(input={self.input_shape}, layers=[{kinds}])"


def forward(net, batch):
    """Run ``batch`` through ``net`` and record every layer's input and output."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 1 or tuple(x.shape[1:]) != net.input_shape:
        raise ConfigurationError(f"batch shape {x.shape} does not match network input {net.input_shape}")
    inputs, outputs, caches = [], [], []
    for layer in net.layers:
        inputs.append(x)
        x, cache = layer.forward(x)
        outputs.append(x)
        caches.append(cache)
    return ActivationTrace(inputs, outputs, caches, id(net))


def predict_logits(net, batch):
    return forward(net, batch).logits


def backward(net, trace, output_grad, stop_at=0):
    """Backpropagate ``output_grad`` (gradient w.r.t. the final layer output).

    Returns a GradientSet: a list with one ``{name: grad}`` dict per layer.
    Layers below ``stop_at`` receive empty dicts.
    """
    if trace.network_id != id(net) or len(trace.inputs) != len(net.layers):
        raise ConfigurationError("activation trace was not produced by this network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.outputs[-1].shape:
        raise ConfigurationError(f"output gradient shape {g.shape} != {trace.outputs[-1].shape}")
    grads = [dict() for _ in net.layers]
    for i in range(len(net.layers) - 1, stop_at - 1, -1):
        layer = net.layers[i]
        g, grads[i] = layer.backward(g, trace.inputs[i], trace.caches[i])
    return grads


def sgd_step(net, grads, lr):
    """In-place update ``theta <- theta - lr * grad``; returns ``net``.

    The caller folds any ``1/|L|`` batch scaling into ``lr``.
    """
    if len(grads) != len(net.layers):
        raise ConfigurationError("gradient set does not match network")
    for layer, g in zip(net.layers, grads):
        for name, value in g.items():
            p = layer.params[name]
            if value.shape != p.shape:
                raise ConfigurationError(f"gradient for {layer.kind}.{name} has shape {value.shape}, expected {p.shape}")
            p -= lr * value
    return net


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def parse_architecture(tokens):
    """Turn compact layer tokens into spec dicts (input sizes filled later).

    Tokens: ``dense:UNITS``, ``conv:CHANNELS:KERNEL[:STRIDE[:PADDING]]``,
    ``relu``, ``sigmoid``, ``flatten``, ``lrn`` (dense min-max),
    ``lrn_conv[:Q:SIZE:ALPHA:BETA]``.
    """
    specs = []
    for tok in tokens:
        parts = str(tok).strip().lower().split(":")
        name, args = parts[0], parts[1:]
        if name == "dense":
            specs.append({"kind": "dense", "out": int(args[0])})
        elif name == "conv":
            stride = int(args[2]) if len(args) > 2 else 1
            padding = int(args[3]) if len(args) > 3 else 0
            specs.append({"kind": "conv2d", "out_channels": int(args[0]), "kernel": int(args[1]),
                          "stride": stride, "padding": padding})
        elif name in ("relu", "sigmoid", "flatten"):
            specs.append({"kind": name})
        elif name in ("lrn", "lrn_dense"):
            specs.append({"kind": "lrn_dense"})
        elif name == "lrn_conv":
            vals = [float(a) for a in args] + [2.0, 5, 1e-4, 0.75][len(args):]
            specs.append({"kind": "lrn_conv", "q": vals[0], "size": int(vals[1]), "alpha": vals[2], "beta": vals[3]})
        else:
            raise ConfigurationError(f"unknown layer token {tok!r}")
    return specs


def build_network(tokens, input_shape, n_classes, rng):
    """Build a network from layer tokens plus a bias-free output layer of ``n_classes``.

    A ``flatten`` is inserted automatically before the first dense layer that
    follows image-shaped activations.
    """
    specs = parse_architecture(tokens)
    layers = []
    shape = tuple(input_shape)
    for spec in specs + [{"kind": "dense", "out": n_classes, "bias": False}]:
        if spec["kind"] == "dense" and len(shape) > 1:
            layers.append(Flatten())
            shape = layers[-1].out_shape(shape)
        layer = _make_layer(spec, shape, rng)
        shape = layer.out_shape(shape)
        layers.append(layer)
    return Network(layers, input_shape)


def _make_layer(spec, in_shape, rng):
    kind = spec["kind"]
    if kind == "dense":
        if len(in_shape) != 1:
            raise ConfigurationError("dense layer needs flat input")
        return Dense(spec.get("in", in_shape[0]), spec["out"], bias=spec.get("bias", True), rng=rng)
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise ConfigurationError("conv layer needs (C, H, W) input")
        return Conv2D(spec.get("in_channels", in_shape[0]), spec["out_channels"], spec["kernel"],
                      spec.get("stride", 1), spec.get("padding", 0), rng=rng)
    if kind == "lrn_conv":
        return LRNConv(spec["q"], spec["size"], spec["alpha"], spec["beta"])
    if kind in _LAYER_KINDS:
        return _LAYER_KINDS[kind]()
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def network_from_spec(spec, params, buffers=None):
    """Rebuild a network from ``Network.spec()`` and flat ``"i.name"`` arrays."""
    rng = np.random.default_rng(0)
    layers = []
    shape = tuple(spec["input_shape"])
    for ls in spec["layers"]:
        layer = _make_layer(ls, shape, rng)
        shape = layer.out_shape(shape)
        layers.append(layer)
    net = Network(layers, spec["input_shape"])
    for i, name, p in list(net.parameters()):
        value = np.asarray(params[f"{i}.{name}"], dtype=np.float64)
        if value.shape != p.shape:
            raise ConfigurationError(f"parameter {i}.{name} has shape {value.shape}, expected {p.shape}")
        net.layers[i].params[name] = value.copy()
    for key, value in (buffers or {}).items():
        i, name = key.split(".", 1)
        setattr(net.layers[int(i)], name, np.asarray(value, dtype=np.float64).copy())
    return net


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, net, seed, metadata=None):
    """Write ``net`` (layer specs, parameters, buffers) plus seed and metadata."""
    arrays = {f"param/{i}.{n}": p for i, n, p in net.parameters()}
    arrays.update({f"buffer/{k}": v for k, v in net._buffers().items()})
    meta = {"kind": "checkpoint", "network": net.spec(), "seed": int(seed), "metadata": metadata or {}}
    _container.write(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path):
    """Returns ``(network, header)``; header carries seed and metadata."""
    meta, arrays = _container.read(path, CHECKPOINT_MAGIC)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    buffers = {k[len("buffer/"):]: v for k, v in arrays.items() if k.startswith("buffer/")}
    return network_from_spec(meta["network"], params, buffers), meta
