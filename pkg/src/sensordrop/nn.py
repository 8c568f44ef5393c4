"""Small sequential neural-network engine on float64 numpy arrays.

Tensors are plain ``np.ndarray`` values of dtype float64. Every layer works on
batched input whose leading axis is the batch; a network's declared
``input_shape`` excludes that axis.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer_index, layer, expected, got):
        self.layer_index = layer_index
        self.layer = layer
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(
            f"layer {layer_index} ({layer!r}) expected input shape {self.expected}, got {self.got}"
        )


class UsageError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    """Non-finite values showed up during training."""

    def __init__(self, message, **diagnostics):
        self.diagnostics = diagnostics
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Layer:
    kind = "Layer"
    tag = 0

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def check_input(self, input_shape):
        """Return True when ``input_shape`` (without batch axis) is acceptable."""
        return True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad, need_input_grad=True):
        """Return ``(input_grad, {param_name: grad})``."""
        raise NotImplementedError

    def hyperparameters(self):
        return []

    def __repr__(self):
        hp = ", ".join(str(h) for h in self.hyperparameters())
        return f"{self.kind}({hp})"


class Conv2D(Layer):
    """Stride-1 convolution with "same" zero padding and an odd square kernel."""

    kind = "Conv2D"
    tag = 1

    def __init__(self, in_channels, out_channels, kernel_size=3, rng=None):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for same padding")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            w = np.zeros(shape, dtype=DTYPE)
        else:
            k2 = kernel_size * kernel_size
            w = glorot_uniform(rng, shape, in_channels * k2, out_channels * k2)
        self.params = {"weight": w, "bias": np.zeros(out_channels, dtype=DTYPE)}

    def check_input(self, input_shape):
        return len(input_shape) == 3 and input_shape[0] == self.in_channels

    def output_shape(self, input_shape):
        return (self.out_channels, input_shape[1], input_shape[2])

    def hyperparameters(self):
        return [self.in_channels, self.out_channels, self.kernel_size]

    def forward(self, x):
        k = self.kernel_size
        p = k // 2
        b, c, h, w = x.shape
        xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        xp[:, :, p:p + h, p:p + w] = x
        # im2col rows are (b, y, x); columns are (c, i, j) to match weight layout
        cols = np.empty((b, h, w, c, k, k), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols[..., i, j] = xp[:, :, i:i + h, j:j + w].transpose(0, 2, 3, 1)
        cols = cols.reshape(b * h * w, c * k * k)
        self._cache = (x.shape, cols)
        out = cols @ self.params["weight"].reshape(self.out_channels, -1).T
        out += self.params["bias"]
        return np.ascontiguousarray(out.reshape(b, h, w, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, grad, need_input_grad=True):
        shape, cols = self._cache
        b, c, h, w = shape
        k = self.kernel_size
        p = k // 2
        w2d = self.params["weight"].reshape(self.out_channels, -1)
        g2d = grad.transpose(0, 2, 3, 1).reshape(b * h * w, self.out_channels)
        dw = (g2d.T @ cols).reshape(self.params["weight"].shape)
        db = g2d.sum(axis=0)
        if not need_input_grad:
            return None, {"weight": dw, "bias": db}
        dcols = (g2d @ w2d).reshape(b, h, w, c, k, k)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[..., i, j]
        dx = dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), {"weight": dw, "bias": db}


class MaxPool2D(Layer):
    kind = "MaxPool2D"
    tag = 2

    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def check_input(self, input_shape):
        return (
            len(input_shape) == 3
            and input_shape[1] % self.window == 0
            and input_shape[2] % self.window == 0
        )

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (c, h // self.window, w // self.window)

    def hyperparameters(self):
        return [self.window]

    def forward(self, x):
        s = self.window
        b, c, h, w = x.shape
        blocks = x.reshape(b, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, h // s, w // s, s * s)
        idx = blocks.argmax(axis=-1)
        # one-hot on the first maximum of each window
        onehot = idx[..., None] == np.arange(s * s)
        self._cache = (x.shape, onehot)
        return blocks.max(axis=-1)

    def branch(self):
        return self._cache[1]

    def backward(self, grad, need_input_grad=True):
        shape, onehot = self._cache
        s = self.window
        b, c, h, w = shape
        blocks = onehot * grad[..., None]
        dx = blocks.reshape(b, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(shape), {}


class Dense(Layer):
    """Affine map; any non-batch input axes are flattened."""

    kind = "Dense"
    tag = 3

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((out_features, in_features), dtype=DTYPE)
        else:
            w = glorot_uniform(rng, (out_features, in_features), in_features, out_features)
        self.params = {"weight": w, "bias": np.zeros(out_features, dtype=DTYPE)}

    def check_input(self, input_shape):
        return math.prod(input_shape) == self.in_features

    def output_shape(self, input_shape):
        return (self.out_features,)

    def hyperparameters(self):
        return [self.in_features, self.out_features]

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        self._cache = (x.shape, flat)
        return flat @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad, need_input_grad=True):
        shape, flat = self._cache
        dw = grad.T @ flat
        db = grad.sum(axis=0)
        dx = grad @ self.params["weight"]
        return dx.reshape(shape), {"weight": dw, "bias": db}


class ReLU(Layer):
    kind = "ReLU"
    tag = 4

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad, need_input_grad=True):
        return np.where(self._cache, grad, 0.0), {}

    def branch(self):
        return self._cache


class Sigmoid(Layer):
    kind = "Sigmoid"
    tag = 5

    def forward(self, x):
        # exp of a non-positive argument only, so no overflow warnings
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        self._cache = out
        return out

    def backward(self, grad, need_input_grad=True):
        s = self._cache
        return grad * s * (1.0 - s), {}


class Softmax(Layer):
    """Softmax over the last axis."""

    kind = "Softmax"
    tag = 6

    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        self._cache = out
        return out

    def backward(self, grad, need_input_grad=True):
        s = self._cache
        return s * (grad - (grad * s).sum(axis=-1, keepdims=True)), {}


LAYER_TYPES = {cls.tag: cls for cls in (Conv2D, MaxPool2D, Dense, ReLU, Sigmoid, Softmax)}


def conv_p(in_channels, out_channels, kernel_size=3, rng=None):
    """The ConvP block: a convolution followed by 2x2 max pooling."""
    return [Conv2D(in_channels, out_channels, kernel_size, rng=rng), MaxPool2D(2)]


class Network:
    """A sequential stack of layers with a fixed per-sample input shape."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if not layer.check_input(shape):
                raise ShapeError(i, layer, _expected_shape(layer, shape), shape)
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self._forward_done = False
        self.last_output = None

    def parameters(self):
        """Parameter arrays in a fixed order (layer order, then name order)."""
        return [layer.params[name] for layer in self.layers for name in sorted(layer.params)]

    def parameter_names(self):
        return [f"{i}.{layer.kind}.{name}"
                for i, layer in enumerate(self.layers) for name in sorted(layer.params)]

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(0, self.layers[0] if self.layers else None,
                             ("batch",) + self.input_shape, x.shape)
        for layer in self.layers:
            x = layer.forward(x)
        self._forward_done = True
        self.last_output = x
        return x

    def backward(self, output_grad, skip_last=0, input_grad=True):
        """Backpropagate ``output_grad`` through the cached forward pass.

        With ``skip_last=k`` the gradient is taken to be with respect to the
        input of the last ``k`` layers (e.g. logits below a softmax head).
        Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
        :meth:`parameters`; the input gradient is None when ``input_grad`` is
        false. Parameters are not touched.
        """
        if not self._forward_done:
            raise UsageError("backward called before forward")
        grad = np.asarray(output_grad, dtype=DTYPE)
        layers = self.layers[: len(self.layers) - skip_last]
        per_layer = []
        for i in range(len(layers) - 1, -1, -1):
            grad, pg = layers[i].backward(grad, need_input_grad=input_grad or i > 0)
            per_layer.append(pg)
        per_layer.reverse()
        grads = []
        for layer, pg in zip(layers, per_layer):
            grads.extend(pg[name] for name in sorted(layer.params))
        for layer in self.layers[len(layers):]:
            grads.extend(np.zeros_like(layer.params[name]) for name in sorted(layer.params))
        return grads, grad

    def copy(self):
        clone = Network.__new__(Network)
        clone.layers = []
        for layer in self.layers:
            new = _build_layer(layer.tag, layer.hyperparameters())
            new.params = {k: v.copy() for k, v in layer.params.items()}
            clone.layers.append(new)
        clone.input_shape = self.input_shape
        clone.output_shape = self.output_shape
        clone._forward_done = False
        clone.last_output = None
        return clone

    def __repr__(self):
        return f"Network({self.input_shape} -> {self.output_shape}: {self.layers})"


def _expected_shape(layer, got):
    if isinstance(layer, Conv2D):
        return (layer.in_channels, "H", "W")
    if isinstance(layer, MaxPool2D):
        return ("C", f"H%{layer.window}==0", f"W%{layer.window}==0")
    if isinstance(layer, Dense):
        return (layer.in_features,)
    return got


# ---------------------------------------------------------------- optimizers


class Optimizer:
    """SGD, Adam or RMSProp over a list of parameter arrays (updated in place)."""

    KINDS = ("sgd", "adam", "rmsprop")

    def __init__(self, kind, learning_rate, beta1=0.9, beta2=0.999, decay=0.9, eps=1e-8):
        kind = kind.lower()
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer {kind!r}")
        if learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        self.kind = kind
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.decay = decay
        self.eps = eps
        self.step_count = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def _init_state(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, context=None):
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ValueError(f"grad {i} has shape {g.shape}, param has {p.shape}")
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient", param_index=i,
                                      step=self.step_count, **(context or {}))
        if self.m is None:
            self._init_state(params)
        self.step_count += 1
        lr = self.learning_rate
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
        elif self.kind == "rmsprop":
            for p, g, v in zip(params, grads, self.v):
                v *= self.decay
                v += (1.0 - self.decay) * g * g
                p -= lr * g / (np.sqrt(v) + self.eps)
        else:
            t = self.step_count
            c1 = 1.0 - self.beta1 ** t
            c2 = 1.0 - self.beta2 ** t
            for p, g, m, v in zip(params, grads, self.m, self.v):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


# ------------------------------------------------------------ gradient check


def _branches(net):
    """Active piece of every piecewise-linear layer from the last forward pass."""
    return [layer.branch().copy() for layer in net.layers if hasattr(layer, "branch")]


def _same_branches(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(net, x, loss_grad=None, step=1e-5, rng=None, max_params=None,
                   include_input=False, skip_kinks=False, stats=None):
    """Largest relative gradient error over the network's parameters.

    The loss is ``sum(out * r)`` for a fixed random ``r`` unless ``loss_grad``
    is given, in which case it must map an output array to ``(loss, dloss/dout)``.
    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)`` with the
    numeric value ``n`` from central differences. ``max_params`` subsamples
    coordinates per array; ``include_input`` also checks the input gradient,
    which is the only check available for parameter-free layers.

    With ``skip_kinks`` a coordinate is left out when either perturbed forward
    pass lands on a different ReLU sign pattern or pooling argmax than the
    unperturbed one: the difference quotient then straddles a kink and is not a
    derivative estimate. ``stats`` (a dict) receives ``checked`` and ``skipped``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.array(x, dtype=DTYPE)
    targets = list(net.parameters())
    if not targets and not include_input:
        return 0.0
    if loss_grad is None:
        weights = rng.standard_normal((x.shape[0],) + net.output_shape)

        def loss_grad(out):
            return float(np.sum(out * weights)), weights

    out = net.forward(x)
    base = _branches(net) if skip_kinks else None
    _, g = loss_grad(out)
    analytic, input_grad = net.backward(g)
    analytic = list(analytic)
    if include_input:
        targets.append(x)
        analytic.append(input_grad)
    worst = 0.0
    checked = skipped = 0
    for p, a in zip(targets, analytic):
        flat = p.reshape(-1)
        a = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_params is not None and flat.size > max_params:
            idx = rng.choice(flat.size, size=max_params, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_grad(net.forward(x))
            smooth = not skip_kinks or _same_branches(base, _branches(net))
            flat[i] = orig - step
            lm, _ = loss_grad(net.forward(x))
            smooth = smooth and (not skip_kinks or _same_branches(base, _branches(net)))
            flat[i] = orig
            if not smooth:
                skipped += 1
                continue
            checked += 1
            num = (lp - lm) / (2.0 * step)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
            worst = max(worst, err)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SDNN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _build_layer(tag, hyper):
    cls = LAYER_TYPES[tag]
    if cls is Conv2D:
        return Conv2D(*hyper)
    if cls is MaxPool2D:
        return MaxPool2D(*hyper)
    if cls is Dense:
        return Dense(*hyper)
    return cls()


def dump_network(net) -> bytes:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<HH", CHECKPOINT_VERSION, len(net.input_shape))
    out += struct.pack(f"<{len(net.input_shape)}I", *net.input_shape)
    out += struct.pack("<I", len(net.layers))
    for layer in net.layers:
        hyper = layer.hyperparameters()
        out += struct.pack("<BB", layer.tag, len(hyper))
        out += struct.pack(f"<{len(hyper)}q", *hyper)
        names = sorted(layer.params)
        out += struct.pack("<B", len(names))
        for name in names:
            arr = layer.params[name]
            enc = name.encode("ascii")
            out += struct.pack("<B", len(enc)) + enc
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def load_network(blob: bytes) -> Network:
    view = memoryview(blob)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 4
    version, ndim = take("<HH")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    input_shape = take(f"<{ndim}I")
    (n_layers,) = take("<I")
    layers = []
    for _ in range(n_layers):
        tag, n_hyper = take("<BB")
        if tag not in LAYER_TYPES:
            raise CheckpointError(f"unknown layer tag {tag}")
        hyper = list(take(f"<{n_hyper}q"))
        layer = _build_layer(tag, hyper)
        (n_params,) = take("<B")
        for _ in range(n_params):
            (name_len,) = take("<B")
            name = bytes(take(f"<{name_len}s")[0]).decode("ascii")
            (pdim,) = take("<B")
            shape = take(f"<{pdim}I")
            count = math.prod(shape)
            raw = take(f"<{8 * count}s")[0]
            arr = np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(shape)
            if name not in layer.params or layer.params[name].shape != arr.shape:
                raise CheckpointError(f"parameter {name} shape {shape} does not fit {layer!r}")
            layer.params[name] = arr.copy()
        layers.append(layer)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return Network(layers, input_shape)


def save_network(net, path):
    Path(path).write_bytes(dump_network(net))


def read_network(path):
    return load_network(Path(path).read_bytes())
