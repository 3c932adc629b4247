"""Dense float64 layer primitives with forward and reverse passes.

Every layer works on batched arrays: ``(N, C, T)`` for temporal layers and
``(N, D)`` for dense ones. Layers cache what they need during ``forward`` and
``backward`` consumes that cache, filling ``layer.grads`` for trainable
parameters and returning the gradient with respect to the layer input.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CONV_WIDTHS = (3, 6, 12)


class MissingForwardCache(RuntimeError):
    """Raised when ``backward`` is called before a caching forward pass."""


def same_padding(width: int) -> tuple[int, int]:
    # extra element goes on the right for even widths
    left = (width - 1) // 2
    return left, width - 1 - left


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    return x, False


def _conv_patches(x: np.ndarray, width: int, padding: str) -> np.ndarray:
    """Return (N, T_out, C*width) windows of a (N, C, T) batch."""
    if padding == "same":
        left, right = same_padding(width)
        x = np.pad(x, ((0, 0), (0, 0), (left, right)))
    elif padding != "valid":
        raise ValueError(f"unknown padding {padding!r}")
    if x.shape[2] < width:
        raise ValueError(f"time length {x.shape[2]} shorter than kernel width {width}")
    win = sliding_window_view(x, width, axis=2)  # (N, C, T_out, K)
    n, c, t_out, k = win.shape
    return win.transpose(0, 2, 1, 3).reshape(n, t_out, c * k)


def conv1d_forward(x, kernels, bias, padding: str = "same") -> np.ndarray:
    """Temporal convolution (cross-correlation, as in deep-learning toolkits).

    ``x`` is ``(C, T)`` or ``(N, C, T)``; ``kernels`` is ``(F, C, K)``.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    xb, squeeze = _as_batch(x, 3)
    if kernels.ndim != 3 or kernels.shape[1] != xb.shape[1]:
        raise ValueError(
            f"kernel shape {kernels.shape} incompatible with input channels {xb.shape[1]}"
        )
    if bias.shape != (kernels.shape[0],):
        raise ValueError(f"bias shape {bias.shape} != ({kernels.shape[0]},)")
    patches = _conv_patches(xb, kernels.shape[2], padding)
    out = patches @ kernels.reshape(kernels.shape[0], -1).T + bias
    out = out.transpose(0, 2, 1)
    return out[0] if squeeze else out


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def avgpool1d_forward(x, window: int, stride: int | None = None) -> np.ndarray:
    """Mean over non-overlapping (or strided) windows; partial tail windows are dropped."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    xb, squeeze = _as_batch(x, 3)
    if window > xb.shape[2]:
        raise ValueError(f"window {window} longer than time axis {xb.shape[2]}")
    out = sliding_window_view(xb, window, axis=2)[:, :, ::stride, :].mean(axis=-1)
    return out[0] if squeeze else out


def dense_forward(x, weights, bias) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ValueError(f"weights {weights.shape} incompatible with input {x.shape}")
    if np.shape(bias) != (weights.shape[0],):
        raise ValueError(f"bias shape {np.shape(bias)} != ({weights.shape[0]},)")
    return x @ weights.T + bias


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise MissingForwardCache(f"{self.kind}: backward called without a forward pass")
        return self._cache

    def state(self) -> dict[str, np.ndarray]:
        """Everything that must be checkpointed (parameters plus buffers)."""
        return dict(self.params)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name in self.params:
            self.params[name][...] = state[name]

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv1D(Layer):
    kind = "conv1d"

    def __init__(self, kernels, bias, padding="same"):
        super().__init__()
        kernels = np.array(kernels, dtype=np.float64)
        if kernels.ndim != 3:
            raise ValueError("kernels must be (filters, channels, width)")
        if kernels.shape[2] not in CONV_WIDTHS:
            raise ValueError(f"kernel width {kernels.shape[2]} not in {CONV_WIDTHS}")
        self.params = {"kernel": kernels, "bias": np.array(bias, dtype=np.float64)}
        self.padding = padding

    @property
    def width(self) -> int:
        return self.params["kernel"].shape[2]

    def forward(self, x, training=False, rng=None):
        k = self.params["kernel"]
        if x.shape[1] != k.shape[1]:
            raise ValueError(f"conv1d expects {k.shape[1]} channels, got {x.shape[1]}")
        patches = _conv_patches(x, k.shape[2], self.padding)
        out = patches @ k.reshape(k.shape[0], -1).T + self.params["bias"]
        self._cache = (patches, x.shape)
        return out.transpose(0, 2, 1)

    def backward(self, grad):
        patches, in_shape = self._take_cache()
        k = self.params["kernel"]
        f, c, w = k.shape
        n, _, t_out = grad.shape
        g = grad.transpose(0, 2, 1).reshape(n * t_out, f)
        self.grads = {
            "kernel": (g.T @ patches.reshape(n * t_out, -1)).reshape(k.shape),
            "bias": g.sum(axis=0),
        }
        dpatch = (g @ k.reshape(f, -1)).reshape(n, t_out, c, w)
        left, right = same_padding(w) if self.padding == "same" else (0, 0)
        dx = np.zeros((n, c, in_shape[2] + left + right))
        for j in range(w):
            dx[:, :, j:j + t_out] += dpatch[:, :, :, j].transpose(0, 2, 1)
        return dx[:, :, left:left + in_shape[2]]

    def __repr__(self):
        f, c, w = self.params["kernel"].shape
        return f"Conv1D(filters={f}, channels={c}, width={w}, padding={self.padding!r})"


class ReLU(Layer):
    kind = "relu"

    @staticmethod
    def fn(x):
        return np.maximum(x, 0.0)

    def forward(self, x, training=False, rng=None):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return grad * self._take_cache()


class Sigmoid(Layer):
    kind = "sigmoid"

    @staticmethod
    def fn(x):
        return sigmoid(x)

    def forward(self, x, training=False, rng=None):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad):
        y = self._take_cache()
        return grad * y * (1.0 - y)


class AvgPool1D(Layer):
    kind = "avgpool1d"

    def __init__(self, window=3, stride=None):
        super().__init__()
        self.window = int(window)
        self.stride = self.window if stride is None else int(stride)
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")

    def out_length(self, t: int) -> int:
        return (t - self.window) // self.stride + 1

    def forward(self, x, training=False, rng=None):
        self._cache = x.shape
        return avgpool1d_forward(x, self.window, self.stride)

    def backward(self, grad):
        in_shape = self._take_cache()
        dx = np.zeros(in_shape)
        span = self.stride * (grad.shape[2] - 1) + 1
        for j in range(self.window):
            dx[:, :, j:j + span:self.stride] += grad / self.window
        return dx

    def __repr__(self):
        return f"AvgPool1D(window={self.window}, stride={self.stride})"


class BatchNorm(Layer):
    """Per-feature normalisation over the batch (and time, for 3-D input)."""

    kind = "batchnorm"

    def __init__(self, n_features, epsilon=1e-3, momentum=0.99):
        super().__init__()
        self.params = {"scale": np.ones(n_features), "shift": np.zeros(n_features)}
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None

    @property
    def ready(self) -> bool:
        return self.running_mean is not None

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode map as per-feature ``y = a*x + c``."""
        if not self.ready:
            raise RuntimeError("batchnorm has no running statistics; train or calibrate first")
        a = self.params["scale"] / np.sqrt(self.running_var + self.epsilon)
        return a, self.params["shift"] - a * self.running_mean

    def set_running_stats(self, mean, var):
        var = np.array(var, dtype=np.float64)
        if np.any(var < 0):
            raise ValueError("running variance must be non-negative")
        self.running_mean = np.array(mean, dtype=np.float64)
        self.running_var = var

    def forward(self, x, training=False, rng=None):
        bs = self._bshape(x)
        if not training:
            a, c = self.affine()
            xhat = (x - self.running_mean.reshape(bs)) / np.sqrt(self.running_var + self.epsilon).reshape(bs)
            self._cache = ("infer", a.reshape(bs), xhat)
            return x * a.reshape(bs) + c.reshape(bs)
        axes = (0,) + tuple(range(2, x.ndim))
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mu.reshape(bs)) * inv.reshape(bs)
        if self.running_mean is None:
            self.set_running_stats(mu, var)
        else:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu
            self.running_var = m * self.running_var + (1 - m) * var
        self._cache = ("train", xhat, inv, axes)
        return xhat * self.params["scale"].reshape(bs) + self.params["shift"].reshape(bs)

    def backward(self, grad):
        cache = self._take_cache()
        bs = self._bshape(grad)
        if cache[0] == "infer":
            # gradients w.r.t. scale/shift at fixed running statistics
            _, a, xhat = cache
            axes = (0,) + tuple(range(2, grad.ndim))
            self.grads = {"scale": (grad * xhat).sum(axis=axes), "shift": grad.sum(axis=axes)}
            return grad * a
        _, xhat, inv, axes = cache
        self.grads = {
            "scale": (grad * xhat).sum(axis=axes),
            "shift": grad.sum(axis=axes),
        }
        g = grad * self.params["scale"].reshape(bs)
        mean_g = g.mean(axis=axes, keepdims=True)
        mean_gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (g - mean_g - xhat * mean_gx) * inv.reshape(bs)

    def state(self):
        out = dict(self.params)
        if self.ready:
            out["running_mean"] = self.running_mean
            out["running_var"] = self.running_var
        return out

    def load_state(self, state):
        super().load_state(state)
        if "running_mean" in state:
            self.set_running_stats(state["running_mean"], state["running_var"])

    def __repr__(self):
        return f"BatchNorm(features={self.params['scale'].size}, epsilon={self.epsilon})"


def batchnorm_forward(x, layer: BatchNorm, mode: str = "infer") -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return layer.forward(np.asarray(x, dtype=np.float64), training=(mode == "train"))


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/keep_prob, inference is the identity."""

    kind = "dropout"

    def __init__(self, keep_prob):
        super().__init__()
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
        self.keep_prob = float(keep_prob)

    def forward(self, x, training=False, rng=None):
        if not training or self.keep_prob == 1.0:
            self._cache = None if not training else 1.0
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs a random generator")
        mask = (rng.random(x.shape) < self.keep_prob) / self.keep_prob
        self._cache = mask
        return x * mask

    def backward(self, grad):
        if self._cache is None:
            # inference forward: identity
            return grad
        return grad * self._cache

    def __repr__(self):
        return f"Dropout(keep_prob={self.keep_prob})"


def dropout_forward(x, keep_prob, mode="infer", rng=None) -> np.ndarray:
    return Dropout(keep_prob).forward(np.asarray(x, dtype=np.float64), mode == "train", rng)


class Dense(Layer):
    kind = "dense"

    def __init__(self, weights, bias):
        super().__init__()
        weights = np.array(weights, dtype=np.float64)
        if weights.ndim != 2:
            raise ValueError("dense weights must be (out, in)")
        self.params = {"weight": weights, "bias": np.array(bias, dtype=np.float64)}

    def forward(self, x, training=False, rng=None):
        w = self.params["weight"]
        if x.shape[-1] != w.shape[1]:
            raise ValueError(f"dense expects {w.shape[1]} inputs, got {x.shape[-1]}")
        self._cache = x
        return x @ w.T + self.params["bias"]

    def backward(self, grad):
        x = self._take_cache()
        self.grads = {"weight": grad.T @ x, "bias": grad.sum(axis=0)}
        return grad @ self.params["weight"]

    def __repr__(self):
        o, i = self.params["weight"].shape
        return f"Dense({i} -> {o})"


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


AFFINE_KINDS = frozenset({"conv1d", "dense", "avgpool1d", "batchnorm"})
