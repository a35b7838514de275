"""Differentiable layers on NHWC numpy arrays.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Parameter.grad`` on ``backward``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NoCachedForward, ShapeMismatch


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    name = "layer"

    def params(self):
        return []

    def buffers(self):
        """Non-trainable state saved with the model (e.g. BN running stats)."""
        return []

    def _need_cache(self, attr="_cache"):
        c = getattr(self, attr, None)
        if c is None:
            raise NoCachedForward(f"{self.name}: backward called without a cached train-mode forward")
        return c

    def astype(self, dtype):
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self


class Conv2D(Layer):
    """3x3 convolution, stride 1, 'same' zero padding."""

    def __init__(self, c_in, c_out, rng, dtype=np.float32, k=3, name="conv"):
        self.name = name
        self.k = k
        fan_in = k * k * c_in
        lim = np.sqrt(6.0 / fan_in)
        self.w = Parameter(name + ".w", rng.uniform(-lim, lim, (k, k, c_in, c_out)).astype(dtype))
        self.b = Parameter(name + ".b", np.zeros(c_out, dtype))
        self.need_input_grad = True
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def _cols(self, x):
        B, H, W, C = x.shape
        k, p = self.k, self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # B, H, W, C, k, k
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, k * k * C)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[-1] != self.w.value.shape[2]:
            raise ShapeMismatch(f"{self.name}: expected (B,H,W,{self.w.value.shape[2]}), got {x.shape}")
        B, H, W, _ = x.shape
        cols = self._cols(x)
        c_out = self.w.value.shape[-1]
        y = cols @ self.w.value.reshape(-1, c_out)
        y += self.b.value
        self._cache = (cols, x.shape) if train else None
        return y.reshape(B, H, W, c_out)

    def backward(self, dy):
        cols, shape = self._need_cache()
        B, H, W, C = shape
        k, p = self.k, self.k // 2
        c_out = dy.shape[-1]
        d = dy.reshape(-1, c_out)
        self.w.grad += (cols.T @ d).reshape(self.w.value.shape)
        self.b.grad += np.ones(d.shape[0], d.dtype) @ d
        if not self.need_input_grad:
            return None
        dcols = (d @ self.w.value.reshape(-1, c_out).T).reshape(B, H, W, k, k, C)
        dxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + H, p:p + W, :]


class ReLU(Layer):
    name = "relu"

    def __init__(self, name="relu"):
        self.name = name
        self._cache = None

    def forward(self, x, train=False):
        y = np.maximum(x, 0)
        self._cache = y if train else None
        return y

    def backward(self, dy):
        return dy * (self._need_cache() > 0)


class BatchNorm(Layer):
    """Normalises over every axis but the last (channels / features)."""

    def __init__(self, n, momentum=0.9, eps=1e-5, dtype=np.float32, name="bn"):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(name + ".gamma", np.ones(n, dtype))
        self.beta = Parameter(name + ".beta", np.zeros(n, dtype))
        self.running_mean = np.zeros(n, dtype)
        self.running_var = np.ones(n, dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def set_buffers(self, mean, var):
        self.running_mean = mean
        self.running_var = var

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x, train=False):
        c = self.gamma.value.shape[0]
        if x.shape[-1] != c:
            raise ShapeMismatch(f"{self.name}: expected {c} channels, got {x.shape}")
        x2 = x.reshape(-1, c)
        if train:
            n = x2.shape[0]
            ones = np.full(n, 1.0 / n, x.dtype)
            mu = ones @ x2
            xc = x2 - mu
            var = ones @ (xc * xc)
            inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat = xc
            xhat *= inv
            m = self.momentum
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * unbiased).astype(x.dtype)
            self._cache = (xhat, inv, ones)
            y = xhat * self.gamma.value
        else:
            inv = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
            scale = self.gamma.value * inv
            self._cache = None
            y = x2 * scale
            y += self.beta.value - self.running_mean * scale
            return y.reshape(x.shape)
        y += self.beta.value
        return y.reshape(x.shape)

    def backward(self, dy):
        xhat, inv, ones = self._need_cache()
        dy2 = dy.reshape(xhat.shape)
        n = xhat.shape[0]
        sum_d = (ones @ dy2) * n
        sum_dx = (ones @ (dy2 * xhat)) * n
        self.gamma.grad += sum_dx
        self.beta.grad += sum_d
        g = self.gamma.value * inv
        dx = dy2 * g
        dx -= xhat * (g * sum_dx / n)
        dx -= g * sum_d / n
        return dx.reshape(dy.shape)


class AvgPool2(Layer):
    def __init__(self, name="pool"):
        self.name = name
        self._shape = None

    def forward(self, x, train=False):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ShapeMismatch(f"{self.name}: spatial dims {H}x{W} must be even")
        self._shape = x.shape
        y = x[:, 0::2, 0::2] + x[:, 1::2, 0::2]
        y += x[:, 0::2, 1::2]
        y += x[:, 1::2, 1::2]
        y *= y.dtype.type(0.25)
        return y

    def backward(self, dy):
        if self._shape is None:
            raise NoCachedForward(f"{self.name}: no cached forward")
        g = dy * dy.dtype.type(0.25)
        dx = np.empty(self._shape, dy.dtype)
        for i in (0, 1):
            for j in (0, 1):
                dx[:, i::2, j::2] = g
        return dx


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        if self._shape is None:
            raise NoCachedForward(f"{self.name}: no cached forward")
        return dy.reshape(self._shape)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, gain=6.0, name="fc"):
        self.name = name
        lim = np.sqrt(gain / n_in)
        self.w = Parameter(name + ".w", rng.uniform(-lim, lim, (n_in, n_out)).astype(dtype))
        self.b = Parameter(name + ".b", np.zeros(n_out, dtype))
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.w.value.shape[0]:
            raise ShapeMismatch(f"{self.name}: expected (B,{self.w.value.shape[0]}), got {x.shape}")
        self._cache = x if train else None
        return x @ self.w.value + self.b.value

    def backward(self, dy):
        x = self._need_cache()
        self.w.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value.T


class Dropout(Layer):
    """Inverted dropout: train-mode masks are scaled by 1 / (1 - rate)."""

    def __init__(self, rate=0.5, seed=0, name="dropout"):
        self.name = name
        self.rate = rate
        self.reseed(seed)
        self._cache = None

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        if not train:
            self._cache = None
            return x
        if self.rate == 0:
            self._cache = x.dtype.type(1)
            return x
        keep = self.rng.random(x.shape) >= self.rate
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.rate))
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._need_cache()
