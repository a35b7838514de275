"""The fixed dual-plane regression network."""
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch
from .layers import AvgPool2, BatchNorm, Conv2D, Dense, Dropout, Flatten, ReLU


@dataclass(frozen=True)
class ModelSpec:
    crop_px: int = 64
    in_channels: int = 2
    conv_widths: tuple = (16, 32, 64)
    hidden: int = 128
    dropout: float = 0.5
    bn_momentum: float = 0.9

    @property
    def flat_size(self):
        side = self.crop_px // 2 ** len(self.conv_widths)
        return side * side * self.conv_widths[-1]


class Model:
    """Conv-ReLU-BN-Pool x3, Flatten, FC-ReLU-BN-Dropout, FC(1)."""

    def __init__(self, spec: ModelSpec, seed=0, dtype=np.float32):
        if spec.crop_px % 2 ** len(spec.conv_widths):
            raise ShapeMismatch(f"crop_px {spec.crop_px} not divisible by {2 ** len(spec.conv_widths)}")
        self.spec = spec
        ss = np.random.SeedSequence(seed)
        init_ss, drop_ss = ss.spawn(2)
        rng = np.random.default_rng(init_ss)
        layers = []
        c = spec.in_channels
        for i, w in enumerate(spec.conv_widths, 1):
            layers += [
                Conv2D(c, w, rng, dtype, name=f"conv{i}"),
                ReLU(name=f"relu{i}"),
                BatchNorm(w, spec.bn_momentum, dtype=dtype, name=f"bn{i}"),
                AvgPool2(name=f"pool{i}"),
            ]
            c = w
        n = len(spec.conv_widths) + 1
        layers += [
            Flatten(),
            Dense(spec.flat_size, spec.hidden, rng, dtype, name=f"fc{n}"),
            ReLU(name=f"relu{n}"),
            BatchNorm(spec.hidden, spec.bn_momentum, dtype=dtype, name=f"bn{n}"),
            Dropout(spec.dropout, name="dropout"),
            Dense(spec.hidden, 1, rng, dtype, gain=3.0, name="out"),
        ]
        layers[0].need_input_grad = False
        self.layers = layers
        self.dtype = dtype
        self.dropout_seed(int(drop_ss.generate_state(1)[0]))
        # affine input/label maps fixed at training time
        self.input_mean = 0.0
        self.input_std = 1.0
        self.label_scale = 1.0
        self.selected_epoch = None

    def snapshot(self):
        """Copies of every parameter and BatchNorm running statistic."""
        return ([p.value.copy() for p in self.params()],
                [(bn.running_mean.copy(), bn.running_var.copy()) for bn in self.batchnorms()])

    def restore(self, snap):
        values, stats = snap
        for p, v in zip(self.params(), values):
            p.value[...] = v
        for bn, (mean, var) in zip(self.batchnorms(), stats):
            bn.set_buffers(mean.copy(), var.copy())

    def dropout_seed(self, seed):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.reseed(seed)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def batchnorms(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self.dtype = dtype
        return self

    def forward(self, x, train=False):
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.crop_px, s.crop_px, s.in_channels):
            raise ShapeMismatch(f"expected (B,{s.crop_px},{s.crop_px},{s.in_channels}), got {x.shape}")
        h = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            h = layer.forward(h, train)
        return h

    def backward(self, dout):
        g = dout.astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break

    def first_nonfinite_layer(self, x, train=True):
        """Name of the first layer whose output is not finite, or None."""
        h = x.astype(self.dtype, copy=False)
        if not np.all(np.isfinite(h)):
            return "input"
        for layer in self.layers:
            h = layer.forward(h, train)
            if not np.all(np.isfinite(h)):
                return layer.name
        return None

    def normalize(self, x):
        return ((x - self.input_mean) / self.input_std).astype(self.dtype)

    def predict(self, x_raw, batch_size=64):
        """Eval-mode predictions in label units (nm) for raw (n, H, W, 2) input."""
        out = np.empty(len(x_raw), dtype=np.float64)
        for i in range(0, len(x_raw), batch_size):
            xb = self.normalize(x_raw[i:i + batch_size])
            out[i:i + batch_size] = self.forward(xb, train=False)[:, 0]
        return out * self.label_scale
