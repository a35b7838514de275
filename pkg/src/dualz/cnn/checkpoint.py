"""NLM1 model checkpoints: spec echo, f32 tensors, trailing CRC32."""
import struct

import numpy as np

from .. import binio
from ..errors import FormatError
from .model import Model, ModelSpec

MAGIC = b"NLM1"
VERSION = 1


def _tensors(model):
    out = [p.value for p in model.params()]
    for bn in model.batchnorms():
        out += [bn.running_mean, bn.running_var]
    return out


def to_bytes(model: Model) -> bytes:
    s = model.spec
    parts = [
        MAGIC,
        struct.pack("<III", VERSION, s.crop_px, s.in_channels),
        struct.pack("<I", len(s.conv_widths)),
        struct.pack(f"<{len(s.conv_widths)}I", *s.conv_widths),
        struct.pack("<Iff", s.hidden, s.dropout, s.bn_momentum),
        struct.pack("<fff", model.input_mean, model.input_std, model.label_scale),
    ]
    tensors = _tensors(model)
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def save_model(model: Model, path):
    binio.write_with_crc(path, to_bytes(model))


class _Reader:
    def __init__(self, data, off):
        self.data, self.off = data, off

    def take(self, fmt):
        need = self.off + struct.calcsize(fmt)
        if need > len(self.data) - 4:
            from ..errors import TruncatedFile

            raise TruncatedFile(f"checkpoint ends before offset {need}")
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off = need
        return vals


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    (crop_px, in_ch), off = binio.unpack_header(data, MAGIC, VERSION, "<II")
    r = _Reader(data, off)
    (n_conv,) = r.take("<I")
    widths = r.take(f"<{n_conv}I")
    hidden, dropout, momentum = r.take("<Iff")
    mean, std, scale = r.take("<fff")
    spec = ModelSpec(crop_px, in_ch, tuple(widths), hidden, float(np.float32(dropout)), float(np.float32(momentum)))
    model = Model(spec)
    model.input_mean, model.input_std, model.label_scale = float(mean), float(std), float(scale)
    targets = _tensors(model)
    (n,) = r.take("<I")
    if n != len(targets):
        raise FormatError(f"checkpoint holds {n} tensors, architecture needs {len(targets)}")
    loaded = []
    for t in targets:
        (ndim,) = r.take("<I")
        shape = r.take(f"<{ndim}I")
        if tuple(shape) != t.shape:
            raise FormatError(f"tensor shape {shape} does not match {t.shape}")
        count = int(np.prod(shape))
        r.take(f"<{4 * count}x")
        loaded.append(np.frombuffer(data, "<f4", count, r.off - 4 * count).reshape(shape).astype(np.float32))
    binio.require_length(data, r.off + 4)
    params = model.params()
    for p, v in zip(params, loaded):
        p.value = v
        p.grad = np.zeros_like(v)
    rest = loaded[len(params):]
    for i, bn in enumerate(model.batchnorms()):
        bn.set_buffers(rest[2 * i], rest[2 * i + 1])
    return model
