"""Dual-focal-plane pair datasets built from single-plane z-stacks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import DeltaNotOnGrid, TooFewParticles
from .refz import detect_frames

NLT_MAGIC = b"NLT1"
NLT_VERSION = 1
_HEADER_FMT = "<IffQ"  # crop_px, pixel_size_nm, delta_nm, sample count

TRAIN, TEST = 0, 1


@dataclass
class PairSample:
    particle_id: int
    bottom: object  # imaging.Frame
    top: object
    delta: float
    dz_label: float


def grid_steps(delta, z_step):
    """Number of stage steps spanned by ``delta``; raises if off-grid."""
    k = delta / z_step
    if delta <= 0 or abs(k - round(k)) > 1e-9 * max(1.0, abs(k)):
        raise DeltaNotOnGrid(f"delta {delta} nm is not a positive multiple of z_step {z_step} nm")
    return int(round(k))


def pair_candidates(stack, delta):
    """Bottom-frame indices for which a frame ``delta`` higher exists."""
    k = grid_steps(delta, stack.z_step)
    return list(range(len(stack.frames) - k))


def build_pairs_logged(stack, ref, delta, detected=None):
    """Like :func:`build_pairs` but also returns the number of rejected candidates."""
    k = grid_steps(delta, stack.z_step)
    if detected is None:
        _, detected = detect_frames(stack)
    out, rejected = [], 0
    for j in range(len(stack.frames) - k):
        if not (detected[j] or detected[j + k]):
            rejected += 1
            continue
        bottom, top = stack.frames[j], stack.frames[j + k]
        out.append(PairSample(stack.particle.id, bottom, top, float(top.z_stage - bottom.z_stage),
                              bottom.z_stage - ref.z_bar))
    return out, rejected


def build_pairs(stack, ref, delta, detected=None):
    """Pairs offset by ``delta`` where at least one frame shows the particle.

    The label is the defocus of the bottom frame relative to the particle's
    reference coordinate.
    """
    return build_pairs_logged(stack, ref, delta, detected)[0]


@dataclass
class PairDataset:
    delta: float
    crop_px: int
    pixel_size: float
    particle_id: np.ndarray  # u8
    split: np.ndarray  # u1: 0 train, 1 test
    dz_label: np.ndarray  # f4, nm
    bottom_z: np.ndarray  # f4, nm
    bottom: np.ndarray  # (n, crop, crop) f4
    top: np.ndarray

    def __post_init__(self):
        # header scalars are stored as f32 on disk
        self.delta = float(np.float32(self.delta))
        self.pixel_size = float(np.float32(self.pixel_size))

    def __len__(self):
        return len(self.dz_label)

    def indices(self, split):
        tag = {"train": TRAIN, "test": TEST}.get(split, split)
        return np.flatnonzero(self.split == tag)

    def inputs(self, idx=None):
        """Network input batch (n, crop, crop, 2): bottom and top as channels."""
        if idx is None:
            idx = slice(None)
        return np.stack([self.bottom[idx], self.top[idx]], axis=-1)

    def labels(self, idx=None):
        if idx is None:
            idx = slice(None)
        return self.dz_label[idx]

    @property
    def n_train(self):
        return int(np.sum(self.split == TRAIN))

    @property
    def n_test(self):
        return int(np.sum(self.split == TEST))

    @classmethod
    def from_samples(cls, samples, delta, pixel_size, split=None):
        n = len(samples)
        crop = samples[0].bottom.pixels.shape[0] if n else 0
        return cls(
            delta=float(delta),
            crop_px=int(crop),
            pixel_size=float(pixel_size),
            particle_id=np.array([s.particle_id for s in samples], dtype=np.uint64),
            split=np.zeros(n, np.uint8) if split is None else np.asarray(split, np.uint8),
            dz_label=np.array([s.dz_label for s in samples], dtype=np.float32),
            bottom_z=np.array([s.bottom.z_stage for s in samples], dtype=np.float32),
            bottom=np.array([s.bottom.pixels for s in samples], dtype=np.float32).reshape(n, crop, crop),
            top=np.array([s.top.pixels for s in samples], dtype=np.float32).reshape(n, crop, crop),
        )

    def equals(self, other):
        return (
            self.delta == other.delta and self.crop_px == other.crop_px and self.pixel_size == other.pixel_size
            and all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("particle_id", "split", "dz_label", "bottom_z", "bottom", "top"))
        )


def split_particles(particle_ids, train_fraction=0.8, seed=0):
    """Return the set of particle ids assigned to training."""
    ids = np.unique(np.asarray(particle_ids, dtype=np.uint64))
    if len(ids) < 10:
        raise TooFewParticles(f"need >= 10 distinct particles, have {len(ids)}")
    n_train = int(math.floor(train_fraction * len(ids) + 0.5))
    perm = np.random.default_rng(seed).permutation(len(ids))
    return set(ids[perm[:n_train]].tolist())


def split_dataset(samples, train_fraction=0.8, seed=0, delta=None, pixel_size=33.6) -> PairDataset:
    """Assign whole particles to train or test so no particle straddles both."""
    train_ids = split_particles([s.particle_id for s in samples], train_fraction, seed)
    tags = [TRAIN if s.particle_id in train_ids else TEST for s in samples]
    if delta is None:
        delta = samples[0].delta
    return PairDataset.from_samples(samples, delta, pixel_size, split=tags)


def _record_dtype(crop_px):
    return np.dtype([
        ("particle_id", "<u8"),
        ("split", "u1"),
        ("dz_label", "<f4"),
        ("bottom_z", "<f4"),
        ("bottom", "<f4", (crop_px, crop_px)),
        ("top", "<f4", (crop_px, crop_px)),
    ])


def to_bytes(ds: PairDataset) -> bytes:
    rec = np.empty(len(ds), dtype=_record_dtype(ds.crop_px))
    for name in ("particle_id", "split", "dz_label", "bottom_z", "bottom", "top"):
        rec[name] = getattr(ds, name)
    header = binio.pack_header(NLT_MAGIC, NLT_VERSION, _HEADER_FMT, ds.crop_px, ds.pixel_size, ds.delta, len(ds))
    return header + rec.tobytes()


def save_dataset(ds: PairDataset, path):
    binio.write_with_crc(path, to_bytes(ds))


def load_dataset(path) -> PairDataset:
    data = binio.read_verified(path)
    (crop_px, pixel_size, delta, n), off = binio.unpack_header(data, NLT_MAGIC, NLT_VERSION, _HEADER_FMT)
    dt = _record_dtype(crop_px)
    binio.require_length(data, off + n * dt.itemsize + 4)
    rec = np.frombuffer(data, dtype=dt, count=n, offset=off)
    return PairDataset(
        delta=float(delta),
        crop_px=int(crop_px),
        pixel_size=float(pixel_size),
        particle_id=rec["particle_id"].copy(),
        split=rec["split"].copy(),
        dz_label=rec["dz_label"].copy(),
        bottom_z=rec["bottom_z"].copy(),
        bottom=rec["bottom"].copy(),
        top=rec["top"].copy(),
    )


def build_dataset(stacks, refs, delta, train_fraction=0.8, seed=0, pixel_size=33.6):
    """Pairs for every stack with a reference coordinate, split by particle.

    Returns ``(dataset, log)`` where ``log`` rows are
    ``(particle_id, candidates, kept, rejected)``.
    """
    samples, log = [], []
    for st in stacks:
        ref = refs.get(st.particle.id)
        if ref is None:
            continue
        got, rej = build_pairs_logged(st, ref, delta)
        samples.extend(got)
        log.append((st.particle.id, len(got) + rej, len(got), rej))
    ds = split_dataset(samples, train_fraction, seed, delta=delta, pixel_size=pixel_size)
    return ds, log
