"""Synthetic z-stacks of point-like nanoparticles.

The forward model is separable: a skewed-Gaussian axial envelope scales a
pixel-integrated lateral Gaussian whose width grows with defocus.  Frames are
rendered at the jittered stage position (``z_actual``) while downstream labels
use the nominal stage position (``z_stage``).
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import erf

from . import binio
from .errors import InvalidConfig, RangeTooSmall
from .photometry import disk_mask

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class OpticalConfig:
    axial_sigma: float = 260.0  # nm
    asymmetry: float = 0.2
    lateral_sigma0: float = 80.0  # nm
    lateral_growth: float = 0.5
    peak_brightness: float = 8000.0  # integrated counts of the in-focus spot
    sensor_noise_rms: float = 0.73
    encoder_sigma: float = 35.0  # nm
    pixel_size: float = 33.6  # nm / px
    crop_px: int = 64
    z_step: float = 250.0  # nm
    background: float = 20.0

    def validate(self):
        checks = [
            (self.axial_sigma > 0, "axial_sigma must be > 0"),
            (-1.0 <= self.asymmetry <= 1.0, "asymmetry must lie in [-1, 1]"),
            (self.lateral_sigma0 > 0, "lateral_sigma0 must be > 0"),
            (self.lateral_growth >= 0, "lateral_growth must be >= 0"),
            (self.pixel_size > 0, "pixel_size must be > 0"),
            (self.crop_px >= 8, "crop_px must be >= 8"),
            (self.z_step > 0, "z_step must be > 0"),
            (self.sensor_noise_rms >= 0, "sensor_noise_rms must be >= 0"),
            (self.encoder_sigma >= 0, "encoder_sigma must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidConfig(msg)
        return self

    @property
    def field_nm(self):
        return self.crop_px * self.pixel_size

    @property
    def center_nm(self):
        """Lateral coordinate of the centre of the crop's central pixel."""
        return (self.crop_px // 2 + 0.5) * self.pixel_size


@dataclass(frozen=True)
class ParticleTruth:
    id: int
    x: float
    y: float
    z_true: float


@dataclass
class Frame:
    pixels: np.ndarray  # (crop_px, crop_px) float32
    z_stage: float
    z_actual: float


@dataclass
class ZStack:
    particle: ParticleTruth
    frames: list = field(default_factory=list)
    usable: bool = True

    @property
    def z_stages(self):
        return np.array([f.z_stage for f in self.frames])

    @property
    def z_step(self):
        z = self.z_stages
        return float(z[1] - z[0])

    def pixel_array(self):
        return np.stack([f.pixels for f in self.frames])


def _raw_envelope(u, a):
    return np.exp(-0.5 * u * u) * (1.0 + a * erf(u / _SQRT2))


@lru_cache(maxsize=64)
def _envelope_mode(a):
    """Mode (in units of axial_sigma) of exp(-u^2/2) * (1 + a erf(u/sqrt 2))."""
    if a == 0.0:
        return 0.0, 1.0

    def slope(u):
        return -u * (1.0 + a * math.erf(u / _SQRT2)) + a * math.sqrt(2.0 / math.pi) * math.exp(-0.5 * u * u)

    u0 = brentq(slope, -3.0, 3.0, xtol=1e-15, rtol=1e-15, maxiter=200)
    return u0, float(_raw_envelope(np.float64(u0), a))


def axial_envelope(dz, cfg: OpticalConfig):
    """Relative spot brightness at defocus ``dz`` (nm); 1 at the mode."""
    a = float(cfg.asymmetry)
    _, peak = _envelope_mode(a)
    u = np.asarray(dz, dtype=np.float64) / cfg.axial_sigma
    out = _raw_envelope(u, a) / peak
    # guard the last ulp so the contract [0, 1] holds exactly
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def envelope_mode(cfg: OpticalConfig):
    """Defocus (nm) at which the axial envelope peaks."""
    return _envelope_mode(float(cfg.asymmetry))[0] * cfg.axial_sigma


def lateral_sigma(dz, cfg: OpticalConfig):
    u = np.asarray(dz, dtype=np.float64) / cfg.axial_sigma
    return cfg.lateral_sigma0 * np.sqrt(1.0 + cfg.lateral_growth * u * u)


def _pixel_integrals(center, sigma, n, pixel_size):
    edges = np.arange(n + 1, dtype=np.float64) * pixel_size
    c = erf((edges - center) / (_SQRT2 * sigma))
    return 0.5 * np.diff(c)


def lateral_psf(x, y, sigma, cfg: OpticalConfig):
    """Unit-integral 2D Gaussian integrated over each pixel; rows are y."""
    gx = _pixel_integrals(x, sigma, cfg.crop_px, cfg.pixel_size)
    gy = _pixel_integrals(y, sigma, cfg.crop_px, cfg.pixel_size)
    return np.outer(gy, gx)


def render_frame(p: ParticleTruth, z_stage, cfg: OpticalConfig, rng_seed) -> Frame:
    if not all(math.isfinite(v) for v in (p.x, p.y, p.z_true)):
        raise ValueError(f"particle {p.id} has non-finite coordinates")
    rng = np.random.default_rng(rng_seed)
    z_actual = float(z_stage) + cfg.encoder_sigma * rng.standard_normal()
    dz = z_actual - p.z_true
    spot = lateral_psf(p.x, p.y, float(lateral_sigma(dz, cfg)), cfg)
    img = cfg.background + cfg.peak_brightness * axial_envelope(dz, cfg) * spot
    if cfg.sensor_noise_rms > 0:
        img = img + cfg.sensor_noise_rms * rng.standard_normal(img.shape)
    return Frame(pixels=img.astype(np.float32), z_stage=float(z_stage), z_actual=z_actual)


def stage_grid(z_min, z_max, z_step):
    n = int(math.floor((z_max - z_min) / z_step + 1e-9)) + 1
    return z_min + z_step * np.arange(n, dtype=np.float64)


def frame_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def simulate_stack(p: ParticleTruth, z_min, z_max, cfg: OpticalConfig, seed) -> ZStack:
    if z_max - z_min < 2 * cfg.z_step:
        raise RangeTooSmall(f"scan range {z_max - z_min} nm is shorter than 2 z_step")
    zs = stage_grid(z_min, z_max, cfg.z_step)
    frames = [render_frame(p, z, cfg, frame_seed(seed, k)) for k, z in enumerate(zs)]
    margin = 2 * cfg.z_step
    usable = zs[0] + margin <= p.z_true <= zs[-1] - margin
    return ZStack(particle=p, frames=frames, usable=bool(usable))


def random_particles(n, cfg: OpticalConfig, z_lo, z_hi, seed, lateral_jitter_px=1.0):
    """Particles near the crop centre (detector-centred crops) uniform in z."""
    rng = np.random.default_rng(seed)
    c = cfg.center_nm
    j = lateral_jitter_px * cfg.pixel_size
    xs = c + rng.uniform(-j, j, n)
    ys = c + rng.uniform(-j, j, n)
    zs = rng.uniform(z_lo, z_hi, n)
    return [ParticleTruth(i, float(x), float(y), float(z)) for i, (x, y, z) in enumerate(zip(xs, ys, zs))]


def bright_frame_count(stack: ZStack, cfg: OpticalConfig, radius=5):
    """Frames whose mean central-disk brightness exceeds background + 3 noise RMS."""
    mask = disk_mask(cfg.crop_px, radius)
    level = cfg.background + 3 * cfg.sensor_noise_rms
    return int(sum(f.pixels[mask].mean() > level for f in stack.frames))


def integrated_brightness(frame: Frame, cfg: OpticalConfig):
    return float(np.sum(frame.pixels.astype(np.float64) - cfg.background))


# -- on-disk stack directory -------------------------------------------------

STACK_MAGIC = b"NLS1"
STACK_VERSION = 1


def _frame_dtype(crop_px):
    return np.dtype([
        ("particle_id", "<u8"),
        ("frame_index", "<u4"),
        ("z_stage", "<f8"),
        ("z_actual", "<f8"),
        ("pixels", "<f4", (crop_px, crop_px)),
    ])


def save_stacks(out_dir, stacks, cfg: OpticalConfig, seeds, extra=None):
    """Write ``manifest.json`` and ``frames.nls`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    n_frames = sum(len(s.frames) for s in stacks)
    rec = np.zeros(n_frames, dtype=_frame_dtype(cfg.crop_px))
    k = 0
    for s in stacks:
        for j, f in enumerate(s.frames):
            rec[k] = (s.particle.id, j, f.z_stage, f.z_actual, f.pixels)
            k += 1
    header = binio.pack_header(STACK_MAGIC, STACK_VERSION, "<IfQ", cfg.crop_px, cfg.pixel_size, n_frames)
    binio.write_with_crc(os.path.join(out_dir, "frames.nls"), header + rec.tobytes())

    manifest = {
        "config": dataclasses.asdict(cfg),
        "seeds": seeds,
        "particles": [
            {
                **dataclasses.asdict(s.particle),
                "usable": s.usable,
                "z_stage": [f.z_stage for f in s.frames],
                "z_actual": [f.z_actual for f in s.frames],
            }
            for s in stacks
        ],
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_stacks(stack_dir):
    """Inverse of :func:`save_stacks`; returns ``(stacks, cfg, manifest)``."""
    mpath = os.path.join(stack_dir, "manifest.json")
    fpath = os.path.join(stack_dir, "frames.nls")
    for path in (mpath, fpath):
        if not os.path.isfile(path):
            raise FileNotFoundError(f"missing stack file: {path}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    cfg = OpticalConfig(**manifest["config"])

    data = binio.read_verified(fpath)
    fields, off = binio.unpack_header(data, STACK_MAGIC, STACK_VERSION, "<IfQ")
    crop_px, _, n_frames = fields
    dt = _frame_dtype(crop_px)
    binio.require_length(data, off + n_frames * dt.itemsize + 4)
    rec = np.frombuffer(data, dtype=dt, count=n_frames, offset=off)

    by_id = {}
    for r in rec:
        by_id.setdefault(int(r["particle_id"]), []).append(
            Frame(pixels=np.array(r["pixels"]), z_stage=float(r["z_stage"]), z_actual=float(r["z_actual"]))
        )
    stacks = []
    for pm in manifest["particles"]:
        p = ParticleTruth(pm["id"], pm["x"], pm["y"], pm["z_true"])
        stacks.append(ZStack(particle=p, frames=by_id.get(p.id, []), usable=pm["usable"]))
    return stacks, cfg, manifest
