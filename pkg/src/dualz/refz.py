"""Reference axial coordinates from brightness-weighted z-stack centroids."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import FewerThanThreeFrames, TooFewParticles, ZeroWeightSum
from .fitting import fit_gaussian
from .photometry import aperture_brightness


@dataclass(frozen=True)
class NoiseConstants:
    sigma_z_im: float = 35.0  # stage encoder accuracy, nm
    sigma_B_im: float = 0.73  # sensor RMS brightness noise


@dataclass
class BrightnessSeries:
    particle_id: int
    z: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.z.shape != self.b.shape or self.z.ndim != 1:
            raise ValueError("z and b must be 1-D arrays of equal length")

    def __len__(self):
        return len(self.z)


@dataclass(frozen=True)
class ReferenceZ:
    particle_id: int
    z_bar: float
    sigma_zbar: float
    n_frames: int


def detect_frames(stack, detection_threshold=None):
    """Aperture signal per frame and the boolean detection mask.

    With no explicit threshold each frame uses 3x the standard deviation of
    its own border ring.
    """
    px = stack.pixel_array()
    signal, ring_std = aperture_brightness(px)
    thr = 3.0 * ring_std if detection_threshold is None else np.full(len(signal), float(detection_threshold))
    detected = (signal > thr) & (signal > 0)
    return signal, detected


def _longest_run(mask, signal):
    best, best_key = None, None
    i, n = 0, len(mask)
    while i < n:
        if not mask[i]:
            i += 1
            continue
        j = i
        while j < n and mask[j]:
            j += 1
        key = (j - i, float(signal[i:j].max()))
        if best_key is None or key > best_key:
            best, best_key = (i, j), key
        i = j
    return best


def measure_brightness(stack, detection_threshold=None) -> BrightnessSeries:
    signal, detected = detect_frames(stack, detection_threshold)
    run = _longest_run(detected, signal)
    if run is None or run[1] - run[0] < 3:
        n = 0 if run is None else run[1] - run[0]
        raise FewerThanThreeFrames(f"particle {stack.particle.id}: detected run of {n} frame(s)")
    i, j = run
    return BrightnessSeries(stack.particle.id, stack.z_stages[i:j], signal[i:j])


def weighted_z(series: BrightnessSeries) -> float:
    s = series.b.sum()
    if not s > 0:
        raise ZeroWeightSum(f"particle {series.particle_id}: brightness sum {s}")
    return float(np.dot(series.b, series.z) / s)


def weighted_z_sigma(series: BrightnessSeries, k: NoiseConstants = NoiseConstants(), z_bar=None) -> float:
    b, z = series.b, series.z
    s = b.sum()
    if not s > 0:
        raise ZeroWeightSum(f"particle {series.particle_id}: brightness sum {s}")
    if z_bar is None:
        z_bar = weighted_z(series)
    s2 = s * s
    var = np.dot(b, b) / s2 * k.sigma_z_im ** 2 + np.sum((z - z_bar) ** 2) / s2 * k.sigma_B_im ** 2
    return float(np.sqrt(var))


def reference_z(series: BrightnessSeries, k: NoiseConstants = NoiseConstants()) -> ReferenceZ:
    zb = weighted_z(series)
    return ReferenceZ(series.particle_id, zb, weighted_z_sigma(series, k, zb), len(series))


def reference_table(stacks, k: NoiseConstants = NoiseConstants(), detection_threshold=None):
    """Reference coordinates for every measurable usable stack, keyed by id."""
    refs, series = {}, {}
    for st in stacks:
        if not st.usable:
            continue
        try:
            s = measure_brightness(st, detection_threshold)
        except FewerThanThreeFrames:
            continue
        series[st.particle.id] = s
        refs[st.particle.id] = reference_z(s, k)
    return refs, series


@dataclass
class ProfileFit:
    dz: np.ndarray
    mean_brightness: np.ndarray
    counts: np.ndarray
    params: dict

    @property
    def sigma_single(self):
        return self.params["sigma"]


def mean_profile(series_list, grid_step=25.0, half_width=1000.0, min_fraction=0.1):
    """Average series aligned on their weighted centroids (linear interpolation)."""
    grid = np.arange(-half_width, half_width + 0.5 * grid_step, grid_step)
    acc = np.zeros_like(grid)
    cnt = np.zeros_like(grid)
    for s in series_list:
        dz = s.z - weighted_z(s)
        inside = (grid >= dz[0]) & (grid <= dz[-1])
        acc[inside] += np.interp(grid[inside], dz, s.b)
        cnt[inside] += 1
    keep = cnt >= max(1, min_fraction * len(series_list))
    return grid[keep], acc[keep] / cnt[keep], cnt[keep]


def fit_profile_baseline(stacks, detection_threshold=None, **grid_kw) -> ProfileFit:
    """Gaussian width of the mean brightness profile (single-plane accuracy)."""
    _, series = reference_table(stacks, detection_threshold=detection_threshold)
    if len(series) < 10:
        raise TooFewParticles(f"need >= 10 usable stacks, have {len(series)}")
    dz, mb, cnt = mean_profile(list(series.values()), **grid_kw)
    return ProfileFit(dz, mb, cnt, fit_gaussian(dz, mb, offset=True))


def write_reference_csv(path, refs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle_id", "z_bar_nm", "sigma_zbar_nm", "n_frames"])
        for r in sorted(refs.values(), key=lambda r: r.particle_id):
            w.writerow([r.particle_id, repr(r.z_bar), repr(r.sigma_zbar), r.n_frames])


def read_reference_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        int(r["particle_id"]): ReferenceZ(int(r["particle_id"]), float(r["z_bar_nm"]),
                                          float(r["sigma_zbar_nm"]), int(r["n_frames"]))
        for r in rows
    }


def write_profile(csv_path, json_path, fit: ProfileFit):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dz_nm", "mean_brightness"])
        for a, b in zip(fit.dz, fit.mean_brightness):
            w.writerow([repr(float(a)), repr(float(b))])
    with open(json_path, "w") as fh:
        json.dump(fit.params, fh, indent=1, sort_keys=True)
