"""Residual statistics, proportionality profiles and offset sweeps."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptySplit, FitDiverged, TooFewSamples
from .fitting import fit_gaussian


@dataclass
class Residuals:
    dz_test: np.ndarray
    dz_pred: np.ndarray

    @property
    def residual(self):
        return self.dz_pred - self.dz_test

    def __len__(self):
        return len(self.dz_test)


@dataclass
class Accuracy:
    sigma: float
    stderr: float
    bias: float
    method: str
    n: int
    n_outliers: int = 0
    fit_fallback: bool = False


@dataclass
class EvalReport:
    delta: float
    n_pairs: int
    n_test: int
    sigma_loc: float
    stderr: float
    bias: float
    sigma_robust: float
    n_outliers: int
    fit_fallback: bool
    sigma_single_baseline: float
    improvement_factor: float
    slope: float
    intercept: float
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def predict_dataset(model, ds, split="test", batch_size=64) -> Residuals:
    idx = ds.indices(split)
    if len(idx) == 0:
        raise EmptySplit(f"dataset has no {split} samples")
    if hasattr(model, "predict"):
        pred = model.predict(ds.inputs(idx), batch_size=batch_size)
    else:  # plain callable on raw inputs, returning nm
        pred = np.asarray(model(ds.inputs(idx)), dtype=np.float64)
    return Residuals(ds.labels(idx).astype(np.float64), np.asarray(pred, dtype=np.float64))


def robust_sigma(r):
    lo, hi = np.percentile(r, [15.865525393145708, 84.13447460685429])
    return 0.5 * (hi - lo)


def fd_bin_width(r):
    q75, q25 = np.percentile(r, [75, 25])
    return 2.0 * (q75 - q25) / len(r) ** (1.0 / 3.0)


def accuracy(res, method="gaussian_fit", outlier_k=5.0) -> Accuracy:
    """Width, standard error and bias of the residual distribution.

    ``gaussian_fit`` fits a Gaussian to the Freedman-Diaconis histogram of
    the residuals, excluding points beyond ``outlier_k`` robust sigmas from
    the median; ``sample_std`` is half the central 68.27 % spread.  A failed
    fit falls back to ``sample_std`` with ``fit_fallback`` set.
    """
    r = res.residual if isinstance(res, Residuals) else np.asarray(res, dtype=np.float64)
    n = len(r)
    if n < 30:
        raise TooFewSamples(f"need >= 30 residuals, have {n}")
    bias = float(np.mean(r))
    rs = robust_sigma(r)
    stderr_of = lambda s: s / math.sqrt(2 * (n - 1))  # noqa: E731
    if method == "sample_std":
        return Accuracy(float(rs), stderr_of(rs), bias, method, n)
    if method != "gaussian_fit":
        raise ValueError(f"unknown method {method!r}")

    med = np.median(r)
    keep = np.abs(r - med) <= outlier_k * rs if rs > 0 else np.ones(n, bool)
    n_out = int(n - keep.sum())
    rk = r[keep]
    try:
        width = fd_bin_width(rk)
        if not width > 0:
            raise FitDiverged("degenerate residual spread")
        nbins = max(5, int(math.ceil(np.ptp(rk) / width)))
        counts, edges = np.histogram(rk, bins=nbins)
        centers = 0.5 * (edges[1:] + edges[:-1])
        p0 = [float(counts.max()), float(np.median(rk)), float(rs) or width]
        fit = fit_gaussian(centers, counts, p0=p0, offset=False)
    except FitDiverged:
        warnings.warn("Gaussian fit of residual histogram failed; using robust width")
        return Accuracy(float(rs), stderr_of(rs), bias, "sample_std", n, n_out, True)
    s = fit["sigma"]
    return Accuracy(s, stderr_of(s), bias, method, n, n_out)


@dataclass
class Proportionality:
    bin_center: np.ndarray
    mean_pred: np.ndarray
    count: np.ndarray
    slope: float
    intercept: float


def proportionality_table(res: Residuals, n_bins=50) -> Proportionality:
    if len(res) < 100:
        raise TooFewSamples(f"need >= 100 residuals, have {len(res)}")
    x, y = res.dz_test, res.dz_pred
    edges = np.linspace(x.min(), x.max(), n_bins + 1)
    which = np.clip(np.digitize(x, edges) - 1, 0, n_bins - 1)
    count = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=y, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, sums / np.maximum(count, 1), np.nan)
    slope, intercept = np.polyfit(x, y, 1)
    return Proportionality(0.5 * (edges[1:] + edges[:-1]), mean, count, float(slope), float(intercept))


def residual_autocorrelation(res: Residuals, bin_width=25.0):
    """Autocorrelation of binned mean residuals versus dz_test lag (nm)."""
    x, r = res.dz_test, res.residual
    lo = np.floor(x.min() / bin_width) * bin_width
    which = ((x - lo) // bin_width).astype(int)
    nb = which.max() + 1
    cnt = np.bincount(which, minlength=nb)
    mean = np.bincount(which, weights=r, minlength=nb) / np.maximum(cnt, 1)
    ok = cnt > 0
    v = np.where(ok, mean - mean[ok].mean(), 0.0)
    lags = np.arange(nb // 2)
    ac = np.array([np.sum(v[: nb - k] * v[k:]) / max(np.sum(ok[: nb - k] & ok[k:]), 1) for k in lags])
    ac = ac / ac[0] if ac[0] > 0 else ac
    return lags * bin_width, ac


def make_report(model, ds, sigma_single, config=None) -> tuple:
    """Evaluate ``model`` on the test split; returns ``(report, residuals, proportionality)``."""
    res = predict_dataset(model, ds, "test")
    acc = accuracy(res, "gaussian_fit")
    rob = accuracy(res, "sample_std")
    prop = proportionality_table(res) if len(res) >= 100 else None
    rep = EvalReport(
        delta=float(ds.delta),
        n_pairs=len(ds),
        n_test=len(res),
        sigma_loc=acc.sigma,
        stderr=acc.stderr,
        bias=acc.bias,
        sigma_robust=rob.sigma,
        n_outliers=acc.n_outliers,
        fit_fallback=acc.fit_fallback,
        sigma_single_baseline=float(sigma_single),
        improvement_factor=float(sigma_single) / acc.sigma if acc.sigma > 0 else float("inf"),
        slope=prop.slope if prop else float("nan"),
        intercept=prop.intercept if prop else float("nan"),
        config_hash=config_hash(config) if config is not None else "",
    )
    return rep, res, prop


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()


def write_residuals(path, res: Residuals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dz_test_nm", "dz_pred_nm", "residual_nm"])
        for a, b, c in zip(res.dz_test, res.dz_pred, res.residual):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


def write_proportionality(path, prop: Proportionality):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center_nm", "mean_pred_nm", "n"])
        for a, b, c in zip(prop.bin_center, prop.mean_pred, prop.count):
            w.writerow([repr(float(a)), repr(float(b)), int(c)])


SWEEP_COLUMNS = ["delta_nm", "n_pairs", "sigma_nm", "stderr_nm", "bias_nm"]


def sweep_rows(reports):
    return [[f"{r.delta:g}", r.n_pairs, f"{r.sigma_loc:.6f}", f"{r.stderr:.6f}", f"{r.bias:.6f}"]
            for r in sorted(reports, key=lambda r: r.delta)]


def write_sweep_summary(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(sweep_rows(reports))


@dataclass
class OffsetSummary:
    delta: float
    sigma: float  # mean over replicates
    stderr: float
    sigmas: list


def combine_replicates(report_sets):
    """Collapse per-seed report lists into one summary per delta.

    The standard error is the larger of the between-seed scatter of the mean
    and the propagated per-run standard errors.
    """
    by_delta = {}
    for reps in report_sets:
        for r in reps:
            by_delta.setdefault(r.delta, []).append(r)
    out = []
    for d in sorted(by_delta):
        rs = by_delta[d]
        s = np.array([r.sigma_loc for r in rs])
        prop = math.sqrt(sum(r.stderr ** 2 for r in rs)) / len(rs)
        scatter = s.std(ddof=1) / math.sqrt(len(s)) if len(s) > 1 else 0.0
        out.append(OffsetSummary(d, float(s.mean()), max(prop, scatter), s.tolist()))
    return out


def optimum_status(summaries, best=500.0):
    """'optimum at <best> nm' if no other offset beats it beyond the combined
    standard error, else 'optimum not resolved'."""
    by = {s.delta: s for s in summaries}
    ref = by[best]
    for d, s in by.items():
        if d == best:
            continue
        if ref.sigma - s.sigma > math.hypot(ref.stderr, s.stderr):
            return "optimum not resolved"
    return f"optimum at {best:g} nm"


def run_cycle(stacks, refs, delta, train_cfg, sigma_single, split_seed=0, train_fraction=0.8,
              pixel_size=33.6, config=None):
    """One build -> train -> evaluate cycle; returns ``(report, model, dataset, logs)``."""
    from .cnn.train import train
    from .pairs import build_dataset

    ds, _ = build_dataset(stacks, refs, delta, train_fraction, split_seed, pixel_size)
    model, logs = train(ds, train_cfg)
    rep, _, _ = make_report(model, ds, sigma_single, config)
    return rep, model, ds, logs


def _cycle_job(args):
    return run_cycle(*args)[0]


def offset_sweep(stacks, refs, deltas, train_cfg, sigma_single, split_seed=0, train_fraction=0.8,
                 pixel_size=33.6, jobs=1):
    """Paired sweep: every delta shares the same stacks, split seed and training seed."""
    jobs_args = [(stacks, refs, float(d), train_cfg, sigma_single, split_seed, train_fraction, pixel_size)
                 for d in sorted(deltas)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_cycle_job, jobs_args))
    else:
        reports = [_cycle_job(a) for a in jobs_args]
    return sorted(reports, key=lambda r: r.delta)
