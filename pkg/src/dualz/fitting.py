"""Damped least-squares Gaussian fits."""
import numpy as np
from scipy.optimize import least_squares

from .errors import FitDiverged


def gaussian(x, amplitude, center, sigma, offset=0.0):
    return amplitude * np.exp(-0.5 * ((x - center) / sigma) ** 2) + offset


def _jac(p, x, with_offset):
    a, c, s = p[:3]
    t = (x - c) / s
    e = np.exp(-0.5 * t * t)
    cols = [e, a * e * t / s, a * e * t * t / s]
    if with_offset:
        cols.append(np.ones_like(x))
    return np.column_stack(cols)


def fit_gaussian(x, y, p0=None, offset=True, max_iter=200, xtol=1e-9):
    """Levenberg-Marquardt fit of ``a exp(-(x-c)^2 / 2 s^2) [+ b]``.

    Returns a dict with amplitude, center, sigma (positive), offset, the
    residual RMS and the iteration count.  Raises FitDiverged when the
    solver does not converge within ``max_iter`` evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p0 is None:
        base = float(np.min(y)) if offset else 0.0
        w = np.clip(y - base, 0, None)
        if w.sum() <= 0:
            raise FitDiverged("no positive signal to fit")
        c0 = float(np.sum(w * x) / w.sum())
        s0 = float(np.sqrt(np.sum(w * (x - c0) ** 2) / w.sum())) or float(np.ptp(x) / 4 or 1.0)
        p0 = [float(w.max()), c0, s0] + ([base] if offset else [])
    p0 = np.asarray(p0, dtype=np.float64)

    def resid(p):
        return gaussian(x, *p) - y if offset else gaussian(x, p[0], p[1], p[2]) - y

    res = least_squares(resid, p0, jac=lambda p: _jac(p, x, offset), method="lm",
                        xtol=xtol, ftol=1e-15, gtol=1e-15, max_nfev=max_iter)
    p = res.x
    if res.status <= 0 or not np.all(np.isfinite(p)) or p[2] == 0:
        raise FitDiverged(f"Gaussian fit did not converge: {res.message}")
    return {
        "amplitude": float(p[0]),
        "center": float(p[1]),
        "sigma": float(abs(p[2])),
        "offset": float(p[3]) if offset else 0.0,
        "residual_rms": float(np.sqrt(np.mean(res.fun ** 2))),
        "nfev": int(res.nfev),
    }
