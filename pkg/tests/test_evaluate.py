import json
import math

import numpy as np
import pytest

from dualz.errors import EmptySplit, TooFewSamples
from dualz.evaluate import (EvalReport, OffsetSummary, Residuals, accuracy, combine_replicates, optimum_status,
                            predict_dataset, proportionality_table, residual_autocorrelation, write_sweep_summary)
from dualz.pairs import PairDataset


def dataset(n=120, crop=4, seed=0):
    rng = np.random.default_rng(seed)
    return PairDataset(500.0, crop, 33.6, np.arange(n, dtype=np.uint64) // 4,
                       (np.arange(n) % 5 == 0).astype(np.uint8), rng.uniform(-800, 800, n).astype(np.float32),
                       np.zeros(n, np.float32), rng.random((n, crop, crop), dtype=np.float32),
                       rng.random((n, crop, crop), dtype=np.float32))


class Oracle:
    def __init__(self, ds):
        self.ds = ds

    def __call__(self, x):
        # recover labels by matching the bottom image
        lookup = {self.ds.bottom[i].tobytes(): self.ds.dz_label[i] for i in range(len(self.ds))}
        return np.array([lookup[xi[..., 0].tobytes()] for xi in x], dtype=np.float64)


def test_perfect_model_gives_zero_residuals():
    ds = dataset()
    res = predict_dataset(Oracle(ds), ds)
    assert np.all(res.residual == 0)
    assert len(res) == ds.n_test


def test_constant_model_residuals():
    ds = dataset()
    res = predict_dataset(lambda x: np.full(len(x), 42.0), ds)
    np.testing.assert_array_equal(res.residual, 42.0 - ds.labels(ds.indices("test")).astype(np.float64))


def test_empty_split():
    ds = dataset()
    ds.split[:] = 0
    with pytest.raises(EmptySplit):
        predict_dataset(lambda x: np.zeros(len(x)), ds)


def test_zero_residuals_sample_std():
    acc = accuracy(np.zeros(50), "sample_std")
    assert acc.sigma == 0 and acc.bias == 0


@pytest.mark.parametrize("method", ["gaussian_fit", "sample_std"])
def test_unit_normal_width(method):
    r = np.random.default_rng(7).standard_normal(100_000)
    acc = accuracy(r, method)
    assert acc.sigma == pytest.approx(1.0, abs=0.01)
    assert acc.stderr == pytest.approx(acc.sigma / math.sqrt(2 * (len(r) - 1)))


@pytest.mark.parametrize("method", ["gaussian_fit", "sample_std"])
def test_translation_shifts_bias_only(method):
    r = np.random.default_rng(3).standard_normal(5000) * 40
    a, b = accuracy(r, method), accuracy(r + 17.5, method)
    assert b.bias == pytest.approx(a.bias + 17.5, rel=1e-12)
    assert b.sigma == pytest.approx(a.sigma, rel=1e-6)


def test_sample_std_sign_flip_invariant():
    r = np.random.default_rng(4).gamma(2.0, 10.0, 999)
    assert accuracy(-r, "sample_std").sigma == pytest.approx(accuracy(r, "sample_std").sigma, rel=1e-12)


def test_outliers_excluded_from_fit_only():
    rng = np.random.default_rng(5)
    r = np.concatenate([rng.standard_normal(20_000) * 40, [5000.0] * 30])
    acc = accuracy(r, "gaussian_fit")
    assert acc.n_outliers == 30
    assert acc.sigma == pytest.approx(40, rel=0.03)


def test_degenerate_fit_falls_back_with_flag():
    r = np.r_[np.zeros(60), 1.0]
    with pytest.warns(UserWarning):
        acc = accuracy(r, "gaussian_fit")
    assert acc.fit_fallback and acc.method == "sample_std"


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        accuracy(np.zeros(29))
    with pytest.raises(TooFewSamples):
        proportionality_table(Residuals(np.zeros(99), np.zeros(99)))


def test_proportionality_perfect_and_constant():
    x = np.linspace(-900, 900, 500)
    p = proportionality_table(Residuals(x, x.copy()))
    assert p.slope == pytest.approx(1.0, abs=1e-12) and p.intercept == pytest.approx(0.0, abs=1e-9)
    assert len(p.bin_center) == 50 and p.count.sum() == 500
    np.testing.assert_allclose(p.mean_pred[p.count > 0], p.bin_center[p.count > 0], atol=20)
    c = proportionality_table(Residuals(x, np.full_like(x, 3.0)))
    assert c.slope == pytest.approx(0.0, abs=1e-12)


def test_autocorrelation_finds_grid_period():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1000, 1000, 20_000)
    pred = x + 15 * np.sin(2 * np.pi * x / 250.0) + rng.standard_normal(x.size) * 5
    lags, ac = residual_autocorrelation(Residuals(x, pred))
    k = int(np.argmin(np.abs(lags - 250)))
    assert ac[k] > ac[k - 2] and ac[k] > ac[k + 2] and ac[k] > 0.5


def report(delta, sigma, stderr):
    return EvalReport(delta, 100, 20, sigma, stderr, 0.0, sigma, 0, False, 260.0, 260.0 / sigma, 1.0, 0.0)


def test_report_json_round_trip():
    r = report(500.0, 40.123456789, 0.5)
    r.extra = {"note": "x"}
    assert EvalReport.from_json(r.to_json()) == r
    assert json.loads(r.to_json())["improvement_factor"] == pytest.approx(260 / 40.123456789)


def test_paper_ordering_resolves_optimum():
    # Table 1 values with their quoted standard errors
    table = [[report(250.0, 48.4, 0.7), report(500.0, 40.0, 0.5), report(750.0, 44.0, 0.7)]]
    summaries = combine_replicates(table)
    assert [s.delta for s in summaries] == [250.0, 500.0, 750.0]
    assert optimum_status(summaries) == "optimum at 500 nm"


def test_unresolved_optimum_is_flagged():
    s = [OffsetSummary(250.0, 40.0, 0.5, [40.0]), OffsetSummary(500.0, 45.0, 0.5, [45.0]),
         OffsetSummary(750.0, 50.0, 0.5, [50.0])]
    assert optimum_status(s) == "optimum not resolved"
    # a difference inside the combined error is not a resolved reversal
    s[0] = OffsetSummary(250.0, 44.5, 0.5, [44.5])
    assert optimum_status(s) == "optimum at 500 nm"


def test_replicate_errors_combine():
    reps = [[report(500.0, 40.0, 1.0)], [report(500.0, 42.0, 1.0)], [report(500.0, 44.0, 1.0)]]
    (s,) = combine_replicates(reps)
    assert s.sigma == pytest.approx(42.0)
    assert s.stderr == pytest.approx(max(math.sqrt(3) / 3, np.std([40, 42, 44], ddof=1) / math.sqrt(3)))


def test_sweep_summary_layout(tmp_path):
    path = tmp_path / "s.csv"
    write_sweep_summary(path, [report(750.0, 44.0, 0.7), report(250.0, 48.4, 0.7)])
    lines = path.read_text().splitlines()
    assert lines[0] == "delta_nm,n_pairs,sigma_nm,stderr_nm,bias_nm"
    assert lines[1].startswith("250,") and lines[2].startswith("750,")
