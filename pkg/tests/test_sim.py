import csv
import io

import numpy as np
import pytest

from hpfr.kernels import sigma_from_covariates
from hpfr.sim import (TRUE_COV, BenchReport, SchemeConfig, bench_family, generate_scheme, rmse,
                      run_benchmark, score_intervals, split_new_subject, true_mean)


def test_true_mean():
    assert true_mean(0.0) == 0.0
    assert true_mean(2.0) == pytest.approx(0.8 * np.sin(1.0), abs=1e-15)
    assert true_mean(2.0) == pytest.approx(0.673177, abs=1e-6)
    t = np.linspace(-4, 4, 17)
    assert np.array_equal(true_mean(-t), -true_mean(t))


def test_scheme_perturbations_against_scheme_one():
    base = generate_scheme(SchemeConfig("I", 61), 3)
    iv = generate_scheme(SchemeConfig("IV", 61), 3)
    iii = generate_scheme(SchemeConfig("III", 61), 3)
    v = generate_scheme(SchemeConfig("V", 61), 3)
    t = base.t
    inside = (t >= -1) & (t <= 1)
    diff = iv.y - base.y
    assert np.allclose(diff[9][inside], 2.0, rtol=0, atol=1e-14)
    assert np.all(diff[9][~inside] == 0)
    assert np.all(np.delete(diff, 9, axis=0) == 0)
    amp = iii.y - base.y
    assert np.allclose(amp[4], (4.0 - 0.8) * np.sin((0.5 * t) ** 3), atol=1e-14)
    assert np.all(np.delete(amp, 4, axis=0) == 0)
    assert np.allclose(iii.mu[4], 4 * np.sin((0.5 * t) ** 3))
    assert np.allclose(v.y - base.y, amp + diff, atol=1e-14)
    assert np.array_equal(base.tau, v.tau)
    assert SchemeConfig("V").outliers == (4, 9) and SchemeConfig("I").outliers == ()


def test_scheme_two_scales_whole_subjects():
    base = generate_scheme(SchemeConfig("I", 31), 0)
    two = generate_scheme(SchemeConfig("II", 31), 0)
    assert np.allclose(two.tau, base.tau / np.sqrt(two.r)[:, None], atol=1e-14)
    assert np.allclose(two.y - two.mu, (base.y - base.mu) / np.sqrt(two.r)[:, None], atol=1e-13)
    assert len(np.unique(two.r)) == 20


def test_scheme_six_has_a_noisier_test_subject():
    cfg = SchemeConfig("VI", 61)
    assert cfg.M == 21 and cfg.new_subject
    resid = np.array([generate_scheme(cfg, k).y - generate_scheme(cfg, k).mu
                      - generate_scheme(cfg, k).tau for k in range(20)])
    noise_var = resid.var(axis=(0, 2))
    assert noise_var[-1] == pytest.approx(0.05, rel=0.1)
    assert np.mean(noise_var[:-1]) == pytest.approx(0.01, rel=0.1)


def test_scheme_one_covariance_by_monte_carlo():
    cfg = SchemeConfig("I", 4, replications=500)
    samples = np.vstack([(lambda d: d.y - d.mu)(generate_scheme(cfg, k)) for k in range(500)])
    assert samples.shape == (10_000, 4)
    t = np.linspace(-4, 4, 4)
    S = sigma_from_covariates((2.5 * t)[:, None], (0.5 * t)[:, None], TRUE_COV)
    emp = np.cov(samples[:, [1, 2]].T)
    ref = S[np.ix_([1, 2], [1, 2])]
    se = np.sqrt((ref ** 2 + np.outer(np.diag(ref), np.diag(ref))) / len(samples))
    assert np.all(np.abs(emp - ref) < 5 * se)


def test_scoring_examples():
    x = np.linspace(0, 1, 11)
    assert rmse(x, x) == 0
    assert rmse(x + 0.3, x) == pytest.approx(0.3)
    assert score_intervals(x - 1e9, x + 1e9, x)[0] == 100.0
    assert score_intervals(x, x, x) == (100.0, 0.0)
    assert score_intervals(x + 1, x + 2, x)[0] == 0.0


def test_new_subject_split():
    rng = np.random.default_rng(0)
    obs, test = split_new_subject(61, "interp", rng)
    assert len(obs) == 30 and len(test) == 31
    assert not set(obs) & set(test) and len(set(obs) | set(test)) == 61
    obs, test = split_new_subject(61, "extrap", rng)
    t = np.linspace(-4, 4, 61)
    assert np.all(t[test] >= 0) and np.all(t[obs] < 0) and len(test) == 31


def test_config_validation():
    with pytest.raises(ValueError):
        SchemeConfig("VII")
    with pytest.raises(ValueError):
        SchemeConfig("I", families=("Q",))
    with pytest.raises(ValueError):
        SchemeConfig("V", M=5)
    assert bench_family("T").nu_fixed and not bench_family("T1").nu_fixed
    assert bench_family("SL").nu == 1.3


FAST = dict(replications=2, J=4, B=5, n_draws=400, knot_count=6)


def test_observed_mode_report_is_complete_and_deterministic():
    cfg = SchemeConfig("III", 21, families=("N", "T"), **FAST)
    rep = run_benchmark(cfg)
    assert isinstance(rep, BenchReport)
    again = run_benchmark(cfg, workers=2)
    assert rep.to_csv() == again.to_csv() and rep.to_text() == again.to_text()
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == BenchReport.FIELDS
    keys = {(r["family"], r["metric"], r["method"], r["ncl"]) for r in rows}
    for fam in ("N", "T"):
        assert (fam, "mean_rmse", "", "") in keys and (fam, "tau_rmse", "", "") in keys
        for m in ("PL0", "PL1", "BTS"):
            for c in ("80", "90", "95"):
                assert (fam, "cp", m, c) in keys and (fam, "length", m, c) in keys
    for r in rows:
        v = float(r["value"])
        if r["metric"] == "cp":
            assert 0 <= v <= 100
        else:
            assert v >= 0
        assert r["reps"] == "2"
    text = rep.to_text()
    for section in ("RMSE", "Coverage (%)", "Interval length", "non-converged fits"):
        assert section in text
    assert rep.value("T", "cp", "BTS", 0.95) == rep.value("T", "cp", "BTS", "95")
    assert len(rep.per_rep[("N", "mean_rmse", "", "", "obs")]) == 2


def test_new_subject_mode_report():
    cfg = SchemeConfig("VI", 21, families=("N",), **FAST)
    rep = run_benchmark(cfg)
    for mode in ("interp", "extrap"):
        assert rep.value("N", "resp_rmse", mode=mode) > 0
        assert 0 <= rep.value("N", "cp", "BTS", "95", mode) <= 100
    assert "interpolation" in rep.to_text() and "extrapolation" in rep.to_text()
