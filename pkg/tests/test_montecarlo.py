"""Ensemble determinism, failure accounting, regression and intervals."""

import numpy as np
import pytest

from spdelab.dynamics import simulate_path
from spdelab.montecarlo import (DegradedEnsembleError, EnsembleConfig, EnsembleStats,
                                InsufficientDataError, UndefinedVarianceError,
                                confidence_interval, fit_rate, run_ensemble,
                                wilson_interval)
from spdelab.noise import coupled_streams

from test_dynamics import make_cfg


def small_ensemble(n_paths=3, eps_grid=(0.5, 0.1), quantities=("l2l2_diff_sq",),
                   seed=77, **cfg_kw):
    base = make_cfg(n=17, dt=0.02, T=0.2, **cfg_kw)
    return EnsembleConfig(base=base, eps_grid=eps_grid, n_paths=n_paths,
                          master_seed=seed, quantities=quantities)


def test_rerun_reproduces_stats_exactly():
    ens = small_ensemble()
    a = run_ensemble(ens)
    b = run_ensemble(ens)
    assert a.digest() == b.digest()


def test_worker_count_does_not_change_results():
    ens = small_ensemble(n_paths=4)
    serial = run_ensemble(ens, workers=1)
    parallel = run_ensemble(ens, workers=8)
    assert serial.digest() == parallel.digest()


def test_zero_noise_ensemble_has_zero_variance():
    ens = small_ensemble(n_paths=3, sigma1=0.0, sigma2=0.0)
    stats = run_ensemble(ens)
    # deterministic paths: every path reproduces the same value bit for bit;
    # the sample variance is zero up to the rounding of the sample mean
    for ei in range(2):
        assert np.array_equal(stats.per_path[ei, 0], stats.per_path[ei, 1])
        assert np.array_equal(stats.per_path[ei, 0], stats.per_path[ei, 2])
    assert np.all(stats.variance <= 1e-30)
    assert np.all(stats.status == 1)


def test_full_and_effective_runs_share_interior_noise():
    cfg = make_cfg(n=17, dt=0.02, T=0.2, eps=0.03)
    stream = coupled_streams(11, 5)
    full = simulate_path(cfg, stream, "full")
    eff = simulate_path(cfg, stream, "effective")
    assert full.noise_hash_dw1 == eff.noise_hash_dw1
    assert full.noise_hash_dw2 == eff.noise_hash_dw2  # same stream, used or not
    other = simulate_path(cfg, coupled_streams(11, 6), "full")
    assert other.noise_hash_dw1 != full.noise_hash_dw1


def test_coupled_runner_matches_individual_runs_bitwise():
    from spdelab.dynamics import simulate_coupled

    cfg = make_cfg(n=17, dt=0.02, T=0.2, eps=0.07)
    stream = coupled_streams(13, 2)
    joint = simulate_coupled(cfg, stream, ("full", "effective", "deviation_limit"))
    for which in ("full", "effective", "deviation_limit"):
        solo = simulate_path(cfg, stream, which)
        assert np.array_equal(joint[which].states, solo.states)
        assert joint[which].noise_hash_dw1 == solo.noise_hash_dw1


def test_noise_streams_are_epsilon_independent():
    stream = coupled_streams(21, 3)
    hashes = set()
    for eps in (0.5, 0.01):
        cfg = make_cfg(n=17, dt=0.02, T=0.2, eps=eps)
        hashes.add(simulate_path(cfg, stream, "full").noise_hash_dw1)
    assert len(hashes) == 1


def test_partial_failures_recorded_but_not_fatal():
    # calibrate the guard from a pilot so that exactly one of four paths
    # crosses the nodal sup threshold at the larger epsilon
    base = make_cfg(n=17, dt=0.02, T=0.2)
    sups = []
    for pi in range(4):
        rec = simulate_path(base.replace(epsilon=0.5), coupled_streams(77, pi), "full")
        sups.append(np.max(np.abs(rec.states)))
    order = np.argsort(sups)
    cut = 0.5 * (sups[order[-1]] + sups[order[-2]])  # between the two largest
    ens = small_ensemble(n_paths=4, quantities=("sup_x0_sq",), blowup=float(cut))
    out = run_ensemble(ens)
    assert out.n_success[0] == 3
    assert np.isnan(out.per_path[0, order[-1], 0])
    assert np.isfinite(out.mean[0, 0])


def test_majority_failures_degrade_the_ensemble():
    ens = small_ensemble(n_paths=4, blowup=1e-6)
    with pytest.raises(DegradedEnsembleError) as err:
        run_ensemble(ens)
    assert err.value.stats is not None
    assert np.all(err.value.stats.status == 0)


def test_unknown_quantity_rejected():
    with pytest.raises(ValueError, match="unknown quantity"):
        small_ensemble(quantities=("nope",))


def test_eps_grid_must_decrease():
    with pytest.raises(ValueError):
        small_ensemble(eps_grid=(0.1, 0.5))
    with pytest.raises(ValueError):
        small_ensemble(eps_grid=(1.5, 0.1))


def _synthetic_stats(eps, values):
    """Stats object with prescribed per-path values, one quantity."""
    values = np.asarray(values)
    ne, npaths = values.shape
    per_path = values[:, :, None]
    status = np.ones((ne, npaths), dtype=np.int8)
    mean = values.mean(axis=1, keepdims=True)
    var = values.var(axis=1, ddof=1, keepdims=True) if npaths > 1 else np.zeros((ne, 1))
    return EnsembleStats(eps_grid=tuple(eps), quantities=("q",), n_paths=npaths,
                         master_seed=0, mean=mean, variance=var,
                         stderr=np.sqrt(var / npaths), skewness=np.zeros((ne, 1)),
                         n_success=np.full(ne, npaths), per_path=per_path,
                         status=status)


def test_fit_rate_exact_linear_law():
    eps = (0.5, 0.1, 0.02, 0.004)
    stats = _synthetic_stats(eps, np.array([[3.0 * e] * 2 for e in eps]))
    fit = fit_rate(stats, "q")
    assert fit.slope == pytest.approx(1.0, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(np.log(3.0), abs=1e-12)


def test_fit_rate_recovers_half_order_from_noisy_means():
    rng = np.random.default_rng(0)
    eps = tuple(np.logspace(-1, -3, 6))
    vals = np.array([[2.0 * e ** 0.5 * (1 + 0.01 * rng.standard_normal())] * 2
                     for e in eps])
    fit = fit_rate(_synthetic_stats(eps, vals), "q")
    assert abs(fit.slope - 0.5) <= 0.05


def test_fit_rate_constant_means_zero_slope():
    eps = (0.5, 0.1, 0.02)
    fit = fit_rate(_synthetic_stats(eps, np.full((3, 2), 7.0)), "q")
    assert abs(fit.slope) <= 1e-12


def test_fit_rate_needs_three_points():
    with pytest.raises(InsufficientDataError):
        fit_rate(_synthetic_stats((0.5, 0.1), np.ones((2, 2))), "q")


def test_confidence_interval_zero_variance_zero_width():
    stats = _synthetic_stats((0.5, 0.1, 0.02), np.full((3, 4), 2.5))
    ci = confidence_interval(stats, "q")
    assert np.allclose(ci[:, 0], 2.5) and np.allclose(ci[:, 1], 2.5)


def test_confidence_interval_single_path_undefined():
    stats = _synthetic_stats((0.5,), np.array([[1.0]]))
    with pytest.raises(UndefinedVarianceError):
        confidence_interval(stats, "q")


def test_normal_interval_coverage_is_nominal():
    rng = np.random.default_rng(42)
    reps, n = 1000, 10_000
    covered = 0
    z = 1.959963984540054
    for _ in range(reps):
        x = rng.standard_normal(n)
        m = x.mean()
        half = z * x.std(ddof=1) / np.sqrt(n)
        covered += (m - half) <= 0.0 <= (m + half)
    assert 0.93 <= covered / reps <= 0.97


def test_wilson_interval_at_zero_successes():
    lo, hi = wilson_interval(0, 50)
    assert lo == 0.0
    assert 0.0 < hi < 0.2


def test_wilson_interval_brackets_proportion():
    lo, hi = wilson_interval(20, 100)
    assert lo < 0.2 < hi
    assert 0.0 <= lo and hi <= 1.0
