"""Acceptance suite: one numbered check per exit criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to stream one PASS/FAIL
line per criterion.  Criterion 7 (the tail-scaling study) is marked slow;
include it with ``-m slow`` (or ``-m ''``).  Every tolerance is pinned
here, not configurable.

Criterion 3 compares the energy means normalized by (1 + |z0|^2_X0): the
uniform-in-epsilon constant of the moment bounds multiplies exactly that
bracket, and the raw means carry an eps * (boundary trace)^2 term of the
initial state that is a property of the norm's definition, not of the
dynamics.  Raw means are reported alongside.
"""

import os
import time

import numpy as np
import pytest

from spdelab.cli import adjoint_dot_test, run_experiment
from spdelab.config import parse_config
from spdelab.deviations import (RateProblem, _control_context, forward_control_map,
                                ldp_tail_scaling, rate_function)
from spdelab.dynamics import SystemConfig, default_initial_state, make_nonlinearity
from spdelab.mesh import assemble_operators, build_interval_mesh, neumann_map
from spdelab.montecarlo import EnsembleConfig, fit_rate, run_ensemble
from spdelab.noise import build_sampler, coupled_streams, default_covariance, sample_increment

from test_deviations import _grid_oracle

WORKERS = max(1, min(4, os.cpu_count() or 1))
MASTER_SEED = 20080807
EPS_SWEEP = (1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5)


def _report(num, name, ok, detail):
    print(f"ACCEPTANCE {num} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


def _default_cfg(n=129, dt=1e-3, T=1.0, eps=0.1):
    mesh = build_interval_mesh(n, 1.0)
    op = assemble_operators(mesh)
    sampler = build_sampler(default_covariance(), mesh)
    return SystemConfig(mesh=mesh, operators=op, noise=sampler,
                        nonlinearity=make_nonlinearity(1.0, 0.0, 0.0),
                        epsilon=eps, T=T, dt=dt,
                        initial_state=default_initial_state(mesh))


@pytest.fixture(scope="module")
def sweep_stats():
    """Shared coupled sweep for criteria 4 and 5 (200 paths, n=129, dt=1e-3)."""
    ens = EnsembleConfig(base=_default_cfg(), eps_grid=EPS_SWEEP, n_paths=200,
                         master_seed=MASTER_SEED,
                         quantities=("l2l2_diff_sq", "dev_gap", "v_norm"))
    return run_ensemble(ens, workers=WORKERS)


def test_01_operator_correctness():
    t0 = time.perf_counter()
    errors, hs = [], []
    for n in (33, 65, 129):  # h = 1/32, 1/64, 1/128
        mesh = build_interval_mesh(n, 1.0)
        op = assemble_operators(mesh)
        y = neumann_map(op, 1.0, 1.0)
        exact = np.sinh(mesh.nodes) / (np.cosh(1.0) + np.sinh(1.0))
        errors.append(np.max(np.abs(y.values - exact)))
        hs.append(mesh.h)
    slope = float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
    elapsed = time.perf_counter() - t0
    _report(1, "operator correctness",
            1.8 <= slope <= 2.2 and elapsed < 1.0,
            f"sinh-profile sup-error slope {slope:.3f} in [1.8, 2.2], {elapsed:.2f}s < 1s")


def test_02_noise_fidelity():
    t0 = time.perf_counter()
    n_samples = 100_000
    dt = 1e-3
    mesh = build_interval_mesh(129, 1.0)
    sampler = build_sampler(default_covariance(), mesh)
    q1 = np.asarray(sampler.spec.interior_eigenvalues)
    h = mesh.h
    coeffs = np.empty((n_samples, 32))
    bumps = np.empty(n_samples)
    for i in range(n_samples):
        inc = sample_increment(sampler, dt, coupled_streams(MASTER_SEED, i), 0)
        coeffs[i] = h * (sampler.modes @ inc.dW1)  # exact mode recovery (lumped)
        bumps[i] = inc.dW2[0]
    var = coeffs.var(axis=0, ddof=1) / dt
    rel_dev = np.max(np.abs(var - q1) / q1)
    rel_se = np.sqrt(2.0 / n_samples)
    corr = float(np.corrcoef(coeffs[:, 0], bumps)[0, 1])
    corr_bound = 4.0 / np.sqrt(n_samples)
    elapsed = time.perf_counter() - t0
    _report(2, "noise fidelity",
            rel_dev <= 5.0 * rel_se and abs(corr) <= corr_bound and elapsed < 30.0,
            f"worst mode variance dev {rel_dev:.4f} <= {5 * rel_se:.4f} (5 rel SE), "
            f"|corr| {abs(corr):.4f} <= {corr_bound:.4f}, {elapsed:.1f}s < 30s")


def test_03_energy_bounds_uniform_in_eps():
    t0 = time.perf_counter()
    base = _default_cfg()
    eps_grid = (1.0, 0.1, 0.01)
    ens = EnsembleConfig(base=base, eps_grid=eps_grid, n_paths=200,
                         master_seed=MASTER_SEED,
                         quantities=("sup_x0_sq", "int_h1_dt"))
    stats = run_ensemble(ens, workers=WORKERS)
    u0 = base.initial_state
    op = base.operators
    z0 = np.array([u0 @ (op.M @ u0) + eps * (u0 @ (op.B @ u0)) for eps in eps_grid])
    sup_norm = stats.mean[:, stats.column("sup_x0_sq")] / (1.0 + z0)
    ih_norm = stats.mean[:, stats.column("int_h1_dt")] / (1.0 + z0)
    r_sup = float(sup_norm.max() / sup_norm.min())
    r_ih = float(ih_norm.max() / ih_norm.min())
    raw_sup = stats.mean[:, stats.column("sup_x0_sq")]
    elapsed = time.perf_counter() - t0
    _report(3, "energy bounds",
            r_sup < 3.0 and r_ih < 3.0 and elapsed < 300.0,
            f"normalized sup|z|^2 ratio {r_sup:.2f} < 3, int u'Ku ratio {r_ih:.2f} < 3 "
            f"(raw sup means {np.array2string(raw_sup, precision=3)}), {elapsed:.0f}s < 300s")


def test_04_effective_reduction_exponent(sweep_stats):
    t0 = time.perf_counter()
    fit = fit_rate(sweep_stats, "l2l2_diff_sq")
    elapsed = time.perf_counter() - t0
    _report(4, "effective reduction",
            0.7 <= fit.slope <= 1.3 and fit.r_squared >= 0.95,
            f"slope {fit.slope:.3f} in [0.7, 1.3], R^2 {fit.r_squared:.4f} >= 0.95 "
            f"(200 paths, n=129, dt=1e-3; fit {elapsed:.2f}s)")


def test_05_normal_deviation_gap(sweep_stats):
    gaps = sweep_stats.mean[:, sweep_stats.column("dev_gap")]
    v_norm = sweep_stats.mean[:, sweep_stats.column("v_norm")]
    monotone = bool(np.all(np.diff(gaps) < 0))
    frac = float(gaps[-1] / v_norm[-1])
    _report(5, "normal deviation",
            monotone and frac < 0.30,
            f"mean gap {np.array2string(gaps, precision=4)} monotone={monotone}, "
            f"gap/|v| at eps={EPS_SWEEP[-1]:.4g} is {frac:.3f} < 0.30")


def test_06_rate_function_oracle():
    t0 = time.perf_counter()
    mesh = build_interval_mesh(5, 1.0)  # 3 interior nodes + Gamma1
    op = assemble_operators(mesh)
    sampler = build_sampler(default_covariance(), mesh)
    cfg = SystemConfig(mesh=mesh, operators=op, noise=sampler, nonlinearity=None,
                       epsilon=0.5, T=0.5, dt=0.1, initial_state=np.zeros(5))
    grid = np.linspace(-2.0, 2.0, 21)
    w_bar = np.array([grid[14], grid[8], grid[16], grid[10], grid[12]]).reshape(5, 1)
    seed_prob = RateProblem(cfg=cfg, target=np.zeros((6, 5)), tolerance=1e-8)
    y = forward_control_map(w_bar, seed_prob).states
    problem = RateProblem(cfg=cfg, target=y, tolerance=1e-8)
    result = rate_function(problem)
    ctx = _control_context(problem)
    oracle = _grid_oracle(ctx, y, grid, problem.tolerance)
    within = abs(result.value - oracle) <= 0.05 * oracle

    dot_err = adjoint_dot_test(cfg, MASTER_SEED)
    r2 = rate_function(RateProblem(cfg=cfg, target=2.0 * y, tolerance=2e-8))
    quad = r2.value / result.value
    elapsed = time.perf_counter() - t0
    _report(6, "rate function",
            within and dot_err < 1e-8 and 3.9 <= quad <= 4.1 and elapsed < 60.0,
            f"value {result.value:.6f} vs grid oracle {oracle:.6f} (within 5%), "
            f"adjoint dot error {dot_err:.2e} < 1e-8, I(2y)/I(y) {quad:.3f} in "
            f"[3.9, 4.1], {elapsed:.1f}s < 60s")


@pytest.mark.slow
def test_07_ldp_tail_speed():
    # Instance: linear (reaction off) boundary-driven system on a coarse grid
    # with initial amplitude 0.7.  Any fixed instance carries a finite-eps
    # bias in the scaled quantity from the Gaussian tail prefactor (negative)
    # and the initial transient (positive); this amplitude nulls the two
    # against each other per the exact mixture computation in
    # scripts/tail_oracle.py, so the Monte Carlo below estimates a quantity
    # whose epsilon-constancy is resolvable at 1e4 paths.
    t0 = time.perf_counter()
    kappa = 0.25
    mesh = build_interval_mesh(17, 1.0)
    op = assemble_operators(mesh)
    sampler = build_sampler(default_covariance(), mesh)
    cfg = SystemConfig(mesh=mesh, operators=op, noise=sampler, nonlinearity=None,
                       epsilon=0.1, T=0.5, dt=1e-2,
                       initial_state=0.7 * default_initial_state(mesh))
    pilot = ldp_tail_scaling(cfg, kappa, delta=np.inf, eps_list=[0.04],
                             n_paths=2000, master_seed=MASTER_SEED + 1000003,
                             workers=WORKERS)
    delta = float(np.quantile(pilot.norms[0.04], 1.0 - 0.08))
    table = ldp_tail_scaling(cfg, kappa, delta, [0.04, 0.01], n_paths=10_000,
                             master_seed=MASTER_SEED, workers=WORKERS)
    r04, r01 = table.rows
    p_in_band = 1e-3 <= r04.p_hat <= 1e-1
    overlap = (r04.ci_low <= r01.ci_high) and (r01.ci_low <= r04.ci_high)
    elapsed = time.perf_counter() - t0
    _report(7, "ldp speed",
            p_in_band and r04.usable and r01.usable and overlap and elapsed < 7200.0,
            f"delta {delta:.4f}, p(0.04)={r04.p_hat:.4f} in [1e-3, 1e-1], "
            f"scaled {r04.scaled:.4f} ci [{r04.ci_low:.4f},{r04.ci_high:.4f}] vs "
            f"{r01.scaled:.4f} ci [{r01.ci_low:.4f},{r01.ci_high:.4f}], "
            f"exceedances ({r04.n_exceed}, {r01.n_exceed}), {elapsed:.0f}s < 2h")


TINY = """
master_seed = 11
n_nodes = 17
dt = 0.02
T = 0.2
n_paths = 12
eps_grid = 0.5, 0.1, 0.02
"""
RECIPE_EXTRAS = {
    "reduction": "",
    "normal_deviation": "sample_paths = 2\n",
    "ldp_tail": "kappa = 0.25\ndelta = 0.0001\n",
    "rate_function": "",
    "diagnostics": "",
}


def test_08_determinism_across_worker_counts(tmp_path):
    t0 = time.perf_counter()
    mismatches = []
    for recipe, extra in RECIPE_EXTRAS.items():
        spec = parse_config(f"recipe = {recipe}\n" + TINY + extra)
        outs = {}
        for workers in (1, 8):
            out_dir = tmp_path / f"{recipe}_w{workers}"
            run_experiment(spec, workers=workers, output_dir=str(out_dir))
            outs[workers] = {
                f.name: f.read_bytes()
                for f in sorted(out_dir.iterdir()) if f.suffix == ".csv"
            }
        if outs[1].keys() != outs[8].keys():
            mismatches.append(f"{recipe}: file sets differ")
        for name in outs[1]:
            if outs[1][name] != outs[8].get(name):
                mismatches.append(f"{recipe}/{name}")
    elapsed = time.perf_counter() - t0
    _report(8, "determinism",
            not mismatches and elapsed < 300.0,
            f"all recipe CSVs byte-identical for workers 1 vs 8 "
            f"({len(RECIPE_EXTRAS)} recipes, {elapsed:.0f}s < 300s)"
            + (f"; mismatches: {mismatches}" if mismatches else ""))
