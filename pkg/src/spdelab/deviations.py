"""Deviation paths, the optimal-control rate function, and tail scalings.

The rescaled difference between the fast-boundary path and its reduced
limit is measured in the discrete L2(0,T; L2(D)) norm (trapezoid in time,
mass matrix in space).  The rate functional of a target path is the
minimal control energy 0.5 * integral of |w|^2_{H0} over controls whose
deterministic controlled response reproduces the target within a
tolerance; it is evaluated by conjugate gradient on the normal equations,
with the adjoint taken as the exact transpose of the assembled forward
recursion so the dot-product identity holds to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (GridMismatchError, PathRecord, SystemConfig,
                       implicit_solver, _workspace)
from .mesh import DiscreteOperator


class InfeasibleTargetError(RuntimeError):
    """Target path is outside the reachable set at the requested tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    """Composite trapezoid weights on a (possibly non-uniform) time grid."""
    w = np.zeros(len(times))
    dt = np.diff(times)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def path_l2l2_norm(op: DiscreteOperator, times: np.ndarray, states: np.ndarray) -> float:
    """Discrete norm of a path in L2(0,T; L2(D))."""
    w = trapezoid_weights(times)
    vals = np.einsum("ti,ti->t", states, (op.M @ states.T).T)
    return float(np.sqrt(np.sum(w * vals)))


def _check_coupled_grids(*records: PathRecord) -> None:
    ref = records[0]
    for rec in records[1:]:
        if rec.states.shape != ref.states.shape or len(rec.times) != len(ref.times):
            raise GridMismatchError("records do not share the same grid shape")
        if not np.allclose(rec.times, ref.times, rtol=0.0, atol=1e-12):
            raise GridMismatchError("records do not share the same time grid")


@dataclass(frozen=True)
class DeviationRecord:
    """Rescaled difference path eps^-kappa (u_eps - u) and its norm."""

    kappa: float
    eps: float
    path: PathRecord
    norm_l2l2: float


def deviation_path(u_eps: PathRecord, u: PathRecord, eps: float, kappa: float,
                   op: DiscreteOperator) -> DeviationRecord:
    """Pointwise eps^-kappa (u_eps - u) on coupled records sharing one grid.

    kappa = 1/2 is the normal-deviation scaling; smaller kappa gives the
    weaker rescalings whose tails the speed-scaled study measures.
    """
    if not (0.0 < kappa <= 0.5):
        raise ValueError(f"kappa must lie in (0, 1/2], got {kappa}")
    _check_coupled_grids(u_eps, u)
    scale = eps ** (-kappa)
    states = scale * (u_eps.states - u.states)
    traces = scale * (u_eps.traces - u.traces)
    vals = np.einsum("ti,ti->t", states, (op.M @ states.T).T)
    rec = PathRecord(which="deviation", eps=eps, times=u_eps.times.copy(),
                     states=states, traces=traces,
                     x0_sq=vals, h1_sq=np.einsum("ti,ti->t", states, (op.K @ states.T).T),
                     status="ok" if (u_eps.ok and u.ok) else "failed")
    return DeviationRecord(kappa=kappa, eps=eps, path=rec,
                           norm_l2l2=path_l2l2_norm(op, u_eps.times, states))


def normal_deviation_gap(u_eps: PathRecord, u: PathRecord, v_limit: PathRecord,
                         eps: float, op: DiscreteOperator) -> float:
    """L2(0,T;L2) distance between eps^-1/2 (u_eps - u) and the limit path."""
    _check_coupled_grids(u_eps, u, v_limit)
    diff = (u_eps.states - u.states) / np.sqrt(eps) - v_limit.states
    return path_l2l2_norm(op, u_eps.times, diff)


@dataclass
class RateProblem:
    """Target path, control weighting and frozen-coefficient source.

    The boundary covariance weight defines the control norm
    |w|^2_{H0} = w^T B_Gamma w / q2; ``effective_path`` supplies the
    frozen reaction coefficient (None means a zero coefficient).
    """

    cfg: SystemConfig
    target: np.ndarray
    effective_path: PathRecord | None = None
    tolerance: float = 1e-6
    q2: float | None = None
    max_iterations: int = 400
    M_bound: float | None = None

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        q2 = self.q2 if self.q2 is not None else self.cfg.noise.q2_scalar
        if q2 <= 0:
            raise ValueError("boundary covariance weight q2 must be positive")
        self.q2 = float(q2)
        want = (self.cfg.n_steps + 1, self.cfg.mesh.n_nodes)
        if self.target.shape != want:
            raise GridMismatchError(
                f"target shape {self.target.shape} does not match the grid {want}")


@dataclass
class RateResult:
    """Optimal value, recovered control and optimizer diagnostics."""

    value: float
    w_star: np.ndarray
    residual: float
    iterations: int
    converged: bool
    inside_ball: bool | None = None


class _ControlContext:
    """Raw forward/adjoint maps of the controlled recursion on free dofs.

    Forward:  rho_{k+1} = L^-1 (C_k rho_k + dt sigma2 Bg w_k), rho_0 = 0,
    with L = M + dt (K+R), C_k = M + dt M_{f'(u_k)} on free dofs.  The
    adjoint is the literal transpose of this recursion, so the Frobenius
    dot-product identity holds to machine precision by construction.
    """

    def __init__(self, problem: RateProblem):
        cfg = problem.cfg
        ws = _workspace(cfg)
        self.cfg = cfg
        self.q2 = problem.q2
        self.free = ws["free"]
        self.n_steps = cfg.n_steps
        self.lu = implicit_solver(cfg, 0.0)
        self.M_free = ws["M_free"]
        g1 = cfg.mesh.gamma1_dofs
        self.m = len(g1)
        self.Bg = ws["B"].tocsr()[self.free][:, g1].toarray()
        self.B_gamma = ws["B"].tocsr()[g1][:, g1].toarray()
        self.B_gamma_inv = np.linalg.inv(self.B_gamma)
        self.sigma2 = cfg.noise.spec.sigma2
        self.dt = cfg.dt
        self.omega = trapezoid_weights(cfg.times())
        if problem.effective_path is not None:
            u_states = problem.effective_path.states
            if u_states.shape[0] < self.n_steps:
                raise GridMismatchError("effective path shorter than the control grid")
            self._coeffs = self._frozen_matrices(u_states)
        else:
            self._coeffs = None

    def _frozen_matrices(self, u_states: np.ndarray):
        from .mesh import weighted_mass_matrix

        if self.cfg.nonlinearity is None:
            return None
        mats = []
        for k in range(self.n_steps):
            w = self.cfg.nonlinearity.fprime(u_states[k])
            Mw = weighted_mass_matrix(self.cfg.mesh, w).tocsr()
            mats.append(Mw[self.free][:, self.free])
        return mats

    def _apply_C(self, k: int, v: np.ndarray) -> np.ndarray:
        out = self.M_free @ v
        if self._coeffs is not None:
            out = out + self.dt * (self._coeffs[k] @ v)
        return out

    def forward(self, w: np.ndarray) -> np.ndarray:
        """Map controls (n_steps, m) to the state path (n_steps+1, n_free)."""
        rho = np.zeros((self.n_steps + 1, len(self.free)))
        scale = self.dt * self.sigma2
        for k in range(self.n_steps):
            rhs = self._apply_C(k, rho[k]) + scale * (self.Bg @ w[k])
            rho[k + 1] = self.lu.solve(rhs)
        return rho

    def adjoint_plain(self, y: np.ndarray) -> np.ndarray:
        """Frobenius transpose of ``forward``: paths to control-shaped arrays."""
        out = np.zeros((self.n_steps, self.m))
        scale = self.dt * self.sigma2
        mu = np.zeros(len(self.free))
        for k in range(self.n_steps - 1, -1, -1):
            mu = mu + y[k + 1]
            s = self.lu.solve(mu)
            out[k] = scale * (self.Bg.T @ s)
            mu = self._apply_C(k, s)
        return out

    # weighted spaces ------------------------------------------------
    def y_weight(self, p: np.ndarray) -> np.ndarray:
        return self.omega[:, None] * (self.M_free @ p.T).T

    def y_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(a * self.y_weight(b)))

    def c_inv(self, v: np.ndarray) -> np.ndarray:
        return (self.q2 / self.dt) * (v @ self.B_gamma_inv.T)

    def control_cost(self, w: np.ndarray) -> float:
        """0.5 * sum_k dt w_k^T B_Gamma w_k / q2."""
        return 0.5 * self.dt / self.q2 * float(np.sum(w * (w @ self.B_gamma.T)))

    def weighted_adjoint(self, y: np.ndarray) -> np.ndarray:
        """Adjoint between L2(0,T;L2) targets and H0-weighted controls."""
        return self.c_inv(self.adjoint_plain(self.y_weight(y)))


def forward_control_map(w: np.ndarray, problem: RateProblem) -> PathRecord:
    """Integrate the controlled system from zero over the run's time grid."""
    cfg = problem.cfg
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.shape == (1, cfg.n_steps):  # accept a flat control in 1D
        w = w.T
    if w.shape != (cfg.n_steps, len(cfg.mesh.gamma1_dofs)):
        raise GridMismatchError(
            f"control shape {w.shape} does not match (n_steps, n_gamma1)")
    ctx = _control_context(problem)
    rho_free = ctx.forward(w)
    states = np.zeros((cfg.n_steps + 1, cfg.mesh.n_nodes))
    states[:, ctx.free] = rho_free
    g1 = cfg.mesh.gamma1_dofs
    op = cfg.operators
    return PathRecord(
        which="controlled", eps=cfg.epsilon, times=cfg.times(), states=states,
        traces=states[:, g1],
        x0_sq=np.einsum("ti,ti->t", states, (op.M @ states.T).T),
        h1_sq=np.einsum("ti,ti->t", states, (op.K @ states.T).T))


def _control_context(problem: RateProblem) -> _ControlContext:
    ctx = getattr(problem, "_ctx", None)
    if ctx is None:
        ctx = _ControlContext(problem)
        problem._ctx = ctx
    return ctx


def rate_function(problem: RateProblem) -> RateResult:
    """Minimal control energy reproducing the target within the tolerance.

    Conjugate gradient runs on the normal-equation operator
    G C^-1 G^T W_Y in the path space; the recovered control is
    w* = C^-1 G^T W_Y mu.  A target outside the reachable set makes the
    residual stall above the tolerance, which is reported as an
    infeasible-target error rather than a silent zero.
    """
    ctx = _control_context(problem)
    y = problem.target[:, ctx.free]

    def K_op(mu):
        return ctx.forward(ctx.c_inv(ctx.adjoint_plain(ctx.y_weight(mu))))

    y_norm = np.sqrt(max(ctx.y_inner(y, y), 0.0))
    if y_norm == 0.0:
        w0 = np.zeros((ctx.n_steps, ctx.m))
        return RateResult(value=0.0, w_star=w0, residual=0.0, iterations=0,
                          converged=True,
                          inside_ball=None if problem.M_bound is None else True)

    mu = np.zeros_like(y)
    r = y.copy()
    p = r.copy()
    rs = ctx.y_inner(r, r)
    best_mu = mu.copy()
    best_res = np.sqrt(rs)
    stall = 0
    iterations = 0
    for iterations in range(1, problem.max_iterations + 1):
        Kp = K_op(p)
        denom = ctx.y_inner(p, Kp)
        if denom <= 1e-300:
            break
        alpha = rs / denom
        mu = mu + alpha * p
        r = r - alpha * Kp
        rs_new = ctx.y_inner(r, r)
        res = np.sqrt(max(rs_new, 0.0))
        if res < best_res:
            best_res = res
            best_mu = mu.copy()
            stall = 0
        else:
            stall += 1
        if best_res <= problem.tolerance or stall >= 30:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new

    w_star = ctx.c_inv(ctx.adjoint_plain(ctx.y_weight(best_mu)))
    value = ctx.control_cost(w_star)
    if best_res > problem.tolerance:
        raise InfeasibleTargetError(
            f"conjugate gradient stalled at residual {best_res:.3e} > "
            f"tolerance {problem.tolerance:.3e}: target appears unreachable",
            residual=best_res, iterations=iterations)
    inside = None if problem.M_bound is None else bool(value <= problem.M_bound)
    return RateResult(value=value, w_star=w_star, residual=best_res,
                      iterations=iterations, converged=True, inside_ball=inside)


@dataclass(frozen=True)
class TailRow:
    """One epsilon entry of the scaled tail-probability table."""

    eps: float
    kappa: float
    delta: float
    n_paths: int
    n_exceed: int
    p_hat: float
    scaled: float
    ci_low: float
    ci_high: float
    usable: bool


@dataclass
class TailTable:
    """Scaled log-probability table with per-epsilon norm samples."""

    rows: list[TailRow]
    norms: dict[float, np.ndarray] = field(default_factory=dict)


def tail_row(eps: float, kappa: float, delta: float, norms: np.ndarray,
             level: float = 0.95) -> TailRow:
    """Exceedance estimate and scaled quantity for one epsilon."""
    from .montecarlo import wilson_interval

    n = len(norms)
    n_exceed = int(np.sum(norms >= delta))
    p_hat = n_exceed / n if n else 0.0
    speed = eps ** (1.0 - 2.0 * kappa)
    lo, hi = wilson_interval(n_exceed, n, level)
    if n_exceed == 0:
        return TailRow(eps=eps, kappa=kappa, delta=delta, n_paths=n,
                       n_exceed=0, p_hat=0.0, scaled=float("nan"),
                       ci_low=float("nan"), ci_high=float("nan"), usable=False)
    scaled = -speed * np.log(p_hat)
    ci_low = -speed * np.log(hi)
    ci_high = -speed * np.log(lo) if lo > 0 else float("inf")
    return TailRow(eps=eps, kappa=kappa, delta=delta, n_paths=n,
                   n_exceed=n_exceed, p_hat=p_hat, scaled=float(scaled),
                   ci_low=float(ci_low), ci_high=float(ci_high),
                   usable=bool(n_exceed >= 10))


def ldp_tail_scaling(cfg: SystemConfig, kappa: float, delta: float,
                     eps_list, n_paths: int, master_seed: int,
                     workers: int = 1, level: float = 0.95) -> TailTable:
    """Monte Carlo exceedance probabilities with the speed-scaled logarithm.

    For each epsilon the probability that the kappa-rescaled difference
    path exceeds delta is estimated over coupled ensembles, and
    -eps^(1-2 kappa) log p_hat is reported with a Wilson interval mapped
    through the logarithm.  Entries with fewer than 10 exceedances are
    flagged unusable instead of being reported as infinite.
    """
    from .montecarlo import EnsembleConfig, run_ensemble

    if not (0.0 < kappa < 0.5):
        raise ValueError(f"kappa must lie in (0, 1/2), got {kappa}")
    if delta < 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    ens = EnsembleConfig(base=cfg, eps_grid=tuple(eps_list), n_paths=n_paths,
                         master_seed=master_seed, quantities=("vkappa_norm",),
                         kappa=kappa)
    stats = run_ensemble(ens, workers=workers)
    qi = stats.quantities.index("vkappa_norm")
    rows = []
    norms_by_eps = {}
    for ei, eps in enumerate(stats.eps_grid):
        ok = stats.status[ei] == 1
        norms = stats.per_path[ei, ok, qi]
        norms_by_eps[float(eps)] = norms
        rows.append(tail_row(float(eps), kappa, delta, norms, level))
    return TailTable(rows=rows, norms=norms_by_eps)
