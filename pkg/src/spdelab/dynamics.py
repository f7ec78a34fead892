"""Time stepping for the four coupled systems built on one P1 weak form.

All steppers share the semi-implicit Euler-Maruyama layout: the stiff
linear part (K + R, with the epsilon-scaled boundary mass where present)
is implicit, the reaction term and the noise are explicit.  The implicit
matrix (M + eps B + dt (K + R)) is positive definite for every eps >= 0
and dt > 0, so a single scheme covers the full system, its eps -> 0
reduction, the linearised deviation limit and the deterministic
controlled system.

Steppers are pure functions of (state, config, increment); factorized
solvers are cached on the config keyed by (kind, eps, dt) and never
mutate results.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from .mesh import DiscreteOperator, FieldState, SpatialMesh, weighted_mass_apply
from .noise import NoiseIncrement, Sampler, StreamConfig, sample_increment

SYSTEMS = ("full", "effective", "deviation_limit")


class PathFailureError(RuntimeError):
    """Blow-up guard: a step left the admissible range or went non-finite."""

    def __init__(self, message: str, step_index: int):
        super().__init__(message)
        self.step_index = step_index


class GridMismatchError(ValueError):
    """Raised when two path records do not share time grid and mesh."""


@dataclass(frozen=True)
class Nonlinearity:
    """Cubic reaction term f(u) = -a u^3 + b u^2 + c with certified bounds.

    a1, b1 witness the sign and growth inequalities on the verification
    grid [-100, 100] (with the quartic leading coefficient checked
    asymptotically); b_tilde bounds the antiderivative F and f' globally.
    """

    a: float
    b: float
    c: float
    a1: float
    b1: float
    b_tilde: float

    def f(self, u: np.ndarray) -> np.ndarray:
        return -self.a * u ** 3 + self.b * u ** 2 + self.c

    def fprime(self, u: np.ndarray) -> np.ndarray:
        return -3.0 * self.a * u ** 2 + 2.0 * self.b * u

    def antiderivative(self, u: np.ndarray) -> np.ndarray:
        return -self.a * u ** 4 / 4.0 + self.b * u ** 3 / 3.0 + self.c * u


_CERT_GRID = np.linspace(-100.0, 100.0, 20001)


def make_nonlinearity(a: float, b: float = 0.0, c: float = 0.0) -> Nonlinearity:
    """Certify the dissipativity constants of the cubic reaction term.

    The pure cubic admits the sharp constants (a1, b1) = (a, 0); any lower
    order terms force a1 = a/2 so that f(u) u + a1 u^4 stays bounded above,
    with b1 the maximal defect of the three inequalities on the grid.
    """
    if a <= 0:
        raise ValueError(
            "assumption violated: f(u) u <= -a1 u^4 + b1 needs a cubic leading "
            f"coefficient a > 0, got a={a}")
    if b == 0.0 and c == 0.0:
        a1, b1 = a, 0.0
    else:
        a1 = a / 2.0
        u = _CERT_GRID
        fu = -a * u ** 3 + b * u ** 2 + c
        d_sign = fu * u + a1 * u ** 4
        d_growth = np.abs(fu) - a1 * np.abs(u) ** 3
        d_slope = (-3 * a * u ** 2 + 2 * b * u) + a1 * u ** 2
        b1 = float(max(0.0, d_sign.max(), d_growth.max(), d_slope.max()))
    # global bounds for F and f' via the critical points of the quartic F
    crit = np.roots([-a, b, 0.0, c])
    crit = np.real(crit[np.isreal(crit)])
    F = lambda u: -a * u ** 4 / 4.0 + b * u ** 3 / 3.0 + c * u
    f_max = float(F(crit).max()) if crit.size else 0.0
    fp_max = float(b ** 2 / (3.0 * a))
    b_tilde = max(f_max, fp_max, 0.0)
    return Nonlinearity(a=a, b=b, c=c, a1=a1, b1=b1, b_tilde=b_tilde)


@dataclass
class SystemConfig:
    """Everything one path needs: discretization, reaction, noise, horizon.

    ``nonlinearity=None`` switches the reaction term off entirely (the
    deterministic linear mode used by the decay and control tests).
    """

    mesh: SpatialMesh
    operators: DiscreteOperator
    noise: Sampler
    nonlinearity: Nonlinearity | None
    epsilon: float
    T: float
    dt: float
    initial_state: np.ndarray
    blowup_threshold: float = 1e6
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon out of (0,1]: {self.epsilon}")
        if not (0.0 < self.dt < self.T):
            raise ValueError(f"need 0 < dt < T, got dt={self.dt}, T={self.T}")
        if self.blowup_threshold <= 0:
            raise ValueError("blowup_threshold must be positive")
        n_steps = int(round(self.T / self.dt))
        if abs(n_steps * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")
        if len(self.initial_state) != self.mesh.n_nodes:
            raise ValueError("initial state length does not match the mesh")

    def __getstate__(self):
        # factorizations are not picklable and rebuild cheaply in workers
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def replace(self, **kw) -> "SystemConfig":
        data = dict(mesh=self.mesh, operators=self.operators, noise=self.noise,
                    nonlinearity=self.nonlinearity, epsilon=self.epsilon, T=self.T,
                    dt=self.dt, initial_state=self.initial_state,
                    blowup_threshold=self.blowup_threshold)
        data.update(kw)
        return SystemConfig(**data)


def default_initial_state(mesh: SpatialMesh) -> np.ndarray:
    """Quarter sine wave: vanishes on Gamma2, unit trace at the 1D Gamma1 end."""
    if mesh.dimension == 1:
        return np.sin(np.pi * mesh.nodes / (2.0 * mesh.length))
    x = mesh.nodes[:, 0]
    y = mesh.nodes[:, 1]
    out = np.sin(np.pi * x / (2.0 * x.max())) * np.sin(np.pi * y / y.max())
    out[mesh.gamma2_dofs] = 0.0
    return out


def _workspace(cfg: SystemConfig) -> dict:
    ws = cfg._cache.get("ws")
    if ws is None:
        op = cfg.operators
        free = op.free_dofs
        ws = {
            "free": free,
            "g1": cfg.mesh.gamma1_dofs,
            "K": op.K, "R": op.R, "M": op.M, "B": op.B,
            "KR_free": (op.restrict(op.K) + op.restrict(op.R)).tocsc(),
            "M_free": op.restrict(op.M).tocsc(),
            "B_free": op.restrict(op.B).tocsc(),
        }
        cfg._cache["ws"] = ws
    return ws


def implicit_solver(cfg: SystemConfig, eps: float):
    """Factorized (M + eps B + dt (K+R)) on free dofs; cached per (eps, dt).

    Positive definiteness holds for every eps >= 0 and dt > 0, which is
    asserted here once per factorization.
    """
    key = ("solver", eps, cfg.dt)
    lu = cfg._cache.get(key)
    if lu is None:
        ws = _workspace(cfg)
        A = (ws["M_free"] + eps * ws["B_free"] + cfg.dt * ws["KR_free"]).tocsc()
        # diagonal pivoting on the symmetric matrix makes the U diagonal the
        # LDL^T pivots, so positivity certifies positive definiteness
        lu = spla.splu(A, diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        if not np.all(lu.U.diagonal() > 0):
            raise ValueError("implicit matrix is not positive definite")
        cfg._cache[key] = lu
    return lu


def _scatter_gamma1(cfg: SystemConfig, values: np.ndarray) -> np.ndarray:
    out = np.zeros(cfg.mesh.n_nodes)
    out[cfg.mesh.gamma1_dofs] = values
    return out


def _guard(values: np.ndarray, cfg: SystemConfig, step_index: int) -> None:
    if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > cfg.blowup_threshold:
        raise PathFailureError(
            f"path left the admissible range at step {step_index}", step_index)


def _reaction(cfg: SystemConfig, u: np.ndarray) -> np.ndarray | None:
    if cfg.nonlinearity is None:
        return None
    return cfg.nonlinearity.f(u)


def _advance(cfg: SystemConfig, eps_mass: float, u: np.ndarray,
             extra_rhs: np.ndarray | None, step_index: int,
             with_reaction: bool = True) -> np.ndarray:
    """One implicit solve shared by every stepper.

    rhs = (M + eps_mass B) u + dt M f(u) + extra_rhs, solved against the
    cached factorization of (M + eps_mass B + dt (K + R)).
    """
    ws = _workspace(cfg)
    rhs = ws["M"] @ u
    if eps_mass != 0.0:
        rhs = rhs + eps_mass * (ws["B"] @ u)
    if with_reaction:
        fu = _reaction(cfg, u)
        if fu is not None:
            rhs = rhs + cfg.dt * (ws["M"] @ fu)
    if extra_rhs is not None:
        rhs = rhs + extra_rhs
    lu = implicit_solver(cfg, eps_mass)
    u_free = lu.solve(rhs[ws["free"]])
    out = np.zeros_like(u)
    out[ws["free"]] = u_free
    _guard(out, cfg, step_index)
    return out


def step_full(state: FieldState, cfg: SystemConfig, inc: NoiseIncrement,
              step_index: int = 0) -> FieldState:
    """Step the fast dynamical-boundary system.

    Solves (M + eps B + dt(K+R)) u+ = (M + eps B) u + dt M f(u)
    + sigma1 M dW1 + sqrt(eps) sigma2 B dW2 and re-pins the Dirichlet dofs.
    """
    ws = _workspace(cfg)
    spec = cfg.noise.spec
    extra = spec.sigma1 * (ws["M"] @ inc.dW1)
    extra += np.sqrt(cfg.epsilon) * spec.sigma2 * (ws["B"] @ _scatter_gamma1(cfg, inc.dW2))
    out = _advance(cfg, cfg.epsilon, state.values, extra, step_index)
    return FieldState(values=out, time=state.time + cfg.dt)


def step_effective(state: FieldState, cfg: SystemConfig, inc: NoiseIncrement,
                   step_index: int = 0) -> FieldState:
    """Step the reduced Robin-boundary system; same dW1 stream, dW2 unused."""
    ws = _workspace(cfg)
    extra = cfg.noise.spec.sigma1 * (ws["M"] @ inc.dW1)
    out = _advance(cfg, 0.0, state.values, extra, step_index)
    return FieldState(values=out, time=state.time + cfg.dt)


def step_deterministic(state: FieldState, cfg: SystemConfig, eps_mass: float,
                       step_index: int = 0) -> FieldState:
    """Noise-free counterpart of step_full / step_effective (bitwise reference)."""
    out = _advance(cfg, eps_mass, state.values, None, step_index)
    return FieldState(values=out, time=state.time + cfg.dt)


def _frozen_coefficient_rhs(cfg: SystemConfig, u_now: np.ndarray, v: np.ndarray) -> np.ndarray:
    if cfg.nonlinearity is None:
        return np.zeros_like(v)
    w = cfg.nonlinearity.fprime(u_now)
    return cfg.dt * weighted_mass_apply(cfg.mesh, w, v)


def step_deviation_limit(state_v: FieldState, u_now: FieldState, cfg: SystemConfig,
                         inc: NoiseIncrement, step_index: int = 0) -> FieldState:
    """Step the linear deviation-limit system with frozen coefficient f'(u).

    Solves (M + dt(K+R)) v+ = M v + dt M_{f'(u)} v + sigma2 B dW2, the
    boundary noise entering through the Gamma1 mass exactly as the lifted
    boundary formulation prescribes in weak form.
    """
    ws = _workspace(cfg)
    v = state_v.values
    extra = _frozen_coefficient_rhs(cfg, u_now.values, v)
    extra += cfg.noise.spec.sigma2 * (ws["B"] @ _scatter_gamma1(cfg, inc.dW2))
    out = _advance(cfg, 0.0, v, extra, step_index, with_reaction=False)
    return FieldState(values=out, time=state_v.time + cfg.dt)


def step_controlled(state_rho: FieldState, u_now: FieldState, w_now: np.ndarray,
                    cfg: SystemConfig, step_index: int = 0) -> FieldState:
    """Deterministic controlled variant: sigma2 dW2 replaced by dt sigma2 w."""
    ws = _workspace(cfg)
    rho = state_rho.values
    extra = _frozen_coefficient_rhs(cfg, u_now.values, rho)
    extra += cfg.dt * cfg.noise.spec.sigma2 * (ws["B"] @ _scatter_gamma1(cfg, w_now))
    out = _advance(cfg, 0.0, rho, extra, step_index, with_reaction=False)
    return FieldState(values=out, time=state_rho.time + cfg.dt)


@dataclass
class PathRecord:
    """Time-indexed discrete path with traces, energies and noise hashes."""

    which: str
    eps: float
    times: np.ndarray
    states: np.ndarray
    traces: np.ndarray
    x0_sq: np.ndarray
    h1_sq: np.ndarray
    status: str = "ok"
    failure_step: int | None = None
    noise_hash_dw1: str = ""
    noise_hash_dw2: str = ""
    dW1: np.ndarray | None = None
    dW2: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def write_csv(self, path: str, thin: int = 1) -> None:
        """Columns: time, node values (thinned stride), trace, |z|^2_X0, u^T K u."""
        n_nodes = self.states.shape[1]
        node_cols = list(range(0, n_nodes, thin))
        with open(path, "w", newline="") as fh:
            header = ["time"] + [f"u_{j}" for j in node_cols] + ["trace", "x0_sq", "h1_sq"]
            fh.write(",".join(header) + "\n")
            for i, t in enumerate(self.times):
                row = [repr(float(t))]
                row += [repr(float(self.states[i, j])) for j in node_cols]
                row.append(repr(float(self.traces[i, 0])))
                row.append(repr(float(self.x0_sq[i])))
                row.append(repr(float(self.h1_sq[i])))
                fh.write(",".join(row) + "\n")


def _energies(cfg: SystemConfig, u: np.ndarray, eps: float) -> tuple[float, float]:
    ws = _workspace(cfg)
    x0 = float(u @ (ws["M"] @ u))
    if eps != 0.0:
        x0 += eps * float(u @ (ws["B"] @ u))
    h1 = float(u @ (ws["K"] @ u))
    return x0, h1


def simulate_path(cfg: SystemConfig, stream: StreamConfig, which: str,
                  record_increments: bool = False,
                  increments: list[NoiseIncrement] | None = None) -> PathRecord:
    """Iterate the chosen stepper over the grid, recording the full path.

    ``which`` is one of "full", "effective", "deviation_limit".  The
    deviation limit advances the reduced system alongside the linear one so
    the frozen coefficient always uses the reduced solution at the step's
    left endpoint.  A blow-up produces a failed record carrying the step
    index instead of raising.
    """
    if which not in SYSTEMS:
        raise ValueError(f"unknown system {which!r}")
    n_steps = cfg.n_steps
    times = cfg.times()
    n = cfg.mesh.n_nodes
    g1 = cfg.mesh.gamma1_dofs

    eps_for_energy = cfg.epsilon if which == "full" else 0.0
    if which == "deviation_limit":
        state = FieldState(values=np.zeros(n), time=0.0)
        companion = FieldState(values=np.asarray(cfg.initial_state, dtype=float).copy(), time=0.0)
    else:
        state = FieldState(values=np.asarray(cfg.initial_state, dtype=float).copy(), time=0.0)
        companion = None

    states = np.empty((n_steps + 1, n))
    traces = np.empty((n_steps + 1, len(g1)))
    x0_sq = np.empty(n_steps + 1)
    h1_sq = np.empty(n_steps + 1)
    dW1s = np.empty((n_steps, n)) if record_increments else None
    dW2s = np.empty((n_steps, len(g1))) if record_increments else None
    hash1 = hashlib.sha256()
    hash2 = hashlib.sha256()

    states[0] = state.values
    traces[0] = state.values[g1]
    x0_sq[0], h1_sq[0] = _energies(cfg, state.values, eps_for_energy)

    status, failure_step, last = "ok", None, n_steps
    for k in range(n_steps):
        if increments is not None:
            inc = increments[k]
        else:
            inc = sample_increment(cfg.noise, cfg.dt, stream, k)
        hash1.update(inc.dW1.tobytes())
        hash2.update(inc.dW2.tobytes())
        if record_increments:
            dW1s[k] = inc.dW1
            dW2s[k] = inc.dW2
        try:
            if which == "full":
                state = step_full(state, cfg, inc, k)
            elif which == "effective":
                state = step_effective(state, cfg, inc, k)
            else:
                new_v = step_deviation_limit(state, companion, cfg, inc, k)
                companion = step_effective(companion, cfg, inc, k)
                state = new_v
        except PathFailureError as err:
            status, failure_step, last = "failed", err.step_index, k
            break
        states[k + 1] = state.values
        traces[k + 1] = state.values[g1]
        x0_sq[k + 1], h1_sq[k + 1] = _energies(cfg, state.values, eps_for_energy)

    return PathRecord(
        which=which, eps=cfg.epsilon, times=times[:last + 1],
        states=states[:last + 1], traces=traces[:last + 1],
        x0_sq=x0_sq[:last + 1], h1_sq=h1_sq[:last + 1],
        status=status, failure_step=failure_step,
        noise_hash_dw1=hash1.hexdigest(), noise_hash_dw2=hash2.hexdigest(),
        dW1=None if dW1s is None else dW1s[:last],
        dW2=None if dW2s is None else dW2s[:last])


def simulate_coupled(cfg: SystemConfig, stream: StreamConfig,
                     which: tuple[str, ...]) -> dict[str, PathRecord]:
    """Advance several systems in lockstep on one increment sequence.

    Produces records bit-identical to separate ``simulate_path`` calls on
    the same stream (the steppers and draws are shared, not re-derived),
    while sampling each increment and integrating the reduced companion of
    the deviation limit only once.
    """
    wanted = set(which)
    unknown = wanted - set(SYSTEMS)
    if unknown:
        raise ValueError(f"unknown systems {sorted(unknown)}")
    need_eff = bool(wanted & {"effective", "deviation_limit"})
    n_steps = cfg.n_steps
    times = cfg.times()
    n = cfg.mesh.n_nodes
    g1 = cfg.mesh.gamma1_dofs
    u0 = np.asarray(cfg.initial_state, dtype=float)

    class _Track:
        def __init__(self, which_name, eps_energy, start):
            self.which = which_name
            self.eps = eps_energy
            self.state = FieldState(values=start.copy(), time=0.0)
            self.states = np.empty((n_steps + 1, n))
            self.traces = np.empty((n_steps + 1, len(g1)))
            self.x0 = np.empty(n_steps + 1)
            self.h1 = np.empty(n_steps + 1)
            self.record(0)

        def record(self, k):
            self.states[k] = self.state.values
            self.traces[k] = self.state.values[g1]
            self.x0[k], self.h1[k] = _energies(cfg, self.state.values, self.eps)

    tracks: dict[str, _Track] = {}
    if "full" in wanted:
        tracks["full"] = _Track("full", cfg.epsilon, u0)
    if need_eff:
        tracks["effective"] = _Track("effective", 0.0, u0)
    if "deviation_limit" in wanted:
        tracks["deviation_limit"] = _Track("deviation_limit", 0.0, np.zeros(n))

    hash1 = hashlib.sha256()
    hash2 = hashlib.sha256()
    status, failure_step, last = "ok", None, n_steps
    for k in range(n_steps):
        inc = sample_increment(cfg.noise, cfg.dt, stream, k)
        hash1.update(inc.dW1.tobytes())
        hash2.update(inc.dW2.tobytes())
        try:
            if "deviation_limit" in tracks:
                tracks["deviation_limit"].state = step_deviation_limit(
                    tracks["deviation_limit"].state, tracks["effective"].state,
                    cfg, inc, k)
            if "effective" in tracks:
                tracks["effective"].state = step_effective(
                    tracks["effective"].state, cfg, inc, k)
            if "full" in tracks:
                tracks["full"].state = step_full(tracks["full"].state, cfg, inc, k)
        except PathFailureError as err:
            status, failure_step, last = "failed", err.step_index, k
            break
        for tr in tracks.values():
            tr.record(k + 1)

    out = {}
    for name in wanted:
        tr = tracks[name]
        out[name] = PathRecord(
            which=name, eps=cfg.epsilon, times=times[:last + 1],
            states=tr.states[:last + 1], traces=tr.traces[:last + 1],
            x0_sq=tr.x0[:last + 1], h1_sq=tr.h1[:last + 1],
            status=status, failure_step=failure_step,
            noise_hash_dw1=hash1.hexdigest(), noise_hash_dw2=hash2.hexdigest())
    return out


@dataclass(frozen=True)
class SpaceTimeTestFunction:
    """Smooth test function psi(t, x) with analytic time derivative."""

    value: Callable[[float, np.ndarray], np.ndarray]
    time_derivative: Callable[[float, np.ndarray], np.ndarray]


def weak_residual(path: PathRecord, cfg: SystemConfig,
                  test_fn: SpaceTimeTestFunction) -> float:
    """Defect of the time-integrated variational identity along a path.

    Reconstructs every pairing of the weak form (time derivative of the
    test function against the state, the energy form, the reaction term and
    the noise terms rebuilt from the recorded increments) and returns
    |LHS - RHS|.  Requires a path recorded with increments.
    """
    if path.dW1 is None or path.dW2 is None:
        raise ValueError("weak_residual needs a path recorded with increments")
    if not path.ok:
        raise ValueError("weak_residual is only defined for complete paths")
    ws = _workspace(cfg)
    eps = path.eps if path.which == "full" else 0.0
    x = cfg.mesh.nodes
    spec = cfg.noise.spec
    dt = cfg.dt

    def pair(u, p):
        out = float(u @ (ws["M"] @ p))
        if eps != 0.0:
            out += eps * float(u @ (ws["B"] @ p))
        return out

    times = path.times
    psi = [test_fn.value(float(t), x) for t in times]
    lhs = pair(path.states[-1], psi[-1]) - pair(path.states[0], psi[0])

    acc = 0.0
    for k in range(len(times) - 1):
        u_k = path.states[k]
        u_k1 = path.states[k + 1]
        psidot = test_fn.time_derivative(float(times[k]), x)
        acc += dt * pair(u_k, psidot)
        acc -= dt * float(u_k1 @ (ws["K"] @ psi[k + 1]) + u_k1 @ (ws["R"] @ psi[k + 1]))
        if cfg.nonlinearity is not None:
            acc += dt * float(cfg.nonlinearity.f(u_k) @ (ws["M"] @ psi[k + 1]))
        acc += spec.sigma1 * float(path.dW1[k] @ (ws["M"] @ psi[k + 1]))
        if eps != 0.0:
            dw2_full = _scatter_gamma1(cfg, path.dW2[k])
            acc += np.sqrt(eps) * spec.sigma2 * float(dw2_full @ (ws["B"] @ psi[k + 1]))
    return abs(lhs - acc)
