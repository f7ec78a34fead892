"""Deterministic parallel ensembles over (epsilon, path) grids.

The work unit is one (epsilon, path) pair; every epsilon variant of a
path consumes the stream addressed by (master_seed, path_index), which is
what couples the runs pathwise.  Results land in a pre-sized table
indexed by (epsilon, path), so aggregation order - and therefore every
statistic - is bit-identical no matter how many workers execute the
tasks.  Failed paths are excluded from the statistics but always counted;
imputing values would bias the rate fits.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _normal

from .deviations import deviation_path, normal_deviation_gap, path_l2l2_norm, trapezoid_weights
from .dynamics import SystemConfig, simulate_coupled
from .noise import coupled_streams


class DegradedEnsembleError(RuntimeError):
    """More than half of the paths failed at some epsilon."""

    def __init__(self, message: str, stats: "EnsembleStats | None" = None):
        super().__init__(message)
        self.stats = stats


class InsufficientDataError(ValueError):
    """Fewer than three usable epsilon points for a rate fit."""


class UndefinedVarianceError(ValueError):
    """A confidence interval was requested from fewer than two paths."""


_QUANTITY_NEEDS: dict[str, frozenset] = {
    "l2l2_diff_sq": frozenset({"full", "effective"}),
    "sup_x0_sq": frozenset({"full"}),
    "int_h1_dt": frozenset({"full"}),
    "dev_gap": frozenset({"full", "effective", "deviation_limit"}),
    "v_norm": frozenset({"deviation_limit"}),
    "vkappa_norm": frozenset({"full", "effective"}),
}

QUANTITY_NAMES = tuple(sorted(_QUANTITY_NEEDS))


@dataclass(frozen=True)
class EnsembleConfig:
    """Sweep definition: base system, epsilon grid, paths and functionals."""

    base: SystemConfig
    eps_grid: tuple[float, ...]
    n_paths: int
    master_seed: int
    quantities: tuple[str, ...]
    kappa: float | None = None

    def __post_init__(self):
        eps = np.asarray(self.eps_grid, dtype=float)
        if len(eps) == 0 or np.any(eps <= 0) or np.any(eps > 1):
            raise ValueError("eps_grid entries must lie in (0, 1]")
        if len(eps) > 1 and not np.all(np.diff(eps) < 0):
            raise ValueError("eps_grid must be strictly decreasing")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if not self.quantities:
            raise ValueError("at least one quantity is required")
        for q in self.quantities:
            if q not in _QUANTITY_NEEDS:
                raise ValueError(f"unknown quantity {q!r}; known: {QUANTITY_NAMES}")
        if "vkappa_norm" in self.quantities and self.kappa is None:
            raise ValueError("quantity 'vkappa_norm' needs kappa")

    @property
    def needs(self) -> frozenset:
        out: frozenset = frozenset()
        for q in self.quantities:
            out = out | _QUANTITY_NEEDS[q]
        return out


@dataclass
class EnsembleStats:
    """Aggregates per (epsilon, quantity) plus the raw per-path table."""

    eps_grid: tuple[float, ...]
    quantities: tuple[str, ...]
    n_paths: int
    master_seed: int
    mean: np.ndarray
    variance: np.ndarray
    stderr: np.ndarray
    skewness: np.ndarray
    n_success: np.ndarray
    per_path: np.ndarray
    status: np.ndarray

    @property
    def n_failed(self) -> np.ndarray:
        return self.n_paths - self.n_success

    def column(self, quantity: str) -> int:
        return self.quantities.index(quantity)

    def digest(self) -> str:
        """Content hash of the whole results table (reproducibility audits)."""
        h = hashlib.sha256()
        for arr in (self.mean, self.variance, self.stderr, self.skewness,
                    self.n_success, self.per_path, self.status):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _evaluate_quantities(ens: EnsembleConfig, cfg: SystemConfig, eps: float,
                         paths: dict) -> tuple[float, ...]:
    op = cfg.operators
    times = cfg.times()
    out = []
    for q in ens.quantities:
        if q == "l2l2_diff_sq":
            diff = paths["full"].states - paths["effective"].states
            out.append(path_l2l2_norm(op, times, diff) ** 2)
        elif q == "sup_x0_sq":
            out.append(float(np.max(paths["full"].x0_sq)))
        elif q == "int_h1_dt":
            w = trapezoid_weights(times)
            out.append(float(np.sum(w * paths["full"].h1_sq)))
        elif q == "dev_gap":
            out.append(normal_deviation_gap(paths["full"], paths["effective"],
                                            paths["deviation_limit"], eps, op))
        elif q == "v_norm":
            out.append(path_l2l2_norm(op, times, paths["deviation_limit"].states))
        elif q == "vkappa_norm":
            rec = deviation_path(paths["full"], paths["effective"], eps,
                                 ens.kappa, op)
            out.append(rec.norm_l2l2)
    return tuple(out)


def _simulate_pair(ens: EnsembleConfig, eps_index: int, path_index: int):
    eps = ens.eps_grid[eps_index]
    cfg = ens.base.replace(epsilon=eps)
    stream = coupled_streams(ens.master_seed, path_index)
    paths = simulate_coupled(cfg, stream, tuple(sorted(ens.needs)))
    if not all(rec.ok for rec in paths.values()):
        return tuple(np.nan for _ in ens.quantities), 0
    return _evaluate_quantities(ens, cfg, eps, paths), 1


_WORKER_ENS: EnsembleConfig | None = None


def _init_worker(ens: EnsembleConfig) -> None:
    global _WORKER_ENS
    _WORKER_ENS = ens


def _worker_task(task):
    ei, pi = task
    values, ok = _simulate_pair(_WORKER_ENS, ei, pi)
    return ei, pi, values, ok


def run_ensemble(ens: EnsembleConfig, workers: int = 1) -> EnsembleStats:
    """Run every (epsilon, path) task and aggregate in fixed index order.

    Raises DegradedEnsembleError (with the partial statistics attached)
    when more than half the paths failed at any epsilon; individual path
    failures never abort the ensemble.
    """
    ne, npaths, nq = len(ens.eps_grid), ens.n_paths, len(ens.quantities)
    per_path = np.full((ne, npaths, nq), np.nan)
    status = np.zeros((ne, npaths), dtype=np.int8)
    tasks = [(ei, pi) for ei in range(ne) for pi in range(npaths)]

    if workers <= 1:
        for ei, pi in tasks:
            values, ok = _simulate_pair(ens, ei, pi)
            per_path[ei, pi] = values
            status[ei, pi] = ok
    else:
        chunk = max(1, len(tasks) // (workers * 16))
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(ens,)) as pool:
            for ei, pi, values, ok in pool.map(_worker_task, tasks, chunksize=chunk):
                per_path[ei, pi] = values
                status[ei, pi] = ok

    mean = np.full((ne, nq), np.nan)
    variance = np.full((ne, nq), np.nan)
    stderr = np.full((ne, nq), np.nan)
    skewness = np.full((ne, nq), np.nan)
    n_success = status.sum(axis=1).astype(int)
    for ei in range(ne):
        ok = status[ei] == 1
        ns = int(ok.sum())
        if ns == 0:
            continue
        vals = per_path[ei, ok]
        mean[ei] = vals.mean(axis=0)
        if ns > 1:
            variance[ei] = vals.var(axis=0, ddof=1)
            stderr[ei] = np.sqrt(variance[ei] / ns)
            sd = np.sqrt(variance[ei])
            with np.errstate(divide="ignore", invalid="ignore"):
                third = ((vals - mean[ei]) ** 3).mean(axis=0)
                skewness[ei] = np.where(sd > 0, third / sd ** 3, 0.0)
        else:
            variance[ei] = 0.0
            stderr[ei] = 0.0
            skewness[ei] = 0.0

    stats = EnsembleStats(eps_grid=ens.eps_grid, quantities=ens.quantities,
                          n_paths=npaths, master_seed=ens.master_seed,
                          mean=mean, variance=variance, stderr=stderr,
                          skewness=skewness, n_success=n_success,
                          per_path=per_path, status=status)
    bad = [float(ens.eps_grid[ei]) for ei in range(ne) if n_success[ei] < 0.5 * npaths]
    if bad:
        raise DegradedEnsembleError(
            f"more than half the paths failed at eps={bad}", stats=stats)
    return stats


@dataclass(frozen=True)
class RateFit:
    """Least-squares power law of a quantity's ensemble mean against epsilon."""

    quantity: str
    slope: float
    intercept: float
    r_squared: float
    residuals: tuple[float, ...]
    n_points: int


def fit_rate(stats: EnsembleStats, quantity: str) -> RateFit:
    """Ordinary least squares of log(mean) against log(eps) over usable points."""
    qi = stats.column(quantity)
    eps = np.asarray(stats.eps_grid)
    means = stats.mean[:, qi]
    usable = (stats.n_success > 0) & np.isfinite(means) & (means > 0)
    if usable.sum() < 3:
        raise InsufficientDataError(
            f"rate fit for {quantity!r} needs >= 3 usable epsilon points, "
            f"got {int(usable.sum())}")
    x = np.log(eps[usable])
    y = np.log(means[usable])
    A = np.column_stack([x, np.ones_like(x)])
    coef, _, _, _ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot < 1e-300 else 1.0 - ss_res / ss_tot
    return RateFit(quantity=quantity, slope=slope, intercept=intercept,
                   r_squared=float(r2), residuals=tuple(float(v) for v in (y - pred)),
                   n_points=int(usable.sum()))


def confidence_interval(stats: EnsembleStats, quantity: str,
                        level: float = 0.95) -> np.ndarray:
    """Normal-approximation interval mean +- z * stderr per epsilon."""
    qi = stats.column(quantity)
    z = float(_normal.ppf(0.5 + level / 2.0))
    out = np.empty((len(stats.eps_grid), 2))
    for ei in range(len(stats.eps_grid)):
        if stats.n_success[ei] < 2:
            raise UndefinedVarianceError(
                f"confidence interval at eps={stats.eps_grid[ei]} needs >= 2 paths")
        m = stats.mean[ei, qi]
        se = stats.stderr[ei, qi]
        out[ei] = (m - z * se, m + z * se)
    return out


def wilson_interval(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion; never degenerate at 0."""
    if n < 1:
        raise UndefinedVarianceError("Wilson interval needs at least one trial")
    z = float(_normal.ppf(0.5 + level / 2.0))
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = (z / denom) * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return max(0.0, centre - half), min(1.0, centre + half)
