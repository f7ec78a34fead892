"""Trace-class Wiener increment sampling on the domain and on Gamma1.

Interior noise is synthesised from a truncated eigen-expansion over sine
modes that vanish on the whole boundary; boundary noise lives on the
Gamma1 dofs (a single scalar Brownian motion in 1D).  Increments are a
pure function of (spec, mesh, stream, step index): each step re-keys a
counter-based Philox generator, so identical (master_seed, path_index,
label, step) always reproduce bit-identical draws, independent of epsilon,
of how many steps preceded the call, and of which worker runs the path.
This is what lets one noise realization drive every epsilon variant of a
path in the convergence studies.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh import SpatialMesh

_COUNTER_STRIDE = 1 << 128  # disjoint Philox counter block per step


class ConfigurationError(ValueError):
    """Raised when a covariance spec violates a trace condition."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Spectra and amplitudes of the interior / boundary covariance operators.

    ``interior_eigenvalues[k-1]`` is the weight of the k-th interior sine
    mode; ``boundary_eigenvalues`` is the Gamma1 spectrum (length 1 in 1D,
    where the boundary is a point and the noise a scalar Brownian motion).
    ``tail_tol`` bounds the relative spectral mass allowed beyond the
    truncation in both trace checks.
    """

    interior_eigenvalues: tuple[float, ...]
    boundary_eigenvalues: tuple[float, ...]
    truncation: int
    sigma1: float = 0.5
    sigma2: float = 0.5
    tail_tol: float = 0.05

    def __post_init__(self):
        if self.truncation < 1:
            raise ConfigurationError(f"truncation must be >= 1, got {self.truncation}")
        if len(self.interior_eigenvalues) < self.truncation:
            raise ConfigurationError("interior spectrum shorter than the truncation")
        q1 = np.asarray(self.interior_eigenvalues)
        q2 = np.asarray(self.boundary_eigenvalues)
        if np.any(q1 <= 0) or np.any(q2 <= 0):
            raise ConfigurationError("covariance eigenvalues must be positive")
        if np.any(np.diff(q1) > 0):
            raise ConfigurationError("interior eigenvalues must be non-increasing")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ConfigurationError("noise amplitudes must be non-negative")
        if self.tail_tol <= 0:
            raise ConfigurationError("tail_tol must be positive")


def default_covariance(k_trunc: int = 32, decay: float = 3.0, q2: float = 1.0,
                       sigma1: float = 0.5, sigma2: float = 0.5,
                       tail_tol: float = 0.05) -> CovarianceSpec:
    """Power-law interior spectrum q1_k = k^-decay and scalar boundary weight."""
    q1 = tuple(float(k) ** (-decay) for k in range(1, k_trunc + 1))
    return CovarianceSpec(interior_eigenvalues=q1, boundary_eigenvalues=(q2,),
                          truncation=k_trunc, sigma1=sigma1, sigma2=sigma2,
                          tail_tol=tail_tol)


@dataclass(frozen=True)
class StreamConfig:
    """Address of one path's noise streams.

    Distinct (master_seed, path_index, label) triples give statistically
    independent substreams; identical triples replay bit-identical draws.
    """

    master_seed: int
    path_index: int
    interior_label: int = 0
    boundary_label: int = 1


def coupled_streams(master_seed: int, path_index: int) -> StreamConfig:
    """Stream shared by every epsilon variant of one Monte Carlo path."""
    return StreamConfig(master_seed=master_seed, path_index=path_index)


@dataclass(frozen=True)
class NoiseIncrement:
    """One step's Wiener increments: nodal interior field and Gamma1 values."""

    dW1: np.ndarray
    dW2: np.ndarray
    dt: float


@lru_cache(maxsize=4096)
def _stream_key(master_seed: int, path_index: int, label: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(path_index, label))
    k = ss.generate_state(2, np.uint64)
    return int(k[0]), int(k[1])


def _step_rng(master_seed: int, path_index: int, label: int, step_index: int) -> np.random.Generator:
    key = np.array(_stream_key(master_seed, path_index, label), dtype=np.uint64)
    bitgen = np.random.Philox(key=key, counter=step_index * _COUNTER_STRIDE)
    return np.random.Generator(bitgen)


def _fit_tail(terms: np.ndarray) -> float:
    """Remainder estimate for sum(terms[k], k > K) from the fitted power decay.

    Fits term_k ~ C k^-p on the trailing half of the sequence; a fitted
    p <= 1 means the series is not summable and the tail is infinite.
    """
    K = len(terms)
    if K == 1:
        return float(terms[0])  # no decay information: charge one more term
    k = np.arange(1, K + 1, dtype=float)
    lo = K // 2
    slope = np.polyfit(np.log(k[lo:]), np.log(terms[lo:]), 1)[0]
    p = -slope
    if p <= 1.0 + 1e-9:
        return np.inf
    return float(terms[-1] * K / (p - 1.0))


def _interior_modes(mesh: SpatialMesh, count: int):
    """First ``count`` Dirichlet Laplacian sine modes at the mesh nodes.

    Returns (lambdas, modes) with modes[k] the nodal values of the k-th
    L2-normalised eigenfunction and lambdas[k] its eigenvalue.
    """
    if mesh.dimension == 1:
        L = mesh.length
        x = mesh.nodes
        ks = np.arange(1, count + 1)
        lambdas = (ks * np.pi / L) ** 2
        modes = np.sqrt(2.0 / L) * np.sin(np.outer(ks * np.pi / L, x))
        return lambdas, modes
    # 2D rectangle: tensor sine modes ordered by eigenvalue
    x = mesh.nodes[:, 0]
    y = mesh.nodes[:, 1]
    lx = x.max()
    ly = y.max()
    side = int(np.ceil(np.sqrt(2.0 * count))) + 2
    pairs = [(i, j) for i in range(1, side + 1) for j in range(1, side + 1)]
    pairs.sort(key=lambda ij: (ij[0] * np.pi / lx) ** 2 + (ij[1] * np.pi / ly) ** 2)
    pairs = pairs[:count]
    lambdas = np.array([(i * np.pi / lx) ** 2 + (j * np.pi / ly) ** 2 for i, j in pairs])
    modes = np.array([
        (2.0 / np.sqrt(lx * ly)) * np.sin(i * np.pi * x / lx) * np.sin(j * np.pi * y / ly)
        for i, j in pairs
    ])
    return lambdas, modes


def _boundary_modes(mesh: SpatialMesh, count: int) -> np.ndarray:
    """Orthonormal mode values on the Gamma1 dofs (constant 1 in 1D)."""
    g1 = mesh.gamma1_dofs
    if mesh.dimension == 1:
        return np.ones((1, 1))
    # modes along the edge arc length, vanishing at the edge's corner ends
    y = mesh.nodes[g1, 1]
    order = np.argsort(y)
    ymin = mesh.nodes[:, 1].min()
    span = mesh.nodes[:, 1].max() - ymin
    t = y[order] - ymin
    modes = np.zeros((count, len(g1)))
    for k in range(1, count + 1):
        modes[k - 1, order] = np.sqrt(2.0 / span) * np.sin(k * np.pi * t / span)
    return modes


class Sampler:
    """Precomputed mode shapes plus validated trace diagnostics."""

    def __init__(self, spec: CovarianceSpec, mesh: SpatialMesh,
                 lambdas: np.ndarray, modes: np.ndarray, bmodes: np.ndarray,
                 trace_q1: float, trace_a_half_q1: float):
        self.spec = spec
        self.mesh = mesh
        self.lambdas = lambdas
        self.modes = modes
        self.bmodes = bmodes
        self.trace_q1 = trace_q1
        self.trace_a_half_q1 = trace_a_half_q1
        self.sqrt_q1 = np.sqrt(np.asarray(spec.interior_eigenvalues[:spec.truncation]))
        nb = bmodes.shape[0]
        q2 = np.asarray(spec.boundary_eigenvalues, dtype=float)
        if len(q2) < nb:
            q2 = np.concatenate([q2, np.full(nb - len(q2), q2[-1])])
        self.sqrt_q2 = np.sqrt(q2[:nb])

    @property
    def q2_scalar(self) -> float:
        return float(self.spec.boundary_eigenvalues[0])


def build_sampler(spec: CovarianceSpec, mesh: SpatialMesh) -> Sampler:
    """Validate the trace conditions and precompute nodal mode shapes.

    Rejects spectra whose estimated tails exceed ``tail_tol`` relative to
    the total spectral mass, checking the gradient-weighted trace first
    since it is the stronger condition.
    """
    k = spec.truncation
    q1 = np.asarray(spec.interior_eigenvalues[:k], dtype=float)
    lambdas, modes = _interior_modes(mesh, k)

    weighted = q1 * np.sqrt(lambdas)
    tail_w = _fit_tail(weighted)
    if not np.isfinite(tail_w) or tail_w > spec.tail_tol * (weighted.sum() + tail_w):
        raise ConfigurationError(
            "trace condition Tr(A^(1/2) Q1) violated: estimated spectral tail "
            f"{tail_w:.3g} exceeds tail_tol={spec.tail_tol} of the total mass")
    tail_q = _fit_tail(q1)
    if not np.isfinite(tail_q) or tail_q > spec.tail_tol * (q1.sum() + tail_q):
        raise ConfigurationError(
            "trace condition Tr(Q1) violated: estimated spectral tail "
            f"{tail_q:.3g} exceeds tail_tol={spec.tail_tol} of the total mass")

    n_bmodes = 1 if mesh.dimension == 1 else min(len(spec.boundary_eigenvalues), 8)
    bmodes = _boundary_modes(mesh, n_bmodes)
    return Sampler(spec=spec, mesh=mesh, lambdas=lambdas, modes=modes, bmodes=bmodes,
                   trace_q1=float(q1.sum() + tail_q),
                   trace_a_half_q1=float(weighted.sum() + tail_w))


def sample_increment(sampler: Sampler, dt: float, stream: StreamConfig,
                     step_index: int) -> NoiseIncrement:
    """Draw the step's increments; pure in (sampler, dt, stream, step_index)."""
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    rng_i = _step_rng(stream.master_seed, stream.path_index, stream.interior_label, step_index)
    xi = rng_i.standard_normal(sampler.spec.truncation)
    dW1 = np.sqrt(dt) * ((xi * sampler.sqrt_q1) @ sampler.modes)
    rng_b = _step_rng(stream.master_seed, stream.path_index, stream.boundary_label, step_index)
    eta = rng_b.standard_normal(sampler.bmodes.shape[0])
    dW2 = np.sqrt(dt) * ((eta * sampler.sqrt_q2) @ sampler.bmodes)
    return NoiseIncrement(dW1=dW1, dW2=dW2, dt=dt)


def noise_fingerprint(sampler: Sampler, dt: float, stream: StreamConfig,
                      n_steps: int) -> str:
    """Hash of the full increment sequence, for reproducibility audits."""
    digest = hashlib.sha256()
    for step in range(n_steps):
        inc = sample_increment(sampler, dt, stream, step)
        digest.update(inc.dW1.tobytes())
        digest.update(inc.dW2.tobytes())
    return digest.hexdigest()
