"""Meshes with a split boundary and the P1 finite element operators built on them.

The domain carries two boundary pieces: ``Gamma2`` holds a homogeneous
Dirichlet condition, ``Gamma1`` is where the dynamical / Robin condition
lives.  On the default 1D interval (0, L) the left endpoint is Gamma2 and
the right endpoint is Gamma1.  An optional structured rectangle puts
Gamma1 on the right edge.

Assembled operators (all sparse, full node numbering, symmetric):

    K   stiffness            integral of grad(u) . grad(w)
    R   Robin boundary form  integral over Gamma1 of u w
    M   interior mass        integral over D of u w
    B   boundary mass        integral over Gamma1 of u w

The energy form of the evolution problems is a(u, w) = u^T (K + R) w.
Dirichlet dofs are handled by row/column elimination with a recorded dof
map so that the free-dof blocks stay symmetric positive definite.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

GAMMA1 = "Gamma1"
GAMMA2 = "Gamma2"


class DomainValidationError(ValueError):
    """Raised when a mesh request or mesh state violates a domain invariant."""


class DiagnosticsError(RuntimeError):
    """Raised when an eigenvalue diagnostic fails to converge."""


class SingularSystemError(RuntimeError):
    """Raised when a lifted boundary solve hits a singular matrix."""


@dataclass(frozen=True)
class SpatialMesh:
    """Nodes, connectivity and boundary tags of a 1D or 2D grid.

    ``boundary_tags`` maps node index -> GAMMA1 | GAMMA2; every boundary
    node carries exactly one tag and both tag sets are nonempty.
    """

    dimension: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_tags: dict[int, str]
    h: float

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise DomainValidationError(f"dimension must be 1 or 2, got {self.dimension}")
        if self.h <= 0:
            raise DomainValidationError("mesh size h must be positive")
        tags = set(self.boundary_tags.values())
        if GAMMA1 not in tags or GAMMA2 not in tags:
            raise DomainValidationError("both Gamma1 and Gamma2 must be nonempty")
        for node, tag in self.boundary_tags.items():
            if tag not in (GAMMA1, GAMMA2):
                raise DomainValidationError(f"node {node} carries unknown tag {tag!r}")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def gamma1_dofs(self) -> np.ndarray:
        return np.array(sorted(i for i, t in self.boundary_tags.items() if t == GAMMA1))

    @property
    def gamma2_dofs(self) -> np.ndarray:
        return np.array(sorted(i for i, t in self.boundary_tags.items() if t == GAMMA2))

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.gamma2_dofs] = False
        return np.nonzero(mask)[0]

    @property
    def length(self) -> float:
        """Extent of the 1D interval (undefined for 2D meshes)."""
        if self.dimension != 1:
            raise DomainValidationError("length is only defined for interval meshes")
        return float(self.nodes[-1] - self.nodes[0])


def build_interval_mesh(n: int, length: float) -> SpatialMesh:
    """Uniform mesh on (0, length) with node 0 Dirichlet and node n-1 dynamical.

    Requires n >= 3 (at least one interior node) and length > 0.
    """
    if n < 3:
        raise DomainValidationError(f"interval mesh needs at least 3 nodes, got {n}")
    if length <= 0:
        raise DomainValidationError(f"interval length must be positive, got {length}")
    nodes = np.linspace(0.0, length, n)
    elements = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    tags = {0: GAMMA2, n - 1: GAMMA1}
    return SpatialMesh(dimension=1, nodes=nodes, elements=elements,
                       boundary_tags=tags, h=length / (n - 1))


def build_rectangle_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> SpatialMesh:
    """Structured triangulation of (0,lx) x (0,ly); Gamma1 is the open right edge.

    Corners belong to Gamma2 so that the two boundary pieces stay disjoint.
    """
    if nx < 3 or ny < 3:
        raise DomainValidationError("rectangle mesh needs at least 3 nodes per direction")
    if lx <= 0 or ly <= 0:
        raise DomainValidationError("rectangle side lengths must be positive")
    xs = np.linspace(0.0, lx, nx)
    ys = np.linspace(0.0, ly, ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * ny + j

    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    tags: dict[int, str] = {}
    for i in range(nx):
        for j in range(ny):
            on_left = i == 0
            on_right = i == nx - 1
            on_horiz = j == 0 or j == ny - 1
            if on_right and not on_horiz:
                tags[nid(i, j)] = GAMMA1
            elif on_left or on_right or on_horiz:
                tags[nid(i, j)] = GAMMA2
    h = max(lx / (nx - 1), ly / (ny - 1)) * np.sqrt(2.0)
    return SpatialMesh(dimension=2, nodes=nodes, elements=np.array(tris),
                       boundary_tags=tags, h=h)


@dataclass(frozen=True)
class FieldState:
    """Nodal values of the scalar field at one time instant."""

    values: np.ndarray
    time: float

    def trace(self, mesh: SpatialMesh) -> np.ndarray:
        """Values restricted to the Gamma1 dofs."""
        return self.values[mesh.gamma1_dofs]


@dataclass(frozen=True)
class DiscreteOperator:
    """Assembled P1 matrices together with the Dirichlet dof map."""

    mesh: SpatialMesh
    K: sp.csr_matrix
    R: sp.csr_matrix
    M: sp.csr_matrix
    B: sp.csr_matrix
    dirichlet_dofs: np.ndarray
    free_dofs: np.ndarray = field(repr=False, default=None)

    def restrict(self, A: sp.spmatrix) -> sp.csr_matrix:
        """Free-dof submatrix of A (Dirichlet rows and columns eliminated)."""
        f = self.free_dofs
        return A.tocsr()[f][:, f]

    def a_form(self, u: np.ndarray, w: np.ndarray) -> float:
        """Energy bilinear form u^T (K + R) w on full nodal vectors."""
        return float(u @ (self.K @ w) + u @ (self.R @ w))

    def expand(self, values_free: np.ndarray) -> np.ndarray:
        """Scatter a free-dof vector to full length with zeros on Gamma2."""
        out = np.zeros(self.mesh.n_nodes)
        out[self.free_dofs] = values_free
        return out


def _assemble_interval(mesh: SpatialMesh):
    n = mesh.n_nodes
    h = np.diff(mesh.nodes)
    iel = mesh.elements[:, 0]
    jel = mesh.elements[:, 1]
    rows, cols, kv, mv = [], [], [], []
    # element stiffness (1/h) [[1,-1],[-1,1]], element mass (h/6) [[2,1],[1,2]]
    for (r, c, ks, ms) in (
        (iel, iel, 1.0 / h, h / 3.0),
        (jel, jel, 1.0 / h, h / 3.0),
        (iel, jel, -1.0 / h, h / 6.0),
        (jel, iel, -1.0 / h, h / 6.0),
    ):
        rows.append(r)
        cols.append(c)
        kv.append(ks)
        mv.append(ms)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    K = sp.csr_matrix((np.concatenate(kv), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((np.concatenate(mv), (rows, cols)), shape=(n, n))
    # Gamma1 is a single point in 1D: the boundary "integral" is evaluation there
    g1 = mesh.gamma1_dofs
    B = sp.csr_matrix((np.ones(len(g1)), (g1, g1)), shape=(n, n))
    return K, M, B


def _assemble_rectangle(mesh: SpatialMesh):
    n = mesh.n_nodes
    pts = mesh.nodes
    tris = mesh.elements
    rows, cols, kv, mv = [], [], [], []
    for tri in tris:
        p = pts[tri]
        mat = np.column_stack([np.ones(3), p])
        area = 0.5 * abs(np.linalg.det(mat))
        grads = np.linalg.solve(mat, np.eye(3)[:, :])[1:, :]  # rows: d/dx, d/dy
        ke = area * (grads.T @ grads)
        me = (area / 12.0) * (np.ones((3, 3)) + np.eye(3) * 1.0)
        for a in range(3):
            for b in range(3):
                rows.append(tri[a])
                cols.append(tri[b])
                kv.append(ke[a, b])
                mv.append(me[a, b])
    K = sp.csr_matrix((kv, (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((mv, (rows, cols)), shape=(n, n))
    # boundary mass over the Gamma1 edge: P1 segments h/6 [[2,1],[1,2]],
    # including segments touching the (Dirichlet) corners of that edge
    xmax = pts[:, 0].max()
    edge_nodes = np.nonzero(np.isclose(pts[:, 0], xmax))[0]
    edge_nodes = edge_nodes[np.argsort(pts[edge_nodes, 1])]
    br, bc, bv = [], [], []
    for a, b in zip(edge_nodes[:-1], edge_nodes[1:]):
        he = pts[b, 1] - pts[a, 1]
        for (r, c, v) in ((a, a, he / 3), (b, b, he / 3), (a, b, he / 6), (b, a, he / 6)):
            br.append(r)
            bc.append(c)
            bv.append(v)
    B = sp.csr_matrix((bv, (br, bc)), shape=(n, n))
    return K, M, B


def assemble_operators(mesh: SpatialMesh) -> DiscreteOperator:
    """Assemble K, R, M, B and record the Dirichlet dof map."""
    if mesh.dimension == 1:
        K, M, B = _assemble_interval(mesh)
    else:
        K, M, B = _assemble_rectangle(mesh)
    R = B.copy()  # Robin form and Gamma1 mass coincide for P1 elements
    return DiscreteOperator(mesh=mesh, K=K, R=R, M=M, B=B,
                            dirichlet_dofs=mesh.gamma2_dofs,
                            free_dofs=mesh.free_dofs)


def weighted_mass_apply(mesh: SpatialMesh, weight: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Product M_w v of the mass matrix weighted by nodal-interpolated weight.

    For a 1D element (x_i, x_{i+1}) with linear weight w the exact element
    matrix is (h/12) [[3 w_i + w_j, w_i + w_j], [w_i + w_j, w_i + 3 w_j]].
    """
    if mesh.dimension == 1:
        h = np.diff(mesh.nodes)
        wi = weight[:-1]
        wj = weight[1:]
        vi = v[:-1]
        vj = v[1:]
        out = np.zeros_like(v)
        out[:-1] += (h / 12.0) * ((3 * wi + wj) * vi + (wi + wj) * vj)
        out[1:] += (h / 12.0) * ((wi + wj) * vi + (wi + 3 * wj) * vj)
        return out
    return weighted_mass_matrix(mesh, weight) @ v


def weighted_mass_matrix(mesh: SpatialMesh, weight: np.ndarray) -> sp.csr_matrix:
    """Assembled mass matrix with nodal-interpolated weight."""
    n = mesh.n_nodes
    if mesh.dimension == 1:
        h = np.diff(mesh.nodes)
        wi = weight[:-1]
        wj = weight[1:]
        iel = mesh.elements[:, 0]
        jel = mesh.elements[:, 1]
        rows = np.concatenate([iel, jel, iel, jel])
        cols = np.concatenate([iel, jel, jel, iel])
        vals = np.concatenate([
            (h / 12.0) * (3 * wi + wj),
            (h / 12.0) * (wi + 3 * wj),
            (h / 12.0) * (wi + wj),
            (h / 12.0) * (wi + wj),
        ])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    rows, cols, vals = [], [], []
    for tri in mesh.elements:
        p = mesh.nodes[tri]
        mat = np.column_stack([np.ones(3), p])
        area = 0.5 * abs(np.linalg.det(mat))
        w = weight[tri]
        # exact integral of w_h phi_a phi_b over the triangle
        for a in range(3):
            for b in range(3):
                rows.append(tri[a])
                cols.append(tri[b])
                vals.append(float(np.dot(w, _perm_weights(a, b, area))))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _factorial(k: int) -> float:
    out = 1.0
    for i in range(2, k + 1):
        out *= i
    return out


def _perm_weights(a: int, b: int, area: float) -> np.ndarray:
    # integral over a triangle of phi_a phi_b phi_c for c = 0,1,2, via the
    # standard formula: int phi^alpha = 2A alpha! / (|alpha| + 2)!
    out = np.empty(3)
    for c in range(3):
        alpha = np.zeros(3, dtype=int)
        alpha[a] += 1
        alpha[b] += 1
        alpha[c] += 1
        num = np.prod([_factorial(int(x)) for x in alpha])
        out[c] = 2.0 * area * num / _factorial(int(alpha.sum()) + 2)
    return out


def coercivity_diagnostics(op: DiscreteOperator) -> tuple[float, float]:
    """Largest alpha with u^T(K+R)u >= alpha u^T(M+B)u on free dofs (beta = 0).

    With a nonempty Dirichlet set the energy form is positive definite, so
    the sharp constant is the smallest generalized eigenvalue of the pencil
    (K + R, M + B) and no zero-order correction beta is needed.
    """
    A = (op.restrict(op.K) + op.restrict(op.R)).toarray()
    G = (op.restrict(op.M) + op.restrict(op.B)).toarray()
    try:
        eigs = scipy.linalg.eigh(A, G, eigvals_only=True)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise DiagnosticsError(f"generalized eigensolve failed: {exc}") from exc
    alpha = float(eigs[0])
    if alpha > 0:
        return alpha, 0.0
    # degenerate meshes only: fall back to alpha = half the spectral gap with
    # the minimal compensating beta
    alpha = 0.5 * float(abs(eigs).min() + 1e-12)
    beta = float(max(0.0, -eigs[0]) + alpha)
    return alpha, beta


def boundedness_constant(op: DiscreteOperator) -> float:
    """Smallest constant with a(u, w) <= C |u|_{K+M} |w|_{K+M} on free dofs."""
    A = (op.restrict(op.K) + op.restrict(op.R)).toarray()
    G = (op.restrict(op.K) + op.restrict(op.M)).toarray()
    try:
        eigs = scipy.linalg.eigh(A, G, eigvals_only=True)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise DiagnosticsError(f"generalized eigensolve failed: {exc}") from exc
    return float(eigs[-1])


def robin_eigenvalues(op: DiscreteOperator, count: int = 4) -> np.ndarray:
    """Smallest generalized eigenvalues of (K + R, M) on free dofs."""
    A = (op.restrict(op.K) + op.restrict(op.R)).toarray()
    G = op.restrict(op.M).toarray()
    eigs = scipy.linalg.eigh(A, G, eigvals_only=True)
    return eigs[:count]


def neumann_map(op: DiscreteOperator, r: float = 1.0, g=0.0) -> FieldState:
    """Solve (r M + K + R) y = B g with Dirichlet dofs pinned to zero.

    ``g`` is boundary data on Gamma1 (scalar or per-Gamma1-dof array); the
    map is linear in g.  Any r >= 0 keeps the system positive definite.
    """
    mesh = op.mesh
    g1 = mesh.gamma1_dofs
    g_full = np.zeros(mesh.n_nodes)
    g_full[g1] = g
    A = r * op.restrict(op.M) + op.restrict(op.K) + op.restrict(op.R)
    rhs = (op.B @ g_full)[op.free_dofs]
    try:
        lu = sp.linalg.splu(A.tocsc())
        y_free = lu.solve(rhs)
    except RuntimeError as exc:
        raise SingularSystemError(f"lifted boundary solve is singular for r={r}: {exc}") from exc
    if not np.all(np.isfinite(y_free)):
        raise SingularSystemError(f"lifted boundary solve is singular for r={r}")
    return FieldState(values=op.expand(y_free), time=0.0)


def dump_operators(op: DiscreteOperator, directory: str) -> list[str]:
    """Write the mesh and all matrices in matrix-market text form (debug aid)."""
    import scipy.io

    os.makedirs(directory, exist_ok=True)
    written = []
    for name, mat in (("K", op.K), ("R", op.R), ("M", op.M), ("B", op.B)):
        path = os.path.join(directory, f"{name}.mtx")
        scipy.io.mmwrite(path, mat.tocoo())
        written.append(path)
    mesh_path = os.path.join(directory, "mesh.txt")
    with open(mesh_path, "w") as fh:
        fh.write(f"dimension {op.mesh.dimension}\n")
        fh.write(f"h {op.mesh.h!r}\n")
        for i in range(op.mesh.n_nodes):
            coords = np.atleast_1d(op.mesh.nodes[i])
            tag = op.mesh.boundary_tags.get(i, "-")
            fh.write(" ".join(repr(float(c)) for c in coords) + f" {tag}\n")
    written.append(mesh_path)
    return written
