"""
P1 finite elements on a uniform triangulation of ]0,1[^2 for -div(a(y) grad u) = f with
homogeneous Dirichlet conditions, assembled in affine form A(y) = A0 + sum_j y_j A_j.

The coefficient is constant on every triangle (the mesh is aligned with the k x k
coefficient grid), so element matrices are integrated exactly.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from app.core.errors import InvalidArgumentError, NumericalFailureError
from app.services.params import AffineCoefficientModel, ParameterVector, as_parameter

logger = logging.getLogger(__name__)

# f is either a constant or a callable f(x1, x2) evaluated at nodes (load by interpolation)
LoadSpec = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]

RESIDUAL_RTOL = 1e-10

# degree-4 symmetric rule on the reference triangle: (barycentric point, weight)
_QUAD_POINTS = np.array([
    [0.445948490915965, 0.445948490915965, 0.108103018168070],
    [0.445948490915965, 0.108103018168070, 0.445948490915965],
    [0.108103018168070, 0.445948490915965, 0.445948490915965],
    [0.091576213509771, 0.091576213509771, 0.816847572980459],
    [0.091576213509771, 0.816847572980459, 0.091576213509771],
    [0.816847572980459, 0.091576213509771, 0.091576213509771],
])
_QUAD_WEIGHTS = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Uniform mesh with grid_n cells per side, each cell split along its (0,0)-(1,1) diagonal.
    Node (i, j) at (i h, j h) has global id i + j (grid_n + 1).
    """

    grid_n: int
    k: int
    nodes: np.ndarray
    triangles: np.ndarray
    interior: np.ndarray
    global_to_interior: np.ndarray
    triangle_cell: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.grid_n

    @property
    def n_interior(self) -> int:
        return int(self.interior.shape[0])

    def to_full(self, coeffs: np.ndarray) -> np.ndarray:
        """Nodal vector over all nodes, zero on the boundary."""
        full = np.zeros(self.nodes.shape[0])
        full[self.interior] = coeffs
        return full


def build_mesh(grid_n: int, k: int) -> Mesh:
    if grid_n < 2:
        raise InvalidArgumentError(f"grid_n must be >= 2, got {grid_n}")
    if k < 1 or grid_n % k != 0:
        raise InvalidArgumentError(f"coefficient grid k={k} does not divide grid_n={grid_n}")

    n = grid_n
    ticks = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(ticks, ticks, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i, j = i.ravel(), j.ravel()
    n00 = i + j * (n + 1)
    n10 = n00 + 1
    n01 = n00 + (n + 1)
    n11 = n01 + 1
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([n00, n10, n11])
    triangles[1::2] = np.column_stack([n00, n11, n01])

    ni, nj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    is_interior = ((ni > 0) & (ni < n) & (nj > 0) & (nj < n)).ravel()
    interior = np.flatnonzero(is_interior)
    global_to_interior = np.full(nodes.shape[0], -1, dtype=np.int64)
    global_to_interior[interior] = np.arange(interior.shape[0])

    centroids = nodes[triangles].mean(axis=1)
    col = np.minimum((centroids[:, 0] * k).astype(np.int64), k - 1)
    row = np.minimum((centroids[:, 1] * k).astype(np.int64), k - 1)
    triangle_cell = row * k + col

    for arr in (nodes, triangles, interior, global_to_interior, triangle_cell):
        arr.setflags(write=False)
    return Mesh(grid_n, k, nodes, triangles, interior, global_to_interior, triangle_cell)


def _element_geometry(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    """Triangle areas and barycentric gradients, shape (ntri,) and (ntri, 3, 2)."""
    p = mesh.nodes[mesh.triangles]
    x, y = p[:, :, 0], p[:, :, 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    grads = np.empty((p.shape[0], 3, 2))
    grads[:, 0, 0], grads[:, 0, 1] = y[:, 1] - y[:, 2], x[:, 2] - x[:, 1]
    grads[:, 1, 0], grads[:, 1, 1] = y[:, 2] - y[:, 0], x[:, 0] - x[:, 2]
    grads[:, 2, 0], grads[:, 2, 1] = y[:, 0] - y[:, 1], x[:, 1] - x[:, 0]
    grads /= det[:, None, None]
    return 0.5 * np.abs(det), grads


@dataclass(frozen=True, eq=False)
class _Pattern:
    """Shared CSR sparsity over interior nodes plus the scatter map from element entries."""

    indptr: np.ndarray
    indices: np.ndarray
    shape: Tuple[int, int]
    scatter: np.ndarray
    keep: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def reduce(self, element_entries: np.ndarray) -> np.ndarray:
        """Sum (ntri, 3, 3) element entries into pattern-aligned data."""
        return np.bincount(self.scatter, weights=element_entries.reshape(-1)[self.keep], minlength=self.nnz)


def _pattern(mesh: Mesh) -> _Pattern:
    local = mesh.global_to_interior[mesh.triangles]
    rows = np.repeat(local[:, :, None], 3, axis=2).reshape(-1)
    cols = np.repeat(local[:, None, :], 3, axis=1).reshape(-1)
    keep = np.flatnonzero((rows >= 0) & (cols >= 0))
    n = mesh.n_interior
    keys = rows[keep] * n + cols[keep]
    unique, scatter = np.unique(keys, return_inverse=True)
    unique_rows = unique // n
    indices = (unique % n).astype(np.int64)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(unique_rows, minlength=n))]).astype(np.int64)
    return _Pattern(indptr, indices, (n, n), scatter, keep)


def _unit_element_stiffness(mesh: Mesh) -> np.ndarray:
    area, grads = _element_geometry(mesh)
    return area[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)


def _element_mass(mesh: Mesh) -> np.ndarray:
    area, _ = _element_geometry(mesh)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return area[:, None, None] * ref[None, :, :]


def assemble_stiffness(mesh: Mesh, cell_values: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix over interior nodes for a coefficient constant on each of the k^2 cells."""
    cell_values = np.asarray(cell_values, dtype=np.float64)
    if cell_values.shape != (mesh.k * mesh.k,):
        raise InvalidArgumentError(f"expected {mesh.k * mesh.k} cell values, got {cell_values.shape}")
    pattern = _pattern(mesh)
    weights = cell_values[mesh.triangle_cell]
    return pattern.matrix(pattern.reduce(weights[:, None, None] * _unit_element_stiffness(mesh)))


def load_vector(mesh: Mesh, f: LoadSpec = 1.0) -> np.ndarray:
    """
    Constant f: exact integral of f times each hat function. Callable f: mass matrix
    applied to the nodal interpolant of f (boundary nodes included).
    """
    area, _ = _element_geometry(mesh)
    if callable(f):
        values = np.asarray(f(mesh.nodes[:, 0], mesh.nodes[:, 1]), dtype=np.float64)
        entries = np.einsum("tij,tj->ti", _element_mass(mesh), values[mesh.triangles])
    else:
        entries = np.repeat((float(f) * area / 3.0)[:, None], 3, axis=1)
    full = np.bincount(mesh.triangles.reshape(-1), weights=entries.reshape(-1), minlength=mesh.nodes.shape[0])
    return full[mesh.interior]


@dataclass(frozen=True, eq=False)
class AffineOperator:
    """
    A(y) = A0 + sum_j y_j A_j on a shared sparsity pattern; `inner` is the unit-coefficient
    stiffness matrix S defining the V = H^1_0 inner product.
    """

    mesh: Mesh
    model: AffineCoefficientModel
    pattern: _Pattern
    a0_data: np.ndarray
    component_data: np.ndarray
    load: np.ndarray
    inner: sp.csr_matrix
    load_label: str = "constant:1.0"

    @property
    def d(self) -> int:
        return int(self.component_data.shape[0])

    @property
    def n_h(self) -> int:
        return int(self.load.shape[0])

    @property
    def a0(self) -> sp.csr_matrix:
        return self.pattern.matrix(self.a0_data.copy())

    def component(self, j: int) -> sp.csr_matrix:
        """A_j (0-based j) with structural zeros removed, so its support is the nodes touching D_j."""
        mat = self.pattern.matrix(self.component_data[j].copy())
        mat.eliminate_zeros()
        return mat

    @property
    def components(self) -> List[sp.csr_matrix]:
        return [self.component(j) for j in range(self.d)]

    def matrix_at(self, y: ParameterVector) -> sp.csr_matrix:
        y = np.asarray(y, dtype=np.float64)
        return self.pattern.matrix(self.a0_data + y @ self.component_data)

    def apply_components(self, v: np.ndarray) -> np.ndarray:
        """Rows A_1 v, ..., A_d v in one pass over the shared pattern, shape (d, n_h)."""
        products = self.component_data * np.asarray(v, dtype=np.float64)[self.pattern.indices]
        return np.add.reduceat(products, self.pattern.indptr[:-1], axis=1)


def assemble(mesh: Mesh, model: AffineCoefficientModel, f: LoadSpec = 1.0) -> AffineOperator:
    if mesh.k != model.k:
        raise InvalidArgumentError(f"mesh is aligned with k={mesh.k} but the model has k={model.k}")
    pattern = _pattern(mesh)
    unit = _unit_element_stiffness(mesh)
    a0_data = model.abar * pattern.reduce(unit)

    d = model.d
    component_data = np.zeros((d, pattern.nnz))
    amplitudes = model.amplitude_array
    for j in range(d):
        mask = (mesh.triangle_cell == j).astype(np.float64)
        component_data[j] = amplitudes[j] * pattern.reduce(mask[:, None, None] * unit)

    inner = pattern.matrix(pattern.reduce(unit))
    load = load_vector(mesh, f)
    label = "custom" if callable(f) else f"constant:{float(f)!r}"
    for arr in (a0_data, component_data, load):
        arr.setflags(write=False)
    logger.debug("assembled affine operator: n_h=%d, d=%d, nnz=%d", load.shape[0], d, pattern.nnz)
    return AffineOperator(mesh, model, pattern, a0_data, component_data, load, inner, label)


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Coefficients of u_h over interior nodes with the cached V-norm."""

    coeffs: np.ndarray
    vnorm: float

    @classmethod
    def from_coeffs(cls, coeffs: np.ndarray, inner: sp.spmatrix) -> "Snapshot":
        coeffs = np.array(coeffs, dtype=np.float64)
        coeffs.setflags(write=False)
        energy = float(coeffs @ (inner @ coeffs))
        return cls(coeffs, float(np.sqrt(max(energy, 0.0))))

    @property
    def n_h(self) -> int:
        return int(self.coeffs.shape[0])


def _as_coeffs(u: Union[Snapshot, np.ndarray]) -> np.ndarray:
    return u.coeffs if isinstance(u, Snapshot) else np.asarray(u, dtype=np.float64)


def v_inner(a: Union[Snapshot, np.ndarray], b: Union[Snapshot, np.ndarray], S: sp.spmatrix) -> float:
    """H^1_0 inner product a . (S b)."""
    ca, cb = _as_coeffs(a), _as_coeffs(b)
    if ca.shape != cb.shape or ca.shape[0] != S.shape[0]:
        raise InvalidArgumentError(f"dimension mismatch: {ca.shape}, {cb.shape}, inner {S.shape}")
    return float(ca @ (S @ cb))


@dataclass
class HighFidelitySolver:
    """
    Solves A(y) u = f for one assembled operator. Direct SuperLU factorization up to
    `direct_max_unknowns`, Jacobi-preconditioned CG above. The factorization of S used by
    the residual surrogate is computed once and shared.
    """

    operator: AffineOperator
    direct_max_unknowns: int = 250_000
    cg_rtol: float = 1e-12
    solve_count: int = 0
    _inner_lu: Optional[object] = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def inner(self) -> sp.csr_matrix:
        return self.operator.inner

    def solve(self, y: ParameterVector) -> Snapshot:
        op = self.operator
        y = as_parameter(y, op.d)
        A = op.matrix_at(y)
        u = self._solve_system(A, op.load)
        energy = float(u @ op.load)
        if not np.isfinite(energy) or energy <= 0.0:
            raise NumericalFailureError(f"operator is not positive definite at y (energy {energy:.3e})")
        with self._lock:
            self.solve_count += 1
        return Snapshot.from_coeffs(u, op.inner)

    def _solve_system(self, A: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
        n = A.shape[0]
        bnorm = float(np.linalg.norm(b)) or 1.0
        if n <= self.direct_max_unknowns:
            try:
                u = splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(b)
            except RuntimeError as e:
                raise NumericalFailureError(f"sparse factorization failed: {e}") from e
        else:
            diag = A.diagonal()
            if np.any(diag <= 0.0):
                raise NumericalFailureError("non-positive diagonal entry, operator is not SPD")
            precond = LinearOperator(A.shape, matvec=lambda r: r / diag, dtype=np.float64)
            u, info = cg(A, b, rtol=self.cg_rtol, maxiter=10 * n, M=precond)
            if info != 0:
                raise NumericalFailureError(f"conjugate gradient did not converge (info={info})")
        residual = float(np.linalg.norm(b - A @ u)) / bnorm
        if not np.isfinite(residual) or residual > RESIDUAL_RTOL:
            raise NumericalFailureError(f"relative algebraic residual {residual:.3e} above {RESIDUAL_RTOL:.0e}")
        return u

    def inner_solve(self, r: np.ndarray) -> np.ndarray:
        """S^-1 r with a cached factorization of S."""
        with self._lock:
            if self._inner_lu is None:
                self._inner_lu = splu(self.inner.tocsc(), permc_spec="MMD_AT_PLUS_A")
            lu = self._inner_lu
            return lu.solve(r)

    def riesz_residual_norm(self, y: ParameterVector, reduced_solution: Union[Snapshot, np.ndarray]) -> float:
        """Dual norm of r = f - A(y) u_n, computed as ||S^-1 r||_V."""
        op = self.operator
        y = as_parameter(y, op.d)
        u = _as_coeffs(reduced_solution)
        if u.shape[0] != op.n_h:
            raise InvalidArgumentError(f"reduced solution has {u.shape[0]} entries, expected {op.n_h}")
        r = op.load - op.matrix_at(y) @ u
        z = self.inner_solve(r)
        return float(np.sqrt(max(float(r @ z), 0.0)))


def solve(op: AffineOperator, y: ParameterVector) -> Snapshot:
    return HighFidelitySolver(op).solve(y)


def riesz_residual_norm(
    op: AffineOperator,
    y: ParameterVector,
    reduced_solution: Union[Snapshot, np.ndarray],
    S: Optional[sp.spmatrix] = None,
) -> float:
    if S is not None and S is not op.inner:
        op = AffineOperator(op.mesh, op.model, op.pattern, op.a0_data, op.component_data,
                            op.load, sp.csr_matrix(S), op.load_label)
    return HighFidelitySolver(op).riesz_residual_norm(y, reduced_solution)


def l2_error(mesh: Mesh, coeffs: np.ndarray, exact: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
    """||u - u_h||_{L2} by a degree-4 quadrature on every triangle."""
    area, _ = _element_geometry(mesh)
    p = mesh.nodes[mesh.triangles]
    values = mesh.to_full(coeffs)[mesh.triangles]
    qx = np.einsum("qi,ti->tq", _QUAD_POINTS, p[:, :, 0])
    qy = np.einsum("qi,ti->tq", _QUAD_POINTS, p[:, :, 1])
    uh = np.einsum("qi,ti->tq", _QUAD_POINTS, values)
    err = (exact(qx, qy) - uh) ** 2
    return float(np.sqrt(np.sum(area * (err @ _QUAD_WEIGHTS))))


def h1_seminorm_error(
    mesh: Mesh,
    coeffs: np.ndarray,
    exact_grad: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]],
) -> float:
    """||grad(u - u_h)||_{L2}; grad u_h is constant per triangle."""
    area, grads = _element_geometry(mesh)
    p = mesh.nodes[mesh.triangles]
    values = mesh.to_full(coeffs)[mesh.triangles]
    gh = np.einsum("ti,tik->tk", values, grads)
    qx = np.einsum("qi,ti->tq", _QUAD_POINTS, p[:, :, 0])
    qy = np.einsum("qi,ti->tq", _QUAD_POINTS, p[:, :, 1])
    gx, gy = exact_grad(qx, qy)
    err = (gx - gh[:, 0:1]) ** 2 + (gy - gh[:, 1:2]) ** 2
    return float(np.sqrt(np.sum(area * (err @ _QUAD_WEIGHTS))))
