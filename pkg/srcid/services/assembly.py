from __future__ import annotations
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.sparse as sps

from srcid.errors import CoefficientError, MeshError
from srcid.logger import logger as app_logger, attach_to_logger_names
from srcid.services.expressions import FieldLike, MatrixField, ScalarField
from srcid.services.mesh import BoundarySpec, Mesh, tag_boundary

attach_to_logger_names(["srcid.services.assembly"])

SparseSymMatrix = sps.csr_matrix
NodalField = np.ndarray

# 2-point Gauss-Legendre on (0, 1)
_GAUSS_T = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))

_P1_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
_EDGE_MASS = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


# ---------------------------------------------------------------------------
# time grid and space-time containers
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of (0, T]: levels t^n = n*tau, n = 0..M."""

    T: float
    M: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"number of time steps must be a positive integer, got {self.M!r}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"final time must be positive, got {self.T!r}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def from_step(cls, T: float, tau: float) -> "TimeGrid":
        return cls(T, max(1, int(round(T / tau))))

    @property
    def tau(self) -> float:
        return self.T / self.M

    @property
    def levels(self) -> np.ndarray:
        # linspace pins t^M = T exactly
        return np.linspace(0.0, self.T, self.M + 1)

    def slab(self, n: int) -> tuple:
        """Bounds (t^{n-1}, t^n) of slab n = 1..M."""
        lv = self.levels
        return float(lv[n - 1]), float(lv[n])

    def slab_containing(self, t: float) -> int:
        """Slab n with t in (t^{n-1}, t^n]; t = 0 maps to slab 1."""
        n = int(np.searchsorted(self.levels, t, side="left"))
        return min(max(n, 1), self.M)

    def refined(self) -> "TimeGrid":
        return TimeGrid(self.T, 2 * self.M)


@dataclass(eq=False)
class SpaceTimeField:
    """Element of the piecewise-constant-in-time P1 space: row n-1 holds slab n."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.M:
            raise ValueError(f"expected {self.grid.M} slabs, got array of shape {self.values.shape}")

    @classmethod
    def zeros(cls, grid: TimeGrid, n_nodes: int) -> "SpaceTimeField":
        return cls(np.zeros((grid.M, n_nodes)), grid)

    @classmethod
    def from_nodal(cls, nodal: NodalField, grid: TimeGrid) -> "SpaceTimeField":
        return cls(np.tile(np.asarray(nodal, dtype=float), (grid.M, 1)), grid)

    @property
    def n_nodes(self) -> int:
        return int(self.values.shape[1])

    def slab(self, n: int) -> NodalField:
        return self.values[n - 1]

    def copy(self) -> "SpaceTimeField":
        return SpaceTimeField(self.values.copy(), self.grid)

    def _other(self, other):
        if isinstance(other, SpaceTimeField):
            if other.values.shape != self.values.shape:
                raise ValueError("space-time fields live on different discretizations")
            return other.values
        return other

    def __add__(self, other):
        return SpaceTimeField(self.values + self._other(other), self.grid)

    def __sub__(self, other):
        return SpaceTimeField(self.values - self._other(other), self.grid)

    def __mul__(self, scalar):
        return SpaceTimeField(self.values * float(scalar), self.grid)

    __rmul__ = __mul__
    __radd__ = __add__

    def __neg__(self):
        return SpaceTimeField(-self.values, self.grid)

    def __truediv__(self, scalar):
        return SpaceTimeField(self.values / float(scalar), self.grid)


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------
@dataclass
class CoefficientSet:
    """
    Data of the parabolic problem: u_t - div(A grad u) + b u = f, A grad u . n + sigma u = g, u(0) = q.
    `a_lower` is the declared ellipticity constant checked by sampling.
    """

    A: Union[MatrixField, list, float] = 1.0
    b: FieldLike = 0.0
    sigma: FieldLike = 0.0
    g: FieldLike = 0.0
    q: FieldLike = 0.0
    a_lower: float = 1e-12

    def __post_init__(self):
        self.A = MatrixField.coerce(self.A)
        self.b = ScalarField.coerce(self.b)
        self.sigma = ScalarField.coerce(self.sigma)
        self.g = ScalarField.coerce(self.g)
        self.q = ScalarField.coerce(self.q)
        if not self.a_lower > 0:
            raise CoefficientError(f"ellipticity constant must be positive, got {self.a_lower!r}")

    @property
    def stationary(self) -> bool:
        """Operator coefficients do not depend on t (one system matrix serves all steps)."""
        return self.A.steady and self.b.steady and self.sigma.steady


def check_coefficients(mesh: Mesh, coeffs: CoefficientSet, t: float) -> None:
    """Sample A, b at centroids and sigma at boundary midpoints; raise CoefficientError on violation."""
    c = mesh.centroids
    A = coeffs.A(c[:, 0], c[:, 1], t)
    if not np.allclose(A[..., 0, 1], A[..., 1, 0], rtol=1e-12, atol=1e-14):
        raise CoefficientError(f"A is not symmetric at t={t:g}")
    lam = np.linalg.eigvalsh(A).min() if len(A) else np.inf
    if not np.isfinite(lam) or lam < coeffs.a_lower:
        raise CoefficientError(
            f"A is not uniformly elliptic at t={t:g}: smallest eigenvalue {lam:.6g} < {coeffs.a_lower:g}")
    b = coeffs.b(c[:, 0], c[:, 1], t)
    if not np.all(np.isfinite(b)) or b.min() < 0:
        raise CoefficientError(f"b must be finite and nonnegative (min {b.min():.6g} at t={t:g})")
    mid = _edge_midpoints(mesh, mesh.boundary_edges)
    s = coeffs.sigma(mid[:, 0], mid[:, 1], t)
    if not np.all(np.isfinite(s)) or s.min() < 0:
        raise CoefficientError(f"sigma must be finite and nonnegative (min {s.min():.6g} at t={t:g})")


# ---------------------------------------------------------------------------
# element geometry
# ---------------------------------------------------------------------------
def _gradients(mesh: Mesh):
    """Barycentric gradients (T, 3, 2) and areas (T,)."""
    p = mesh.nodes[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
    G = np.stack([-(g1 + g2), g1, g2], axis=1)
    return G, 0.5 * det


def _edge_midpoints(mesh: Mesh, edges: np.ndarray) -> np.ndarray:
    return 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])


def _edge_lengths(mesh: Mesh, edges: np.ndarray) -> np.ndarray:
    d = mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]]
    return np.hypot(d[:, 0], d[:, 1])


def _scatter(conn: np.ndarray, local: np.ndarray, n: int) -> SparseSymMatrix:
    """Sum element matrices local[e] (k x k) into an n x n CSR matrix."""
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).ravel()
    cols = np.tile(conn, (1, k)).ravel()
    return sps.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------
def assemble_mass(mesh: Mesh) -> SparseSymMatrix:
    """M_ij = (phi_i, phi_j)_{L2(Omega)}, exact for P1."""
    area = mesh.areas
    local = area[:, None, None] * _P1_MASS[None]
    return _scatter(mesh.triangles, local, mesh.n_nodes)


def _edge_matrix(mesh: Mesh, edges: np.ndarray, weight: np.ndarray) -> SparseSymMatrix:
    length = _edge_lengths(mesh, edges)
    local = (weight * length)[:, None, None] * _EDGE_MASS[None]
    return _scatter(edges, local, mesh.n_nodes)


def assemble_operator(mesh: Mesh, coeffs: CoefficientSet, t: float) -> SparseSymMatrix:
    """
    K_ij = a^n(phi_j, phi_i) with coefficients frozen at time t: diffusion and reaction use
    the element centroid, the Robin term the edge midpoint on all of the boundary.
    """
    check_coefficients(mesh, coeffs, t)
    G, area = _gradients(mesh)
    c = mesh.centroids
    A = coeffs.A(c[:, 0], c[:, 1], t)
    local = area[:, None, None] * np.einsum("tik,tkl,tjl->tij", G, A, G)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    b = coeffs.b(c[:, 0], c[:, 1], t)
    local += (b * area)[:, None, None] * _P1_MASS[None]
    K = _scatter(mesh.triangles, local, mesh.n_nodes)

    edges = mesh.boundary_edges
    mid = _edge_midpoints(mesh, edges)
    sigma = coeffs.sigma(mid[:, 0], mid[:, 1], t)
    if np.any(sigma != 0.0):
        K = K + _edge_matrix(mesh, edges, sigma)
    app_logger.debug("assemble_operator t=%.6g nodes=%d nnz=%d", t, mesh.n_nodes, K.nnz)
    return K.tocsr()


def assemble_boundary_mass(mesh: Mesh, spec: Optional[Union[BoundarySpec, str]] = None) -> SparseSymMatrix:
    """(B_Gamma)_ij = (phi_i, phi_j)_{L2(Gamma)}; zero rows off Gamma."""
    if spec is not None:
        mesh = tag_boundary(mesh, spec)
    if not mesh.gamma.any():
        raise MeshError("observation boundary is empty")
    edges = mesh.gamma_edges
    return _edge_matrix(mesh, edges, np.ones(len(edges)))


# ---------------------------------------------------------------------------
# load vectors
# ---------------------------------------------------------------------------
def assemble_load(mesh: Mesh, fbar: NodalField, mass: Optional[SparseSymMatrix] = None) -> np.ndarray:
    """(fbar, phi_i)_{L2(Omega)} for a P1 field, i.e. M @ fbar."""
    fbar = np.asarray(fbar, dtype=float)
    if fbar.shape != (mesh.n_nodes,):
        raise ValueError(f"field has {fbar.shape} values, mesh has {mesh.n_nodes} nodes")
    mass = assemble_mass(mesh) if mass is None else mass
    return mass @ fbar


def assemble_boundary_load(mesh: Mesh, g: FieldLike, t: float = 0.0) -> np.ndarray:
    """(g(., t), phi_i)_{L2(dOmega)} with g taken at edge midpoints."""
    g = ScalarField.coerce(g)
    edges = mesh.boundary_edges
    mid = _edge_midpoints(mesh, edges)
    w = g(mid[:, 0], mid[:, 1], t) * _edge_lengths(mesh, edges) * 0.5
    return np.bincount(edges.ravel(), weights=np.repeat(w, 2), minlength=mesh.n_nodes)


def element_load(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """(v, phi_i)_{L2(Omega)} for a field constant per triangle."""
    w = np.asarray(values, dtype=float) * mesh.areas / 3.0
    return np.bincount(mesh.triangles.ravel(), weights=np.repeat(w, 3), minlength=mesh.n_nodes)


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------
def interpolate_nodal(mesh: Mesh, field: FieldLike, t: Optional[float] = None) -> NodalField:
    """Nodal interpolant of `field` (at time t when given)."""
    field = ScalarField.coerce(field)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    values = field(x, y, 0.0 if t is None else t)
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{field!r} is not finite at every node (t={t})")
    return values


def slab_average(field: FieldLike, grid: TimeGrid, mesh: Mesh) -> SpaceTimeField:
    """
    Nodal values of the slab means (1/tau) int_{t^{n-1}}^{t^n} f dt. Uses the field's exact
    `slab_mean` when it has one, one evaluation for steady fields, and 2-point Gauss otherwise.
    """
    field = ScalarField.coerce(field)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    if field.steady and field.slab_mean is None:
        return SpaceTimeField.from_nodal(interpolate_nodal(mesh, field), grid)
    out = np.empty((grid.M, mesh.n_nodes))
    for n in range(1, grid.M + 1):
        t0, t1 = grid.slab(n)
        if field.slab_mean is not None:
            out[n - 1] = np.broadcast_to(field.slab_mean(x, y, t0, t1), x.shape)
        else:
            out[n - 1] = 0.5 * sum(field(x, y, t0 + s * (t1 - t0)) for s in _GAUSS_T)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{field!r} has non-finite slab averages")
    return SpaceTimeField(out, grid)


# ---------------------------------------------------------------------------
# space-time pairings
# ---------------------------------------------------------------------------
def spacetime_inner(a: Union[SpaceTimeField, np.ndarray], b: Union[SpaceTimeField, np.ndarray],
                    matrix: SparseSymMatrix, tau: float) -> float:
    """sum_n tau * a^n . (matrix @ b^n); with the mass matrix this is the L2(Omega_T) pairing."""
    av = a.values if isinstance(a, SpaceTimeField) else np.asarray(a)
    bv = b.values if isinstance(b, SpaceTimeField) else np.asarray(b)
    return float(tau * np.sum(av * (matrix @ bv.T).T))


def spacetime_norm(a: Union[SpaceTimeField, np.ndarray], matrix: SparseSymMatrix, tau: float) -> float:
    return math.sqrt(max(spacetime_inner(a, a, matrix, tau), 0.0))
