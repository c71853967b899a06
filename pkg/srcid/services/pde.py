"""
Crank-Nicolson Galerkin time stepping on P1 elements.

All four solvers (forward state, sensitivity, adjoint, source condition) run through one
`CrankNicolson` object holding the mass matrices and the per-level factorizations of
A^n = M/tau + K^n/2. The forward recursion is

    A^n U^n = C^n U^{n-1} + M f^n + G^n,            C^n = M/tau - K^n/2,

and the backward one is its exact transpose:

    A^n P^{n-1} = C^{n+1} P^n + B_Gamma r^n,        P^M = 0.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Union

import numpy as np
import pandas as pd
import scipy.sparse as sps
from scipy.sparse.linalg import splu

from srcid.config import settings
from srcid.errors import ConvergenceError, IndefiniteMatrixError, OutputError
from srcid.logger import logger as app_logger, attach_to_logger_names
from srcid.services.assembly import (
    CoefficientSet,
    NodalField,
    SpaceTimeField,
    SparseSymMatrix,
    TimeGrid,
    assemble_boundary_load,
    assemble_boundary_mass,
    assemble_mass,
    assemble_operator,
    interpolate_nodal,
    slab_average,
)
from srcid.services.expressions import FieldLike, ScalarField
from srcid.services.mesh import BoundarySpec, Mesh, tag_boundary

attach_to_logger_names(["srcid.services.pde"])


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------
class SPDFactor:
    """
    Sparse LU with symmetric ordering and diagonal pivots only, i.e. an LDL^T in disguise.
    A non-positive pivot means the matrix is not SPD.
    """

    def __init__(self, matrix: SparseSymMatrix, *, rtol: Optional[float] = None):
        A = sps.csc_matrix(matrix, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        scale = abs(A).max() if A.nnz else 0.0
        if A.nnz and abs(A - A.T).max() > 1e-12 * scale:
            raise IndefiniteMatrixError("matrix is not symmetric")
        self.matrix = A
        self.rtol = settings.solver_rtol if rtol is None else rtol
        try:
            self._lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                            options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise IndefiniteMatrixError(f"factorization failed: {exc}") from exc
        pivots = self._lu.U.diagonal()
        if not np.array_equal(self._lu.perm_r, self._lu.perm_c) or np.any(pivots <= 0.0):
            raise IndefiniteMatrixError(
                f"matrix is not positive definite (smallest pivot {pivots.min():.3e})")

    @property
    def shape(self):
        return self.matrix.shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        b = np.asarray(rhs, dtype=float)
        if b.shape[0] != self.matrix.shape[0]:
            raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {self.matrix.shape[0]}")
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b)
        x = self._lu.solve(b)
        r = b - self.matrix @ x
        if np.linalg.norm(r) > self.rtol * bnorm:
            # one step of iterative refinement
            x = x + self._lu.solve(r)
            r = b - self.matrix @ x
            if np.linalg.norm(r) > self.rtol * bnorm:
                raise ConvergenceError(
                    f"linear solve residual {np.linalg.norm(r) / bnorm:.3e} above {self.rtol:.1e}")
        return x


def solve_spd(matrix: SparseSymMatrix, rhs: np.ndarray, *, rtol: Optional[float] = None) -> np.ndarray:
    """Solve matrix @ x = rhs for SPD `matrix` with relative residual <= rtol."""
    return SPDFactor(matrix, rtol=rtol).solve(rhs)


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class Trajectory:
    """Nodal fields at levels 0..M; row n holds U^n (or P^n)."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.M + 1:
            raise ValueError(f"expected {self.grid.M + 1} levels, got array of shape {self.values.shape}")

    def __getitem__(self, n: int) -> NodalField:
        return self.values[n]

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return int(self.values.shape[1])

    @property
    def steps(self) -> np.ndarray:
        """Levels 1..M, the values paired with slabs 1..M."""
        return self.values[1:]

    def backward_slabs(self) -> SpaceTimeField:
        """Slab n holds level n-1 (levels 0..M-1): the layout of adjoint-type trajectories."""
        return SpaceTimeField(self.values[:-1].copy(), self.grid)

    def restrict(self, node_map: np.ndarray, grid: Optional[TimeGrid] = None) -> "Trajectory":
        """Values at the given nodes, subsampled onto a coarser grid whose levels are a subset."""
        grid = grid or self.grid
        if self.grid.M % grid.M:
            raise ValueError(f"grid with M={grid.M} is not nested in M={self.grid.M}")
        stride = self.grid.M // grid.M
        return Trajectory(self.values[::stride][:, node_map], grid)

    def to_frame(self) -> pd.DataFrame:
        M1, N = self.values.shape
        return pd.DataFrame({
            "n": np.repeat(np.arange(M1), N),
            "t": np.repeat(self.grid.levels, N),
            "node": np.tile(np.arange(N), M1),
            "value": self.values.ravel(),
        })

    def save_csv(self, path: Union[str, Path]) -> Path:
        p = Path(path)
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(p, index=False, float_format="%.17g")
        except OSError as exc:
            raise OutputError(f"cannot write trajectory to {p}: {exc}") from exc
        return p


@dataclass(eq=False)
class BoundaryObservation:
    """Slab-constant observation z on Gamma: values (M, len(nodes))."""

    values: np.ndarray
    nodes: np.ndarray
    grid: TimeGrid
    delta: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        if self.values.shape != (self.grid.M, len(self.nodes)):
            raise ValueError(f"observation shape {self.values.shape} does not match "
                             f"({self.grid.M}, {len(self.nodes)})")

    @classmethod
    def from_trajectory(cls, state: Trajectory, nodes: np.ndarray, **kwargs) -> "BoundaryObservation":
        """Noise-free trace of levels 1..M at the Gamma nodes."""
        nodes = np.asarray(nodes, dtype=np.int64)
        return cls(state.steps[:, nodes].copy(), nodes, state.grid, **kwargs)

    def full(self, n_nodes: int) -> np.ndarray:
        """(M, n_nodes) array, zero off Gamma."""
        out = np.zeros((self.grid.M, n_nodes))
        out[:, self.nodes] = self.values
        return out


# ---------------------------------------------------------------------------
# Crank-Nicolson core
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class CrankNicolson:
    """
    Shared time-stepping kernel for one (mesh, grid, coefficients) triple.
    `mesh` must carry the observation boundary in its gamma flags.
    """

    mesh: Mesh
    grid: TimeGrid
    coeffs: CoefficientSet
    mass: SparseSymMatrix = field(init=False, repr=False)
    boundary_mass: SparseSymMatrix = field(init=False, repr=False)
    _operators: Dict[int, SparseSymMatrix] = field(default_factory=dict, init=False, repr=False)
    _factors: Dict[int, SPDFactor] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.mass = assemble_mass(self.mesh)
        self.boundary_mass = assemble_boundary_mass(self.mesh)
        self.q_h = interpolate_nodal(self.mesh, self.coeffs.q, 0.0)
        self._boundary_loads: Dict[int, np.ndarray] = {}

    @classmethod
    def build(cls, mesh: Mesh, grid: TimeGrid, coeffs: CoefficientSet,
              spec: Optional[Union[BoundarySpec, str]] = None) -> "CrankNicolson":
        if spec is not None:
            mesh = tag_boundary(mesh, spec)
        return cls(mesh, grid, coeffs)

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def tau(self) -> float:
        return self.grid.tau

    def _key(self, n: int) -> int:
        return 0 if self.coeffs.stationary else n

    def operator(self, n: int) -> SparseSymMatrix:
        """K^n, coefficients frozen at t^n."""
        key = self._key(n)
        if key not in self._operators:
            self._operators[key] = assemble_operator(self.mesh, self.coeffs, float(self.grid.levels[n]))
        return self._operators[key]

    def factor(self, n: int) -> SPDFactor:
        key = self._key(n)
        if key not in self._factors:
            lhs = self.mass / self.tau + 0.5 * self.operator(n)
            self._factors[key] = SPDFactor(lhs)
            app_logger.debug("factored CN matrix level=%d nodes=%d nnz=%d",
                             n, self.n_nodes, lhs.nnz)
        return self._factors[key]

    def explicit(self, n: int, v: np.ndarray) -> np.ndarray:
        """C^n v = (M/tau - K^n/2) v."""
        return (self.mass @ v) / self.tau - 0.5 * (self.operator(n) @ v)

    def boundary_load(self, n: int) -> np.ndarray:
        g = self.coeffs.g
        key = 0 if g.steady else n
        if key not in self._boundary_loads:
            self._boundary_loads[key] = assemble_boundary_load(self.mesh, g, float(self.grid.levels[n]))
        return self._boundary_loads[key]

    # -- recursions ---------------------------------------------------------
    def march_forward(self, u0: np.ndarray, load: Callable[[int], np.ndarray]) -> Trajectory:
        M = self.grid.M
        U = np.empty((M + 1, self.n_nodes))
        U[0] = u0
        for n in range(1, M + 1):
            U[n] = self.factor(n).solve(self.explicit(n, U[n - 1]) + load(n))
        return Trajectory(U, self.grid)

    def march_backward(self, source: Callable[[int], np.ndarray]) -> Trajectory:
        """P^M = 0; A^n P^{n-1} = C^{n+1} P^n + source(n) for n = M..1."""
        M = self.grid.M
        P = np.zeros((M + 1, self.n_nodes))
        for n in range(M, 0, -1):
            rhs = source(n)
            if n < M:
                rhs = rhs + self.explicit(n + 1, P[n])
            P[n - 1] = self.factor(n).solve(rhs)
        return Trajectory(P, self.grid)

    # -- solvers ------------------------------------------------------------
    def forward(self, f: SpaceTimeField) -> Trajectory:
        self._check(f)
        load_f = (self.mass @ f.values.T).T
        return self.march_forward(self.q_h, lambda n: load_f[n - 1] + self.boundary_load(n))

    def sensitivity(self, xi: SpaceTimeField) -> Trajectory:
        self._check(xi)
        load = (self.mass @ xi.values.T).T
        return self.march_forward(np.zeros(self.n_nodes), lambda n: load[n - 1])

    def adjoint(self, state: Trajectory, z: BoundaryObservation) -> Trajectory:
        if state.values.shape != (self.grid.M + 1, self.n_nodes):
            raise ValueError("state trajectory does not match the discretization")
        residual = state.steps - z.full(self.n_nodes)
        return self.march_backward(lambda n: self.boundary_mass @ residual[n - 1])

    def backward_from_slabs(self, w: SpaceTimeField) -> Trajectory:
        self._check(w)
        return self.march_backward(lambda n: self.boundary_mass @ w.values[n - 1])

    def observe(self, state: Trajectory) -> np.ndarray:
        """Levels 1..M restricted to the Gamma nodes."""
        return state.steps[:, self.mesh.gamma_nodes]

    def boundary_misfit(self, state: Trajectory, z: BoundaryObservation) -> float:
        """sum_n tau (U^n - z^n)^T B_Gamma (U^n - z^n)."""
        r = state.steps - z.full(self.n_nodes)
        return float(self.tau * np.sum(r * (self.boundary_mass @ r.T).T))

    def _check(self, f: SpaceTimeField) -> None:
        if f.values.shape != (self.grid.M, self.n_nodes):
            raise ValueError(f"space-time field of shape {f.values.shape} does not match "
                             f"({self.grid.M}, {self.n_nodes})")


# ---------------------------------------------------------------------------
# module-level entry points
# ---------------------------------------------------------------------------
def _kernel(mesh, grid, coeffs, spec, disc) -> CrankNicolson:
    if disc is not None:
        return disc
    if spec is None and not mesh.gamma.any():
        spec = "all"
    return CrankNicolson.build(mesh, grid, coeffs, spec)


def solve_forward(mesh: Mesh, grid: TimeGrid, coeffs: CoefficientSet, f: SpaceTimeField,
                  spec: Optional[Union[BoundarySpec, str]] = None, *,
                  disc: Optional[CrankNicolson] = None) -> Trajectory:
    """State U(f): U^0 = q_h, then one CN step per slab."""
    return _kernel(mesh, grid, coeffs, spec, disc).forward(f)


def solve_sensitivity(mesh: Mesh, grid: TimeGrid, coeffs: CoefficientSet, xi: SpaceTimeField, *,
                      disc: Optional[CrankNicolson] = None) -> Trajectory:
    """Linearized state: zero initial value, zero boundary data, load xi."""
    return _kernel(mesh, grid, coeffs, None, disc).sensitivity(xi)


def solve_adjoint(mesh: Mesh, grid: TimeGrid, coeffs: CoefficientSet, state: Trajectory,
                  z: BoundaryObservation, spec: Optional[Union[BoundarySpec, str]] = None, *,
                  disc: Optional[CrankNicolson] = None) -> Trajectory:
    """Backward adjoint P driven by the Gamma residual U^n - z^n."""
    return _kernel(mesh, grid, coeffs, spec, disc).adjoint(state, z)


def solve_source_condition(mesh: Mesh, grid: TimeGrid, coeffs: CoefficientSet, w: FieldLike,
                           spec: Optional[Union[BoundarySpec, str]] = None, *,
                           disc: Optional[CrankNicolson] = None) -> Trajectory:
    """
    Backward problem with flux data w on Gamma x (0, T) and zero final value. The recursion is
    the adjoint one with the residual replaced by the slab means of w.
    """
    kernel = _kernel(mesh, grid, coeffs, spec, disc)
    w_bar = slab_average(ScalarField.coerce(w), grid, kernel.mesh)
    F = kernel.backward_from_slabs(w_bar)
    app_logger.debug("source condition max|F|=%.6g", float(np.abs(F.values).max()))
    return F
