from __future__ import annotations
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from srcid.broker.workers import run_levels, run_levels_inline
from srcid.errors import MeshError
from srcid.logger import logger as app_logger, attach_to_logger_names
from srcid.services.assembly import (
    CoefficientSet,
    SpaceTimeField,
    SparseSymMatrix,
    TimeGrid,
    assemble_boundary_mass,
    spacetime_norm,
)
from srcid.services.inverse import CGReport, InverseConfig, InverseProblem, cg_minimize
from srcid.services.mesh import (
    Mesh,
    build_rect_mesh,
    closest_node,
    nested_node_map,
    refine,
    subdivisions_for_h,
    tag_boundary,
)
from srcid.services.pde import BoundaryObservation, CrankNicolson, Trajectory
from srcid.services.scenarios import SQUARE, Scenario, standard_coefficients

attach_to_logger_names(["srcid.services.experiments"])

ERROR_COLUMNS = ("state_omega", "state_sigma", "source")
STATUS_OK = "ok"
STATUS_FAILED = "failed"


# ---------------------------------------------------------------------------
# observation data
# ---------------------------------------------------------------------------
def sigma_norm(values: np.ndarray, nodes: np.ndarray, boundary_mass: SparseSymMatrix, tau: float) -> float:
    """Discrete L2(Sigma) norm of slab-constant values (M, len(nodes)) on the Gamma nodes."""
    B = boundary_mass[nodes][:, nodes]
    return math.sqrt(max(tau * float(np.sum(values * (B @ values.T).T)), 0.0))


def synthesize_observation(state: Trajectory, mesh: Mesh, delta: float, seed: Optional[int] = None, *,
                           boundary_mass: Optional[SparseSymMatrix] = None) -> BoundaryObservation:
    """
    z = trace(state) + c_w * z_rand on Gamma, z_rand uniform on (0, 1) per (slab, Gamma node),
    with c_w chosen so that |z - trace|_{L2(Sigma)} = delta.
    """
    if not delta >= 0:
        raise ValueError(f"noise level must be nonnegative, got {delta!r}")
    nodes = mesh.gamma_nodes
    obs = BoundaryObservation.from_trajectory(state, nodes, delta=float(delta), seed=seed)
    if delta == 0:
        return obs
    if boundary_mass is None:
        boundary_mass = assemble_boundary_mass(mesh)
    rng = np.random.default_rng(seed)
    tau = state.grid.tau
    while True:
        z_rand = rng.uniform(0.0, 1.0, size=obs.values.shape)
        norm = sigma_norm(z_rand, nodes, boundary_mass, tau)
        if norm > 0.0:
            break
    obs.values = obs.values + (delta / norm) * z_rand
    return obs


# ---------------------------------------------------------------------------
# errors and convergence orders
# ---------------------------------------------------------------------------
def error_norms(f_rec: SpaceTimeField, f_exact: SpaceTimeField, u_rec: Trajectory, u_exact: Trajectory,
                disc: CrankNicolson) -> Tuple[float, float, float]:
    """(|u - u_rec|_{L2(Omega_T)}, |u - u_rec|_{L2(Sigma)}, |f - f_rec|_{L2(Omega_T)})."""
    tau = disc.tau
    e_u = u_exact.steps - u_rec.steps
    state_omega = spacetime_norm(e_u, disc.mass, tau)
    state_sigma = spacetime_norm(e_u, disc.boundary_mass, tau)
    source = spacetime_norm(f_exact - f_rec, disc.mass, tau)
    return state_omega, state_sigma, source


def compute_eoc(errors: Sequence[float], h: Optional[Sequence[float]] = None) -> Tuple[List[float], float]:
    """
    EOC_l = log2(e_l / e_{l+1}) for successive halvings; with `h` given, log(e_l/e_{l+1}) / log(h_l/h_{l+1}).
    Returns the list of orders (one shorter than `errors`) and their mean.
    """
    e = np.asarray(errors, dtype=float)
    if e.size < 2:
        raise ValueError("at least two error values are needed")
    if np.any(~np.isfinite(e)) or np.any(e <= 0):
        raise ValueError(f"errors must be positive, got {list(errors)}")
    if h is None:
        orders = np.log2(e[:-1] / e[1:])
    else:
        hh = np.asarray(h, dtype=float)
        orders = np.log(e[:-1] / e[1:]) / np.log(hh[:-1] / hh[1:])
    orders = [float(v) for v in orders]
    return orders, float(np.mean(orders))


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------
def probe_point(values: Union[SpaceTimeField, Trajectory], mesh: Mesh, node: int, axis: str = "t",
                t: Optional[float] = None) -> pd.DataFrame:
    """
    Series through one node: value vs time (axis "t"), or value vs x / y along the mesh line
    through the node at time t (axis "x" / "y"). Columns: coordinate, value.
    """
    if not 0 <= node < mesh.n_nodes:
        raise MeshError(f"node {node} is not on the mesh")
    grid = values.grid
    slabs = isinstance(values, SpaceTimeField)
    data = values.values
    if axis == "t":
        coords = grid.levels[1:] if slabs else grid.levels
        return pd.DataFrame({"coordinate": coords, "value": data[:, node]})
    if axis not in ("x", "y"):
        raise ValueError(f"unknown probe axis {axis!r}")
    t = 0.5 * grid.T if t is None else t
    row = grid.slab_containing(t) - 1 if slabs else int(round(t / grid.tau))
    along, across = (0, 1) if axis == "x" else (1, 0)
    x0, x1, y0, y1 = mesh.bounds
    tol = 1e-9 * max(x1 - x0, y1 - y0, 1.0)
    on_line = np.flatnonzero(np.abs(mesh.nodes[:, across] - mesh.nodes[node, across]) <= tol)
    if len(on_line) < 2:
        raise MeshError(f"node {node} does not lie on a mesh line along {axis}")
    on_line = on_line[np.argsort(mesh.nodes[on_line, along], kind="stable")]
    return pd.DataFrame({"coordinate": mesh.nodes[on_line, along], "value": data[row, on_line]})


PROBE_COLUMNS = ["level", "quantity", "probe", "node", "axis", "coordinate", "exact", "recovered"]


def level_probes(scenario: Scenario, mesh: Mesh, f_exact: SpaceTimeField, f_rec: SpaceTimeField,
                 level: int, u_exact: Optional[Trajectory] = None, u_rec: Optional[Trajectory] = None) -> pd.DataFrame:
    """
    Exact and recovered series through the probe nodes: source and (when given) state along t at
    every probe, and along x and y through the first probe at the probe time.
    """
    frames = []
    t_mid = scenario.probe_time if scenario.probe_time is not None else 0.5 * scenario.T
    pairs = [("source", f_exact, f_rec)]
    if u_exact is not None and u_rec is not None:
        pairs.append(("state", u_exact, u_rec))
    for k, point in enumerate(scenario.probes, start=1):
        node = closest_node(mesh, point)
        axes = ("t", "x", "y") if k == 1 else ("t",)
        for quantity, exact, recovered in pairs:
            for axis in axes:
                try:
                    ex = probe_point(exact, mesh, node, axis, t_mid)
                    rec = probe_point(recovered, mesh, node, axis, t_mid)
                except MeshError as exc:
                    app_logger.warning("%s probe P%d along %s skipped: %s", quantity, k, axis, exc)
                    continue
                frames.append(pd.DataFrame({
                    "level": level, "quantity": quantity, "probe": f"P{k}", "node": node, "axis": axis,
                    "coordinate": ex["coordinate"], "exact": ex["value"], "recovered": rec["value"],
                }))
    if not frames:
        return pd.DataFrame(columns=PROBE_COLUMNS)
    return pd.concat(frames, ignore_index=True)


# ---------------------------------------------------------------------------
# levels and tables
# ---------------------------------------------------------------------------
@dataclass
class LevelResult:
    level: int
    h: float
    tau: float
    rho: float
    delta: float
    seed: int
    status: str = STATUS_OK
    error: Optional[str] = None
    h_mesh: float = float("nan")
    M: int = 0
    n_nodes: int = 0
    errors: Dict[str, float] = field(default_factory=dict)
    report: Optional[CGReport] = None
    probes: Optional[pd.DataFrame] = None
    elapsed: float = 0.0
    # status record of the run (queued/started/finished times, pid), see broker.workers
    job: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def row(self) -> dict:
        rep = self.report
        out = {
            "level": self.level, "h": self.h, "h_mesh": self.h_mesh, "tau": self.tau, "M": self.M,
            "nodes": self.n_nodes, "delta": self.delta, "rho": self.rho, "seed": self.seed,
        }
        for col in ERROR_COLUMNS:
            out[col] = self.errors.get(col, float("nan"))
        out.update({
            "iterations": rep.iterations if rep else 0,
            "stop_reason": rep.stop_reason if rep else "",
            "optimality": rep.optimality if rep else float("nan"),
            "status": self.status,
            "error": self.error or "",
        })
        return out


@dataclass
class EocTable:
    """Per-level errors with EOC between consecutive successful levels."""

    rows: List[LevelResult]
    eoc: Dict[str, List[Optional[float]]] = field(default_factory=dict)
    means: Dict[str, Optional[float]] = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.level)
        for col in ERROR_COLUMNS:
            orders: List[Optional[float]] = [None]
            for prev, cur in zip(self.rows, self.rows[1:]):
                e0, e1 = prev.errors.get(col), cur.errors.get(col)
                if prev.ok and cur.ok and e0 and e1 and e0 > 0 and e1 > 0:
                    (order,), _ = compute_eoc([e0, e1], [prev.h, cur.h])
                    orders.append(order)
                else:
                    orders.append(None)
            self.eoc[col] = orders
            defined = [v for v in orders if v is not None]
            self.means[col] = float(np.mean(defined)) if defined else None

    @property
    def failed(self) -> List[int]:
        return [r.level for r in self.rows if not r.ok]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.row() for r in self.rows])

    def eoc_frame(self) -> pd.DataFrame:
        data = [{"level": r.level, **{c: self.eoc[c][i] for c in ERROR_COLUMNS}} for i, r in enumerate(self.rows)]
        data.append({"level": "mean", **{c: self.means[c] for c in ERROR_COLUMNS}})
        return pd.DataFrame(data, columns=["level", *ERROR_COLUMNS])

    def check(self, windows: Dict[str, Tuple[float, float]]) -> List[str]:
        """Messages for every mean EOC outside its (center, half width) window."""
        problems = []
        for col, (center, width) in windows.items():
            mean = self.means.get(col)
            if mean is None:
                problems.append(f"{col}: no EOC available")
            elif abs(mean - center) > width:
                problems.append(f"{col}: mean EOC {mean:.4f} outside {center} +/- {width}")
        return problems


@dataclass
class ScenarioResult:
    scenario: str
    table: EocTable
    levels: List[LevelResult]
    elapsed: float = 0.0


def synthetic_state(scenario: Scenario, disc: CrankNicolson, f_exact: SpaceTimeField) -> Trajectory:
    """
    Exact state on the working discretization. With `inverse_crime` it is the working forward
    solve; a scenario with an analytic state uses its nodal interpolant; otherwise it is computed
    on one uniform refinement in space and time and restricted to the working nodes and levels.
    """
    if scenario.inverse_crime:
        return disc.forward(f_exact)
    analytic = scenario.exact_trajectory(disc)
    if analytic is not None:
        return analytic
    fine = CrankNicolson(refine(disc.mesh), disc.grid.refined(), disc.coeffs)
    u_fine = fine.forward(scenario.exact_source(fine))
    return u_fine.restrict(nested_node_map(fine.mesh, disc.mesh), disc.grid)


def run_level(scenario: Scenario, level: int) -> LevelResult:
    started = time.perf_counter()
    p = scenario.numeric.level_parameters(level)
    disc = scenario.discretization(level)
    mesh = disc.mesh
    # tau of the grid actually used: T / round(T / tau_nominal)
    result = LevelResult(level=level, h=p["h"], tau=disc.grid.tau, rho=p["rho"], delta=p["delta"], seed=p["seed"])
    result.h_mesh, result.M, result.n_nodes = mesh.h, disc.grid.M, mesh.n_nodes
    app_logger.info("%s level %d: h=%.4g nodes=%d M=%d rho=%.3g delta=%.3g",
                    scenario.name, level, p["h"], mesh.n_nodes, disc.grid.M, p["rho"], p["delta"])

    f_exact = scenario.exact_source(disc)
    u_exact = synthetic_state(scenario, disc, f_exact)
    z = synthesize_observation(u_exact, mesh, p["delta"], p["seed"], boundary_mass=disc.boundary_mass)

    num = scenario.numeric
    config = InverseConfig(rho=p["rho"], f_star=scenario.prior_field(disc, f_exact),
                           f0=SpaceTimeField.zeros(disc.grid, mesh.n_nodes),
                           tau_a=num.tau_a, tau_r=num.tau_r, k_max=num.k_max)
    report = cg_minimize(config, InverseProblem(disc, z, config))

    norms = error_norms(report.minimizer, f_exact, report.trajectory, u_exact, disc)
    result.errors = dict(zip(ERROR_COLUMNS, norms))
    result.report = report
    result.probes = level_probes(scenario, mesh, f_exact, report.minimizer, level, u_exact, report.trajectory)
    result.elapsed = time.perf_counter() - started
    app_logger.info("%s level %d done: |u-u_rec|=%.4e |u-u_rec|_S=%.4e |f-f_rec|=%.4e (%d it, %.1fs)",
                    scenario.name, level, *norms, report.iterations, result.elapsed)
    return result


def failed_level(scenario: Scenario, level: int, exc: BaseException) -> LevelResult:
    """Row for a level that did not finish, with the couplings it would have used."""
    p = scenario.numeric.level_parameters(level)
    try:
        tau = scenario.level_grid(level).tau
    except ValueError:
        tau = p["tau"]
    return LevelResult(level=level, h=p["h"], tau=tau, rho=p["rho"], delta=p["delta"],
                       seed=p["seed"], status=STATUS_FAILED, error=f"{type(exc).__name__}: {exc}")


def run_level_safe(scenario: Scenario, level: int) -> LevelResult:
    """run_level, with any failure turned into a row marked failed."""
    try:
        return run_level(scenario, level)
    except Exception as exc:
        app_logger.exception("%s level %d failed: %s", scenario.name, level, exc)
        return failed_level(scenario, level, exc)


def run_scenario(scenario: Scenario, levels: Optional[Sequence[int]] = None, *, jobs: int = 1) -> ScenarioResult:
    """Run every level (in parallel worker processes when jobs > 1) and tabulate errors and EOC."""
    started = time.perf_counter()
    levels = list(levels) if levels is not None else scenario.numeric.level_list
    if jobs > 1 and len(levels) > 1 and scenario.payload is not None:
        results = run_levels(scenario.payload, levels, jobs=jobs)
    else:
        if jobs > 1 and scenario.payload is None:
            app_logger.warning("scenario %s was not built from a spec; running levels sequentially", scenario.name)
        results = run_levels_inline(scenario, levels)
    table = EocTable(results)
    elapsed = time.perf_counter() - started
    app_logger.info("%s finished %d level(s) in %.1fs; mean EOC %s; failed %s",
                    scenario.name, len(levels), elapsed,
                    {k: (round(v, 4) if v is not None else None) for k, v in table.means.items()},
                    table.failed or "none")
    return ScenarioResult(scenario=scenario.name, table=table, levels=table.rows, elapsed=elapsed)


def toy_problem(h: float = 1.5, M: int = 4, seed: int = 0, *, rho: float = 0.01,
                coeffs: Optional[CoefficientSet] = None, gamma="all", bounds=SQUARE, T: float = 1.0,
                delta: float = 0.0) -> Tuple[InverseProblem, SpaceTimeField]:
    """
    Small randomized instance on a structured mesh (h = 1.5 gives 9 nodes): data generated
    from a random source, random prior. Returns the problem and that source.
    """
    mesh = tag_boundary(build_rect_mesh(bounds, subdivisions_for_h(bounds, h)), gamma)
    grid = TimeGrid(T, M)
    disc = CrankNicolson(mesh, grid, coeffs if coeffs is not None else standard_coefficients())
    rng = np.random.default_rng(seed)
    shape = (grid.M, mesh.n_nodes)
    f_true = SpaceTimeField(rng.standard_normal(shape), grid)
    z = synthesize_observation(disc.forward(f_true), mesh, delta, seed, boundary_mass=disc.boundary_mass)
    config = InverseConfig(rho=rho, f_star=SpaceTimeField(0.1 * rng.standard_normal(shape), grid),
                           f0=SpaceTimeField.zeros(grid, mesh.n_nodes))
    return InverseProblem(disc, z, config), f_true
