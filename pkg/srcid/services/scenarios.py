"""
Benchmark scenarios on Omega = (-1, 1)^2, T = 1, and the builder turning an ExperimentSpec
into a runnable Scenario.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from srcid.errors import ConfigError
from srcid.logger import logger as app_logger, attach_to_logger_names
from srcid.schemas import ExperimentSpec, NumericBlock
from srcid.services.assembly import (
    CoefficientSet,
    SpaceTimeField,
    TimeGrid,
    element_load,
    interpolate_nodal,
    slab_average,
    spacetime_inner,
)
from srcid.services.expressions import ScalarExpression, ScalarField, check_evaluable
from srcid.services.mesh import BoundarySpec, Mesh, build_rect_mesh, refine, subdivisions_for_h, tag_boundary
from srcid.services.pde import CrankNicolson, Trajectory, solve_source_condition

attach_to_logger_names(["srcid.services.scenarios"])

SQUARE = (-1.0, 1.0, -1.0, 1.0)
A_STANDARD = [[3.0, 1.0], [1.0, 2.0]]
# smallest eigenvalue of A_STANDARD is (5 - sqrt(5))/2 ~ 1.38
A_STANDARD_LOWER = 1.0
PROBES = ((-0.1, -0.5), (0.5, 0.6))

PRIOR_RULES = ("informed", "zero", "exact", "given")
INFORMED_WEIGHT = 0.2

# mean-EOC reference windows (center, half width) for `scenario --check`
CHECK_WINDOWS: Dict[str, Dict[str, Tuple[float, float]]] = {
    "space_dependent": {"state_omega": (2.07, 0.4), "source": (1.44, 0.6)},
    "source_condition": {"state_omega": (2.05, 0.4), "state_sigma": (2.05, 0.4), "source": (1.71, 0.6)},
}

GENERAL_SOURCE = ("(x^2-1)^2*(y^2-1)^2 - t*(x^2-1)^2*(12*y^2-4) - t*(12*x^2-4)*(y^2-1)^2")
GENERAL_STATE = "t*(x^2-1)^2*(y^2-1)^2"
SOURCE_CONDITION_PRIOR = "(x^2+y)*t"


def _hat_antiderivative(t):
    t = np.asarray(t, dtype=float)
    return np.where(t <= 0.5, 0.5 * t * t, t - 0.5 * t * t - 0.25)


def _hat_mean(x, y, t0, t1):
    return (_hat_antiderivative(t1) - _hat_antiderivative(t0)) / (t1 - t0)


def _step_mean(x, y, t0, t1):
    return 0.5 * (max(t1 - 0.5, 0.0) - max(t0 - 0.5, 0.0)) / (t1 - t0)


def _with_mean(source: str, mean) -> ScalarField:
    expr = ScalarExpression(source)
    return ScalarField(expr, steady=False, slab_mean=mean, label=source)


TIME_VARIANTS = {
    "sine": lambda: ScalarField.from_expression("(2*t-1)^2*sin(2*t-1)"),
    "hat": lambda: _with_mean("0.5 - abs(0.5 - t)", _hat_mean),
    "step": lambda: _with_mean("0.5*heaviside(t - 0.5)", _step_mean),
}


@dataclass(eq=False)
class Scenario:
    """Problem data, exact source, prior rule and observation part of one experiment."""

    name: str
    coeffs: CoefficientSet
    source: Optional[ScalarField] = None
    gamma: BoundarySpec = field(default_factory=BoundarySpec)
    bounds: Tuple[float, float, float, float] = SQUARE
    T: float = 1.0
    prior: Union[str, float, ScalarField] = "informed"
    given_prior: Optional[ScalarField] = None
    w: Optional[ScalarField] = None
    source_sampling: str = "nodal"
    exact_state: Optional[ScalarField] = None
    probes: Tuple[Tuple[float, float], ...] = PROBES
    probe_time: Optional[float] = None
    inverse_crime: bool = False
    numeric: NumericBlock = field(default_factory=NumericBlock)
    check_windows: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    description: str = ""
    # JSON payload the scenario was built from; lets worker processes rebuild it
    payload: Optional[dict] = None

    def __post_init__(self):
        if self.source is None and self.w is None:
            raise ConfigError(f"scenario {self.name!r} defines neither a source nor w")
        if self.source_sampling not in ("nodal", "centroid"):
            raise ConfigError(f"unknown source sampling {self.source_sampling!r}", key="problem.source_sampling")
        self.gamma = BoundarySpec.parse(self.gamma)

    # -- discretization ---------------------------------------------------
    def level_mesh(self, level: int) -> Mesh:
        """Level 1 meshes for the nominal h1; every further level is one uniform refinement."""
        mesh = build_rect_mesh(self.bounds, subdivisions_for_h(self.bounds, self.numeric.h1))
        for _ in range(level - 1):
            mesh = refine(mesh)
        return tag_boundary(mesh, self.gamma)

    def level_grid(self, level: int) -> TimeGrid:
        return TimeGrid.from_step(self.T, self.numeric.level_parameters(level)["tau"])

    def discretization(self, level: int) -> CrankNicolson:
        return CrankNicolson(self.level_mesh(level), self.level_grid(level), self.coeffs)

    # -- data ----------------------------------------------------------------
    def exact_source(self, disc: CrankNicolson) -> SpaceTimeField:
        """The exact source as a slab-wise nodal field on `disc`."""
        if self.w is not None:
            prior = self.given_prior if self.given_prior is not None else ScalarField.constant(0.0)
            F = solve_source_condition(disc.mesh, disc.grid, disc.coeffs, self.w, disc=disc)
            return F.backward_slabs() + slab_average(prior, disc.grid, disc.mesh)
        if self.source_sampling == "centroid":
            return centroid_sampled(self.source, disc.grid, disc.mesh)
        return slab_average(self.source, disc.grid, disc.mesh)

    def exact_trajectory(self, disc: CrankNicolson) -> Optional[Trajectory]:
        """Nodal interpolant of the analytic state at every time level, or None without one."""
        if self.exact_state is None:
            return None
        values = [interpolate_nodal(disc.mesh, self.exact_state, t) for t in disc.grid.levels]
        return Trajectory(np.array(values), disc.grid)

    def prior_field(
self, disc: CrankNicolson, f_exact: SpaceTimeField) -> SpaceTimeField:
        rule = self.prior
        if isinstance(rule, str) and rule in PRIOR_RULES:
            if rule == "zero":
                return SpaceTimeField.zeros(disc.grid, disc.n_nodes)
            if rule == "exact":
                return f_exact.copy()
            if rule == "given":
                if self.given_prior is None:
                    raise ConfigError(f"scenario {self.name!r} has no given prior", key="experiment.prior")
                return slab_average(self.given_prior, disc.grid, disc.mesh)
            f_mean = spacetime_mean(f_exact, disc)
            return f_exact + INFORMED_WEIGHT * (f_exact - f_mean)
        return slab_average(ScalarField.coerce(rule), disc.grid, disc.mesh)

    def with_overrides(self, **changes) -> "Scenario":
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data.update(changes)
        return Scenario(**data)


def spacetime_mean(f: SpaceTimeField, disc: CrankNicolson) -> float:
    """Mean of f over Omega_T."""
    ones = np.ones(disc.n_nodes)
    total = spacetime_inner(f, SpaceTimeField.from_nodal(ones, f.grid), disc.mass, f.grid.tau)
    return total / (disc.mesh.area * f.grid.T)


def centroid_sampled(source: ScalarField, grid: TimeGrid, mesh: Mesh) -> SpaceTimeField:
    """
    Evaluate `source` at element centroids (2-point Gauss per slab in time) and give every node
    the area-weighted mean of its elements.
    """
    source = ScalarField.coerce(source)
    c = mesh.centroids
    weight = element_load(mesh, np.ones(mesh.n_triangles))
    gauss = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))
    out = np.empty((grid.M, mesh.n_nodes))
    for n in range(1, grid.M + 1):
        t0, t1 = grid.slab(n)
        if source.steady and n > 1:
            out[n - 1] = out[0]
            continue
        vals = 0.5 * sum(source(c[:, 0], c[:, 1], t0 + s * (t1 - t0)) for s in gauss)
        out[n - 1] = element_load(mesh, vals) / weight
    return SpaceTimeField(out, grid)


# ---------------------------------------------------------------------------
# catalogue
# ---------------------------------------------------------------------------
def standard_coefficients(**kw) -> CoefficientSet:
    data = dict(A=A_STANDARD, b=1.0, sigma=1.0, g=0.4, q=0.4, a_lower=A_STANDARD_LOWER)
    data.update(kw)
    return CoefficientSet(**data)


def time_dependent(variant: str = "sine", **kw) -> Scenario:
    """f = f(t), observed on the bottom side only."""
    if variant not in TIME_VARIANTS:
        raise ConfigError(f"unknown time_dependent variant {variant!r}; "
                          f"choose from {', '.join(TIME_VARIANTS)}", key="experiment.variant")
    return Scenario(name=f"time_dependent_{variant}", coeffs=standard_coefficients(),
                    source=TIME_VARIANTS[variant](), gamma=BoundarySpec(("bottom",)),
                    description=f"time-dependent source ({variant}), Gamma = bottom side", **kw)


def space_dependent(**kw) -> Scenario:
    """f = 0.5 on the disc of radius 0.5 around the origin, 0 elsewhere, for all t."""
    return Scenario(name="space_dependent", coeffs=standard_coefficients(),
                    source=ScalarField.from_expression("0.5*disc(x, y, 0, 0, 0.5)"),
                    source_sampling="centroid", check_windows=CHECK_WINDOWS["space_dependent"],
                    description="space-dependent disc source, Gamma = whole boundary", **kw)


def general(**kw) -> Scenario:
    """A = I, b = sigma = 0 and the exact state t (x^2-1)^2 (y^2-1)^2; q = g = 0."""
    return Scenario(name="general", coeffs=CoefficientSet(A=1.0, b=0.0, sigma=0.0, g=0.0, q=0.0, a_lower=1.0),
                    source=ScalarField.from_expression(GENERAL_SOURCE),
                    exact_state=ScalarField.from_expression(GENERAL_STATE),
                    description="general source f1(x, y, t), Gamma = whole boundary", **kw)


def source_condition(w: float = 0.2, **kw) -> Scenario:
    """Exact source F(w) + (x^2+y) t with F the backward problem driven by flux w on Gamma."""
    kw.setdefault("prior", "given")
    return Scenario(name="source_condition", coeffs=standard_coefficients(), w=ScalarField.coerce(w),
                    given_prior=ScalarField.from_expression(SOURCE_CONDITION_PRIOR),
                    check_windows=CHECK_WINDOWS["source_condition"],
                    description="source satisfying the source condition, Gamma = whole boundary", **kw)


CATALOGUE = {
    "time_dependent": time_dependent,
    "space_dependent": space_dependent,
    "general": general,
    "source_condition": source_condition,
}


def _coerce_expression(value, key: str, bounds, T) -> ScalarField:
    try:
        field_ = ScalarField.coerce(value)
        if isinstance(value, str):
            check_evaluable(ScalarExpression(value), bounds, T)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=key) from exc
    return field_


def build_scenario(spec: ExperimentSpec) -> Scenario:
    """Resolve a named scenario (with overrides) or a custom problem into a Scenario."""
    exp = spec.experiment
    over = spec.problem_overrides()
    kw = dict(numeric=spec.numeric, inverse_crime=exp.inverse_crime,
              payload=spec.model_dump(mode="json", exclude_unset=True))
    if exp.prior is not None:
        kw["prior"] = exp.prior

    if exp.scenario == "custom":
        scenario = Scenario(name=spec.name, coeffs=CoefficientSet(a_lower=1e-12),
                            source=ScalarField.constant(0.0), **kw)
        over = spec.problem.model_dump()
        over.update(spec.problem_overrides())
    else:
        factory = CATALOGUE[exp.scenario]
        if exp.scenario == "time_dependent":
            scenario = factory(exp.variant or "sine", **kw)
        elif exp.variant is not None:
            raise ConfigError(f"scenario {exp.scenario!r} has no variants", key="experiment.variant")
        else:
            scenario = factory(**kw)
    if exp.label:
        scenario = scenario.with_overrides(name=exp.label)
    scenario = _apply_problem(scenario, over)
    if isinstance(scenario.prior, str) and scenario.prior not in PRIOR_RULES:
        _coerce_expression(scenario.prior, "experiment.prior", scenario.bounds, scenario.T)
    app_logger.debug("built scenario %s (gamma=%s, prior=%r)", scenario.name, scenario.gamma, scenario.prior)
    return scenario


def _apply_problem(scenario: Scenario, over: dict) -> Scenario:
    if not over:
        return scenario
    bounds = tuple(over.get("bounds", scenario.bounds))
    T = over.get("T", scenario.T)
    changes = {"bounds": bounds, "T": T}

    coeff_keys = ("A", "b", "sigma", "g", "q", "a_lower")
    if any(k in over for k in coeff_keys):
        c = scenario.coeffs
        data = dict(A=c.A, b=c.b, sigma=c.sigma, g=c.g, q=c.q, a_lower=c.a_lower)
        for k in coeff_keys:
            if k not in over:
                continue
            if k == "A":
                data[k] = over[k]
            elif k == "a_lower":
                data[k] = over[k]
            else:
                data[k] = _coerce_expression(over[k], f"problem.{k}", bounds, T)
        try:
            changes["coeffs"] = CoefficientSet(**data)
        except (ConfigError, ValueError) as exc:
            raise ConfigError(str(exc), key="problem.A") from exc
    if over.get("source") is not None:
        changes["source"] = _coerce_expression(over["source"], "problem.source", bounds, T)
        changes["w"] = None
    if over.get("w") is not None:
        changes["w"] = _coerce_expression(over["w"], "problem.w", bounds, T)
    if "source_sampling" in over:
        changes["source_sampling"] = over["source_sampling"]
    if "gamma" in over:
        try:
            changes["gamma"] = BoundarySpec.parse(over["gamma"])
        except ValueError as exc:
            raise ConfigError(str(exc), key="problem.gamma") from exc
    # the analytic state belongs to the catalogue data only
    if "coeffs" in changes or "source" in changes or "w" in changes or bounds != scenario.bounds or T != scenario.T:
        changes["exact_state"] = None
    if "probes" in over:
        changes["probes"] = tuple(tuple(p) for p in over["probes"])
    if over.get("probe_time") is not None:
        changes["probe_time"] = over["probe_time"]
    return scenario.with_overrides(**changes)
