from __future__ import annotations
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from srcid.config import settings

Expression = Union[float, str]
MatrixExpression = Union[float, str, List[List[Expression]]]

SCENARIO_NAMES = ("time_dependent", "space_dependent", "general", "source_condition", "custom")


class ExperimentBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: Literal["time_dependent", "space_dependent", "general", "source_condition", "custom"]
    # time_dependent: sine | hat | step
    variant: Optional[str] = None
    # informed | zero | exact | given | number | expression
    prior: Optional[Expression] = None
    inverse_crime: bool = False
    output_dir: Optional[str] = None
    label: Optional[str] = None


class ProblemBlock(BaseModel):
    """Custom problem data; with a named scenario, fields set here override the scenario's."""

    model_config = ConfigDict(extra="forbid")

    bounds: Tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    T: float = Field(default=1.0, gt=0)
    A: MatrixExpression = 1.0
    a_lower: float = Field(default=1e-12, gt=0)
    b: Expression = 0.0
    sigma: Expression = 0.0
    g: Expression = 0.0
    q: Expression = 0.0
    source: Optional[Expression] = None
    source_sampling: Literal["nodal", "centroid"] = "nodal"
    # flux data of the source-condition generator; the exact source is then F(w)
    w: Optional[Expression] = None
    gamma: Union[str, List[str]] = "all"
    probes: List[Tuple[float, float]] = Field(default_factory=lambda: [(-0.1, -0.5), (0.5, 0.6)])
    probe_time: Optional[float] = None

    @field_validator("bounds")
    @classmethod
    def _bounds(cls, v):
        x0, x1, y0, y1 = v
        if not (x1 > x0 and y1 > y0):
            raise ValueError("bounds must be (x0, x1, y0, y1) with x0 < x1 and y0 < y1")
        return v


class NumericBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    h1: float = Field(default=0.8, gt=0)
    levels: Union[int, List[int]] = 4
    tau_factor: float = Field(default=0.25, gt=0)
    rho_factor: float = Field(default=0.01, gt=0)
    delta_factor: float = Field(default=0.5, ge=0)
    # absolute values win over the couplings
    tau: Optional[float] = Field(default=None, gt=0)
    rho: Optional[float] = Field(default=None, gt=0)
    delta: Optional[float] = Field(default=None, ge=0)
    tau_a: float = Field(default_factory=lambda: settings.tau_a, ge=0)
    tau_r: float = Field(default_factory=lambda: settings.tau_r, ge=0)
    k_max: int = Field(default_factory=lambda: settings.k_max, ge=1)
    seed: int = Field(default_factory=lambda: settings.seed, ge=0)

    @field_validator("levels")
    @classmethod
    def _levels(cls, v):
        if isinstance(v, int):
            if v < 1:
                raise ValueError("levels must be >= 1")
            return v
        if not v or any(l < 1 for l in v):
            raise ValueError("levels must be positive integers")
        if list(v) != sorted(set(v)):
            raise ValueError("levels must be strictly increasing")
        return v

    @model_validator(mode="after")
    def _tolerances(self):
        if self.tau_a == 0 and self.tau_r == 0:
            raise ValueError("tau_a and tau_r cannot both be zero")
        return self

    @property
    def level_list(self) -> List[int]:
        return list(range(1, self.levels + 1)) if isinstance(self.levels, int) else list(self.levels)

    def level_parameters(self, level: int) -> dict:
        """Nominal h and the coupled tau, rho, delta of one refinement level."""
        h = self.h1 / 2 ** (level - 1)
        return {
            "level": level,
            "h": h,
            "tau": self.tau if self.tau is not None else self.tau_factor * h,
            "rho": self.rho if self.rho is not None else self.rho_factor * h,
            "delta": self.delta if self.delta is not None else self.delta_factor * h * h,
            "seed": self.seed + level,
        }


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentBlock
    problem: Optional[ProblemBlock] = None
    numeric: NumericBlock = Field(default_factory=NumericBlock)

    @model_validator(mode="after")
    def _custom_needs_problem(self):
        if self.experiment.scenario == "custom":
            if self.problem is None or (self.problem.source is None and self.problem.w is None):
                raise ValueError("a custom scenario needs [problem] with a source or w")
        return self

    @property
    def name(self) -> str:
        exp = self.experiment
        if exp.label:
            return exp.label
        return f"{exp.scenario}_{exp.variant}" if exp.variant else exp.scenario

    def problem_overrides(self) -> dict:
        return self.problem.model_dump(exclude_unset=True) if self.problem is not None else {}
