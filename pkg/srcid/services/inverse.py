from __future__ import annotations
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from srcid.config import settings
from srcid.errors import ConfigError, OutputError, SolverError
from srcid.logger import logger as app_logger, attach_to_logger_names
from srcid.services.assembly import SpaceTimeField, SparseSymMatrix, spacetime_inner
from srcid.services.pde import BoundaryObservation, CrankNicolson, Trajectory

attach_to_logger_names(["srcid.services.inverse"])

STOP_CONVERGED = "converged"
STOP_INITIAL = "initial_guess"
STOP_MAX_ITER = "max_iterations"


@dataclass
class InverseConfig:
    """Tikhonov weight, prior, initial iterate and CG stopping rule."""

    rho: float
    f_star: SpaceTimeField
    f0: SpaceTimeField
    tau_a: float = field(default_factory=lambda: settings.tau_a)
    tau_r: float = field(default_factory=lambda: settings.tau_r)
    k_max: int = field(default_factory=lambda: settings.k_max)

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ConfigError(f"rho must be positive, got {self.rho!r}", key="rho")
        if self.tau_a < 0 or self.tau_r < 0:
            raise ConfigError("stopping tolerances must be nonnegative", key="tau_a")
        if self.tau_a == 0 and self.tau_r == 0:
            raise ConfigError("tau_a and tau_r cannot both be zero", key="tau_r")
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise ConfigError(f"k_max must be a positive integer, got {self.k_max!r}", key="k_max")
        self.k_max = int(self.k_max)
        if self.f_star.values.shape != self.f0.values.shape:
            raise ConfigError("prior and initial iterate live on different discretizations")


@dataclass(eq=False)
class InverseProblem:
    """
    Discrete regularized output least squares problem

        J(f) = sum_n tau |U^n(f) - z^n|^2_Gamma + rho |f - f*|^2_{L2(Omega_T)}
    """

    disc: CrankNicolson
    observation: BoundaryObservation
    config: InverseConfig

    def __post_init__(self):
        if self.observation.grid.M != self.disc.grid.M:
            raise ValueError("observation and discretization use different time grids")

    @property
    def rho(self) -> float:
        return self.config.rho

    @property
    def f_star(self) -> SpaceTimeField:
        return self.config.f_star

    @property
    def mass(self) -> SparseSymMatrix:
        return self.disc.mass

    def with_config(self, config: InverseConfig) -> "InverseProblem":
        return replace(self, config=config)

    def inner(self, a: SpaceTimeField, b: SpaceTimeField) -> float:
        return spacetime_inner(a, b, self.disc.mass, self.disc.tau)

    def norm(self, a: SpaceTimeField) -> float:
        return math.sqrt(max(self.inner(a, a), 0.0))

    def state(self, f: SpaceTimeField) -> Trajectory:
        return self.disc.forward(f)

    def cost(self, f: SpaceTimeField, state: Optional[Trajectory] = None) -> float:
        state = self.state(f) if state is None else state
        diff = f - self.f_star
        return self.disc.boundary_misfit(state, self.observation) + self.rho * self.inner(diff, diff)

    def adjoint_slabs(self, f: SpaceTimeField, state: Optional[Trajectory] = None) -> SpaceTimeField:
        """Slab n holds P^{n-1}(f)."""
        state = self.state(f) if state is None else state
        return self.disc.adjoint(state, self.observation).backward_slabs()

    def gradient(self, f: SpaceTimeField, state: Optional[Trajectory] = None) -> SpaceTimeField:
        """L2(Omega_T) Riesz representative: slab n = 2 P^{n-1} + 2 rho (f^n - f*^n)."""
        P = self.adjoint_slabs(f, state)
        return 2.0 * P + 2.0 * self.rho * (f - self.f_star)

    def step_size(self, f: SpaceTimeField, d: SpaceTimeField, state: Optional[Trajectory] = None,
                  direction_state: Optional[Trajectory] = None) -> float:
        """Exact minimizer of alpha -> J(f + alpha d)."""
        d_norm2 = self.inner(d, d)
        if d_norm2 <= 0.0:
            raise SolverError("line search along a zero direction")
        state = self.state(f) if state is None else state
        dU = self.disc.sensitivity(d) if direction_state is None else direction_state
        B = self.disc.boundary_mass
        tau = self.disc.tau
        residual = state.steps - self.observation.full(self.disc.n_nodes)
        sens = dU.steps
        numerator = tau * np.sum(sens * (B @ residual.T).T) + self.rho * self.inner(d, f - self.f_star)
        denominator = tau * np.sum(sens * (B @ sens.T).T) + self.rho * d_norm2
        if not denominator > 0.0:
            raise SolverError(f"line search denominator {denominator:.3e} is not positive")
        return float(-numerator / denominator)

    def optimality_residual(self, f: SpaceTimeField, state: Optional[Trajectory] = None) -> float:
        """|f - f* + P/rho|_{L2(Omega_T)}: zero exactly at the minimizer."""
        P = self.adjoint_slabs(f, state)
        return self.norm(f - self.f_star + P / self.rho)


# module-level forms of the problem operations
def evaluate_cost(f: SpaceTimeField, problem: InverseProblem) -> float:
    return problem.cost(f)


def evaluate_gradient(f: SpaceTimeField, problem: InverseProblem) -> SpaceTimeField:
    return problem.gradient(f)


def step_size(f_k: SpaceTimeField, d_k: SpaceTimeField, problem: InverseProblem) -> float:
    return problem.step_size(f_k, d_k)


def optimality_residual(f: SpaceTimeField, problem: InverseProblem) -> float:
    return problem.optimality_residual(f)


def pr_beta(g_k: SpaceTimeField, g_km1: SpaceTimeField, mass: SparseSymMatrix) -> float:
    """Polak-Ribiere coefficient in the L2(Omega_T) pairing; not floored."""
    tau = g_km1.grid.tau
    denom = spacetime_inner(g_km1, g_km1, mass, tau)
    if denom <= 0.0:
        raise SolverError("Polak-Ribiere coefficient with a zero previous gradient")
    return spacetime_inner(g_k, g_k - g_km1, mass, tau) / denom


@dataclass
class CGReport:
    minimizer: SpaceTimeField
    iterations: int
    stop_reason: str
    history: List[dict]
    trajectory: Optional[Trajectory] = None
    grad0_norm: float = 0.0
    threshold: float = 0.0
    optimality: float = float("nan")
    restarts: int = 0
    elapsed: float = 0.0

    @property
    def converged(self) -> bool:
        return self.stop_reason in (STOP_CONVERGED, STOP_INITIAL)

    @property
    def costs(self) -> List[float]:
        return [h["J"] for h in self.history]

    @property
    def grad_norms(self) -> List[float]:
        return [h["grad_norm"] for h in self.history]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["k", "J", "grad_norm", "alpha", "beta"])

    def save_trace(self, path: Union[str, Path]) -> Path:
        p = Path(path)
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(p, index=False, float_format="%.17g")
        except OSError as exc:
            raise OutputError(f"cannot write optimization trace to {p}: {exc}") from exc
        return p


def cg_minimize(config: InverseConfig, problem: InverseProblem) -> CGReport:
    """
    Conjugate gradients with exact line search and Polak-Ribiere directions (beta floored
    at 0). Stops when |grad J(f_k)| <= tau_a + tau_r |grad J(f_0)| or after k_max iterations.
    """
    if problem.config is not config:
        problem = problem.with_config(config)
    started = time.perf_counter()
    mass = problem.mass

    f = config.f0.copy()
    U = problem.state(f)
    g = problem.gradient(f, U)
    g_norm = problem.norm(g)
    g0_norm = g_norm
    threshold = config.tau_a + config.tau_r * g0_norm
    J = problem.cost(f, U)
    history = [{"k": 0, "J": J, "grad_norm": g_norm, "alpha": float("nan"), "beta": float("nan")}]
    app_logger.info("cg_minimize start J=%.6e |grad|=%.3e threshold=%.3e rho=%.3g k_max=%d",
                    J, g_norm, threshold, config.rho, config.k_max)

    restarts = 0
    iterations = 0
    if g_norm <= threshold:
        stop = STOP_INITIAL
    else:
        stop = STOP_MAX_ITER
        d = -g
        for k in range(1, config.k_max + 1):
            dU = problem.disc.sensitivity(d)
            alpha = problem.step_size(f, d, U, dU)
            f = f + alpha * d
            # the state is affine in f
            U = Trajectory(U.values + alpha * dU.values, U.grid)
            g_new = problem.gradient(f, U)
            J = problem.cost(f, U)
            g_norm = problem.norm(g_new)
            beta_raw = pr_beta(g_new, g, mass)
            beta = max(beta_raw, 0.0)
            if beta_raw < 0.0:
                restarts += 1
            iterations = k
            history.append({"k": k, "J": J, "grad_norm": g_norm, "alpha": alpha, "beta": beta})
            app_logger.debug("cg k=%d J=%.10e |grad|=%.3e alpha=%.4e beta=%.4e", k, J, g_norm, alpha, beta)
            if g_norm <= threshold:
                stop = STOP_CONVERGED
                break
            d = -g_new + beta * d
            g = g_new

    trajectory = problem.state(f)
    report = CGReport(minimizer=f, iterations=iterations, stop_reason=stop, history=history,
                      trajectory=trajectory, grad0_norm=g0_norm, threshold=threshold,
                      optimality=problem.optimality_residual(f, trajectory), restarts=restarts,
                      elapsed=time.perf_counter() - started)
    log = app_logger.info if report.converged else app_logger.warning
    log("cg_minimize %s after %d iterations J=%.6e |grad|=%.3e restarts=%d (%.2fs)",
        stop, iterations, J, g_norm, restarts, report.elapsed)
    return report


def gradient_check(problem: InverseProblem, f: SpaceTimeField, directions, eps: float = 1e-5) -> List[float]:
    """
    Relative error between (grad J(f), xi) and the central difference
    (J(f + eps xi) - J(f - eps xi)) / (2 eps), one entry per direction.
    """
    g = problem.gradient(f)
    out = []
    for xi in directions:
        adjoint = problem.inner(g, xi)
        fd = (problem.cost(f + eps * xi) - problem.cost(f - eps * xi)) / (2.0 * eps)
        out.append(abs(adjoint - fd) / max(abs(fd), abs(adjoint), 1e-300))
    app_logger.debug("gradient_check eps=%.1e max rel error %.3e", eps, max(out) if out else 0.0)
    return out
