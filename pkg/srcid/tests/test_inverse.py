import numpy as np
import pytest

from srcid.errors import ConfigError, SolverError
from srcid.services.assembly import SpaceTimeField, spacetime_inner
from srcid.services.experiments import toy_problem
from srcid.services.inverse import (
    STOP_CONVERGED,
    STOP_INITIAL,
    STOP_MAX_ITER,
    InverseConfig,
    InverseProblem,
    cg_minimize,
    evaluate_cost,
    evaluate_gradient,
    gradient_check,
    optimality_residual,
    pr_beta,
    step_size,
)
from srcid.services.pde import BoundaryObservation
from srcid.tests.oracles import dense_minimizer, dense_state_map


def _random(problem, rng, scale=1.0) -> SpaceTimeField:
    shape = (problem.disc.grid.M, problem.disc.n_nodes)
    return SpaceTimeField(scale * rng.standard_normal(shape), problem.disc.grid)


def _consistent(problem, f_star: SpaceTimeField, **kw) -> InverseProblem:
    """Noise-free data generated by f_star, with f_star as the prior."""
    disc = problem.disc
    z = BoundaryObservation.from_trajectory(disc.forward(f_star), disc.mesh.gamma_nodes)
    rho = kw.pop("rho", problem.rho)
    f0 = kw.pop("f0", SpaceTimeField.zeros(disc.grid, disc.n_nodes))
    config = InverseConfig(rho=rho, f_star=f_star, f0=f0, **kw)
    return InverseProblem(disc, z, config)


@pytest.fixture
def toy():
    problem, f_true = toy_problem(h=1.5, M=4, seed=3)
    assert problem.disc.n_nodes == 9
    return problem


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------
def test_cost_vanishes_at_consistent_prior(toy, rng):
    f = _random(toy, rng)
    problem = _consistent(toy, f)
    assert evaluate_cost(f, problem) == pytest.approx(0.0, abs=1e-20)
    assert optimality_residual(f, problem) == pytest.approx(0.0, abs=1e-20)
    d = _random(toy, rng)
    assert step_size(f, d, problem) == 0.0


def test_regularization_term(toy):
    grid, n = toy.disc.grid, toy.disc.n_nodes
    config = InverseConfig(rho=0.01, f_star=SpaceTimeField.zeros(grid, n), f0=SpaceTimeField.zeros(grid, n))
    problem = toy.with_config(config)
    one = SpaceTimeField.from_nodal(np.ones(n), grid)
    misfit = toy.disc.boundary_misfit(problem.state(one), problem.observation)
    assert problem.cost(one) - misfit == pytest.approx(0.04, rel=1e-12)


def test_cost_is_strictly_convex(toy, rng):
    for _ in range(5):
        f1, f2 = _random(toy, rng), _random(toy, rng)
        mid = 0.5 * (f1 + f2)
        assert toy.cost(mid) < 0.5 * (toy.cost(f1) + toy.cost(f2))


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------
def test_zero_residual_gradient_is_regularization_only(toy, rng):
    f_star = _random(toy, rng)
    problem = _consistent(toy, f_star)
    # the data are consistent with f_star, so the gradient at f_star is zero ...
    assert not evaluate_gradient(f_star, problem).values.any()
    # ... and with data generated by f the misfit part vanishes at f
    f = _random(toy, rng)
    z = BoundaryObservation.from_trajectory(toy.disc.forward(f), toy.disc.mesh.gamma_nodes)
    shifted = InverseProblem(toy.disc, z, problem.config)
    np.testing.assert_allclose(shifted.gradient(f).values, (2 * problem.rho * (f - f_star)).values, rtol=1e-14)


@pytest.mark.parametrize("seed", [1, 2])
def test_gradient_matches_finite_differences(seed):
    problem, _ = toy_problem(h=1.5, M=4, seed=seed)
    rng = np.random.default_rng(seed)
    f = _random(problem, rng)
    errors = gradient_check(problem, f, [_random(problem, rng) for _ in range(5)], eps=1e-5)
    assert len(errors) == 5
    assert max(errors) <= 1e-6


def test_gradient_is_the_riesz_representative(rng):
    problem, _ = toy_problem(h=1.5, M=2, seed=5, rho=0.1)
    U0, S, Bbig, Mbig, Z = dense_state_map(problem)
    f = _random(problem, rng)
    fv = f.values.ravel()
    euclid = 2 * S.T @ Bbig @ (U0 + S @ fv - Z) + 2 * problem.rho * Mbig @ (fv - problem.f_star.values.ravel())
    riesz = np.linalg.solve(Mbig, euclid)
    np.testing.assert_allclose(problem.gradient(f).values.ravel(), riesz, rtol=1e-8, atol=1e-10)


def test_optimality_residual_identity(toy, rng):
    for _ in range(3):
        f = _random(toy, rng)
        expected = toy.norm(toy.gradient(f)) / (2 * toy.rho)
        assert toy.optimality_residual(f) == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# line search and Polak-Ribiere
# ---------------------------------------------------------------------------
def test_step_size_minimizes_along_direction(toy, rng):
    for _ in range(3):
        f, d = _random(toy, rng), _random(toy, rng)
        alpha = toy.step_size(f, d)
        best = toy.cost(f + alpha * d)
        assert toy.cost(f + (alpha + 0.01) * d) >= best
        assert toy.cost(f + (alpha - 0.01) * d) >= best


def test_steepest_descent_step_matches_dense_quadratic():
    problem, _ = toy_problem(h=1.5, M=4, seed=7)
    U0, S, Bbig, Mbig, Z = dense_state_map(problem)
    f0 = problem.config.f0
    d = -problem.gradient(f0)
    fv, dv = f0.values.ravel(), d.values.ravel()
    fs = problem.f_star.values.ravel()
    Sd = S @ dv
    num = Sd @ Bbig @ (U0 + S @ fv - Z) + problem.rho * dv @ Mbig @ (fv - fs)
    den = Sd @ Bbig @ Sd + problem.rho * dv @ Mbig @ dv
    assert problem.step_size(f0, d) == pytest.approx(-num / den, rel=1e-10)


def test_zero_direction_is_an_error(toy):
    zero = SpaceTimeField.zeros(toy.disc.grid, toy.disc.n_nodes)
    with pytest.raises(SolverError):
        toy.step_size(zero, zero)


def test_pr_beta_examples(toy, rng):
    mass = toy.mass
    g = _random(toy, rng)
    assert pr_beta(g, g, mass) == pytest.approx(0.0, abs=1e-15)
    unit = g / toy.norm(g)
    assert pr_beta(2.0 * unit, unit, mass) == pytest.approx(2.0, rel=1e-13)

    # g_k orthogonal to g_k - g_km1
    e = _random(toy, rng)
    w = _random(toy, rng)
    v = w - (toy.inner(e, w) / toy.inner(e, e)) * e
    assert pr_beta(e, e + v, mass) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(SolverError):
        pr_beta(g, SpaceTimeField.zeros(toy.disc.grid, toy.disc.n_nodes), mass)


# ---------------------------------------------------------------------------
# conjugate gradients
# ---------------------------------------------------------------------------
def test_initial_guess_already_optimal(toy, rng):
    f = _random(toy, rng)
    problem = _consistent(toy, f, f0=f.copy())
    report = cg_minimize(problem.config, problem)
    assert report.stop_reason == STOP_INITIAL
    assert report.iterations == 0
    np.testing.assert_array_equal(report.minimizer.values, f.values)


def test_cg_descends_and_reaches_dense_minimizer():
    problem, _ = toy_problem(h=1.5, M=2, seed=11, rho=0.1)
    config = InverseConfig(rho=problem.rho, f_star=problem.f_star, f0=problem.config.f0, tau_a=1e-12,
                           tau_r=1e-10, k_max=200)
    report = cg_minimize(config, problem)
    assert report.stop_reason == STOP_CONVERGED
    assert report.converged

    costs = np.array(report.costs)
    assert np.all(np.diff(costs) <= 1e-12 * costs[0])

    f_dense = dense_minimizer(problem)
    scale = np.abs(f_dense).max()
    np.testing.assert_allclose(report.minimizer.values.ravel(), f_dense, rtol=1e-6, atol=1e-7 * scale)
    exact = SpaceTimeField(f_dense.reshape(problem.f_star.values.shape), problem.disc.grid)
    assert problem.optimality_residual(exact) <= 1e-9 * max(1.0, problem.norm(exact))

    assert report.optimality <= 1.01 * report.threshold / (2 * problem.rho)


def test_cg_stops_at_k_max(toy):
    config = InverseConfig(rho=toy.rho, f_star=toy.f_star, f0=toy.config.f0, tau_a=0.0, tau_r=1e-14, k_max=2)
    report = cg_minimize(config, toy)
    assert report.stop_reason == STOP_MAX_ITER
    assert report.iterations == 2
    assert not report.converged
    assert len(report.history) == 3


def test_noise_free_recovery_with_exact_prior(toy, rng):
    f_true = _random(toy, rng)
    problem = _consistent(toy, f_true, tau_r=1e-10)
    report = cg_minimize(problem.config, problem)
    err = problem.norm(report.minimizer - f_true)
    assert err <= 10 * problem.rho * problem.norm(f_true)


def test_minimizer_tracks_prior_as_rho_grows():
    problem, _ = toy_problem(h=1.5, M=2, seed=13)
    distances = []
    for rho in (1e-3, 1e-2, 1e-1, 1.0):
        p = problem.with_config(InverseConfig(rho=rho, f_star=problem.f_star, f0=problem.config.f0))
        f_rho = SpaceTimeField(dense_minimizer(p).reshape(problem.f_star.values.shape), problem.disc.grid)
        distances.append(p.norm(f_rho - p.f_star))
    assert all(a > b for a, b in zip(distances, distances[1:])), distances


def test_trace_export(toy, tmp_path):
    report = cg_minimize(toy.config, toy)
    frame = report.to_frame()
    assert list(frame.columns) == ["k", "J", "grad_norm", "alpha", "beta"]
    assert len(frame) == report.iterations + 1
    assert report.grad0_norm == pytest.approx(report.grad_norms[0])
    path = report.save_trace(tmp_path / "trace.csv")
    assert path.read_text().splitlines()[0] == "k,J,grad_norm,alpha,beta"


@pytest.mark.parametrize("kw", [dict(rho=-1.0), dict(rho=0.0), dict(tau_a=0.0, tau_r=0.0), dict(k_max=0),
                                dict(tau_a=-1.0)])
def test_config_validation(toy, kw):
    grid, n = toy.disc.grid, toy.disc.n_nodes
    data = dict(rho=0.01, f_star=SpaceTimeField.zeros(grid, n), f0=SpaceTimeField.zeros(grid, n))
    data.update(kw)
    with pytest.raises(ConfigError):
        InverseConfig(**data)


def test_spacetime_inner_uses_mass_matrix(toy, rng):
    a, b = _random(toy, rng), _random(toy, rng)
    expected = sum(toy.disc.tau * a.values[n] @ (toy.mass @ b.values[n]) for n in range(toy.disc.grid.M))
    assert toy.inner(a, b) == pytest.approx(expected, rel=1e-12)
    assert spacetime_inner(a, b, toy.mass, toy.disc.tau) == pytest.approx(toy.inner(b, a), rel=1e-12)
