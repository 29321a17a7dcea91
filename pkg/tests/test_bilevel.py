import csv

import numpy as np
import pytest

from tvic.bilevel import (
    ITERATION_CSV_HEADER,
    AdjointState,
    BfgsConfig,
    CostSpec,
    ReducedCost,
    SensitivitySystem,
    cost,
    cost_derivative,
    learn_parameters,
    reduced_gradient,
    solve_adjoint,
    solve_linearized,
    write_iteration_csv,
)
from tvic.denoise import SolverConfig, newton_jacobian, solve_lower_level
from tvic.experiment import NoiseSpec, add_noise, camera_image
from tvic.fidelity import FidelityParams, SmoothingParams
from tvic.grid import ImageGrid

SMOOTH = SmoothingParams(1e-10, 1e3)
TIGHT = SolverConfig(tol=1e-11, max_iter=100)


@pytest.fixture(scope="module")
def pair():
    clean = camera_image(32)
    return add_noise(clean, NoiseSpec(0.005, 0.1, seed=1)), clean


@pytest.fixture(scope="module")
def gaussian_pair():
    clean = camera_image(32)
    return add_noise(clean, NoiseSpec(0.005, 0.0, seed=1)), clean


def _inner(a, b, h):
    return float(np.sum(a * b) * h * h)


def test_cost_examples():
    ref = ImageGrid(np.array([[0.0]]), mesh_h=1.0)
    assert cost(ref.like([[0.5]]), CostSpec("l2", ref)) == pytest.approx(0.25)
    rng = np.random.default_rng(0)
    t = ImageGrid(rng.uniform(0, 1, (5, 5)))
    for kind in ("l2", "huber"):
        assert cost(t, CostSpec(kind, t)) == 0.0
        assert not np.any(cost_derivative(t, CostSpec(kind, t)).data)
    with pytest.raises(ValueError):
        CostSpec("tv", t)
    with pytest.raises(ValueError):
        cost(ImageGrid(np.zeros((4, 4))), CostSpec("l2", t))


@pytest.mark.parametrize("kind, rtol", [("l2", 1e-6), ("huber", 1e-4)])
def test_cost_derivative_matches_finite_differences(kind, rtol):
    rng = np.random.default_rng(3)
    ref = ImageGrid(rng.uniform(0, 1, (8, 8)))
    u = ref.like(rng.uniform(0, 1, ref.shape))
    spec = CostSpec(kind, ref, gamma=50.0)
    grad = cost_derivative(u, spec)
    for _ in range(5):
        d = rng.standard_normal(u.shape)
        t = 1e-4
        fd = (cost(u.like(u.data + t * d), spec) - cost(u.like(u.data - t * d), spec)) / (2 * t)
        assert _inner(grad.data, d, u.mesh_h) == pytest.approx(fd, rel=rtol)


@pytest.fixture(scope="module")
def solved(pair):
    noisy, clean = pair
    p = FidelityParams(20.0, 300.0, 1e3, 1e5)
    return noisy, clean, p, solve_lower_level(noisy, p, SMOOTH, TIGHT)


def test_sensitivity_operator_is_the_newton_jacobian(solved):
    noisy, _, p, st = solved
    sysm = SensitivitySystem(st, noisy, p, SMOOTH)
    jac = newton_jacobian(st, noisy, p, SMOOTH)
    assert abs(jac - jac.T).max() == 0.0
    rng = np.random.default_rng(1)
    b = rng.standard_normal(2 * noisy.size)
    xu, xv = sysm.solve(b[: noisy.size], b[noisy.size:])
    np.testing.assert_allclose(jac @ np.concatenate([xu, xv]), b, atol=1e-8 * np.abs(b).max())


def test_linearized_state_zero_and_linear(solved):
    noisy, _, p, st = solved
    z1, z2 = solve_linearized(st, noisy, p, SMOOTH, (0.0, 0.0))
    assert not np.any(z1.data) and not np.any(z2.data)
    a1, _ = solve_linearized(st, noisy, p, SMOOTH, (0.3, -1.2))
    b1, _ = solve_linearized(st, noisy, p, SMOOTH, (0.9, -3.6))
    np.testing.assert_allclose(b1.data, 3 * a1.data, rtol=1e-10, atol=1e-14)


def test_linearized_state_is_first_order(solved):
    noisy, _, p, st = solved
    theta = np.array([1.0, 15.0])
    z1, z2 = solve_linearized(st, noisy, p, SMOOTH, theta)
    errs = []
    ts = [1e-2, 1e-3, 1e-4, 1e-5]
    for t in ts:
        q = p.with_lambdas(p.lambda1 + t * theta[0], p.lambda2 + t * theta[1])
        s = solve_lower_level(noisy, q, SMOOTH, TIGHT, warm=st)
        errs.append(np.sqrt(np.sum((s.u.data - st.u.data - t * z1.data) ** 2)
                            + np.sum((s.v.data - st.v.data - t * z2.data) ** 2)))
    slope = np.polyfit(np.log(ts), np.log(errs), 1)[0]
    assert slope >= 1.5


@pytest.mark.parametrize("kind", ["l2", "huber"])
def test_adjoint_identity(solved, kind):
    noisy, clean, p, st = solved
    spec = CostSpec(kind, clean)
    adj = solve_adjoint(st, noisy, p, SMOOTH, spec)
    dF = cost_derivative(st.u, spec).data
    rng = np.random.default_rng(2)
    for _ in range(3):
        theta = rng.standard_normal(2)
        z1, _ = solve_linearized(st, noisy, p, SMOOTH, theta)
        lhs = _inner(dF, z1.data, noisy.mesh_h)
        rhs = theta @ reduced_gradient(st, adj, noisy, p, SMOOTH)
        assert lhs == pytest.approx(rhs, rel=1e-8)


def test_zero_adjoint_gives_zero_gradient(solved):
    noisy, _, p, st = solved
    zero = noisy.like(np.zeros(noisy.shape))
    np.testing.assert_array_equal(reduced_gradient(st, AdjointState(zero, zero), noisy, p, SMOOTH), [0.0, 0.0])
    adj = solve_adjoint(st, noisy, p, SMOOTH, CostSpec("l2", st.u))
    assert not np.any(adj.p1.data) and not np.any(adj.p2.data)
    with pytest.raises(ValueError):
        solve_adjoint(st, noisy, p, SMOOTH)


@pytest.mark.parametrize("kind", ["l2", "huber"])
def test_gradient_matches_finite_differences(pair, kind):
    noisy, clean = pair
    rc = ReducedCost(noisy, CostSpec(kind, clean), SMOOTH, TIGHT, box=(1e4, 1e5))
    for lam in [(5.0, 50.0), (150.0, 600.0)]:
        lam = np.array(lam)
        _, st = rc.value(lam)
        g = rc.gradient(lam, st)
        fd = np.empty(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = 1e-4 * (1 + abs(lam[i]))
            fd[i] = (rc.value(lam + e, st)[0] - rc.value(lam - e, st)[0]) / (2 * e[i])
        assert np.linalg.norm(g - fd) <= 1e-3 * np.linalg.norm(fd)


def test_bfgs_config_validation():
    with pytest.raises(ValueError):
        BfgsConfig(eta_armijo=1.0)
    with pytest.raises(ValueError):
        BfgsConfig(tol_outer=0.0)
    with pytest.raises(ValueError):
        BfgsConfig(box=(0.0, 1.0))
    with pytest.raises(ValueError):
        BfgsConfig(log_floor=1e9)


@pytest.fixture(scope="module")
def learned(gaussian_pair):
    noisy, clean = gaussian_pair
    return learn_parameters(noisy, CostSpec("l2", clean), SMOOTH, BfgsConfig(box=(1e3, 1e5)))


def test_learning_converges_to_interior_stationary_point(learned):
    r = learned
    assert r.converged and not r.line_search_failed
    assert 0 < r.lambda_opt[0] < 1e3 and 0 < r.lambda_opt[1] < 1e5
    assert np.linalg.norm(r.gradient * r.lambda_opt) <= 1e-6
    assert r.cost_history[-1] < r.cost_history[0]


def test_cost_history_monotone_and_armijo_logged(learned):
    assert np.all(np.diff(learned.cost_history) <= 0)
    assert len(learned.armijo_log) == len(learned.cost_history) - 1
    for row in learned.armijo_log:
        assert row["slope"] < 0
        assert row["cost_new"] - row["cost_old"] <= row["eta"] * row["slope"]


@pytest.mark.parametrize("log_scale", [True, False])
def test_complementarity_at_an_active_bound(gaussian_pair, log_scale):
    noisy, clean = gaussian_pair
    box = (50.0, 1e5)
    r = learn_parameters(noisy, CostSpec("l2", clean), SMOOTH,
                         BfgsConfig(box=box, initial_lambda=(10.0, 100.0), log_scale=log_scale, max_outer=25))
    assert r.lambda_opt[0] == pytest.approx(box[0])
    # upper bound active: the cost still decreases outward, so its multiplier is positive
    assert r.upper_multipliers[0] > 0 and r.upper_multipliers[1] == 0.0
    assert np.all(r.multipliers >= -1e-8)
    assert np.all(np.abs(r.multipliers * r.lambda_opt) <= 1e-6 * (1 + np.abs(r.multipliers)))
    assert np.all(np.diff(r.cost_history) <= 0)


def test_noise_free_training_pair_stops_fast():
    clean = camera_image(16)
    r = learn_parameters(clean, CostSpec("l2", clean), SMOOTH, BfgsConfig(initial_lambda=(1e3, 1e5), box=(1e3, 1e5)))
    assert r.iterations <= 2
    assert r.cost_history[-1] <= 1e-6 * cost(clean.like(np.zeros(clean.shape)), CostSpec("l2", clean))
    assert np.linalg.norm(r.gradient) <= 1e-6


def test_iteration_csv(learned, tmp_path):
    path = tmp_path / "it.csv"
    write_iteration_csv(learned, path)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ITERATION_CSV_HEADER
    assert len(rows) == len(learned.cost_history)
    assert float(rows[-1]["cost"]) == pytest.approx(learned.cost_history[-1])


def test_callback_sees_every_accepted_step(gaussian_pair):
    noisy, clean = gaussian_pair
    seen = []
    r = learn_parameters(noisy, CostSpec("l2", clean), SMOOTH, BfgsConfig(max_outer=3), callback=seen.append)
    assert [row["k"] for row in seen] == list(range(1, len(r.cost_history)))
