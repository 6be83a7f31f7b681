"""Unit tests for cost matrices, the partial-OT solver and distances in fedprompt.transport."""

import math

import numpy as np
import pytest
from scipy.optimize import linprog

from fedprompt._linalg import relative_error
from fedprompt.encoders import encode_text
from fedprompt.errors import ConfigError, NumericalError, ShapeMismatchError
from fedprompt.gradcheck import numerical_gradient
from fedprompt.transport import (
    TransportConfig,
    TransportPlan,
    TransportProblem,
    cost_matrix,
    default_marginals,
    distance_text_gradient,
    grad_distance_wrt_text,
    make_problem,
    ot_distance,
    predict_ot,
    problem_from_json,
    solution_to_json,
    solve_dykstra,
)


def _problem(cost, lam=0.1, max_iters=100, tol=1e-8):
    cost = np.asarray(cost, dtype=np.float64)
    alpha, beta = default_marginals(cost.shape[-2], cost.shape[-1])
    return TransportProblem(cost, alpha, beta, lam, max_iters, tol)


def _lp_optimum(cost, alpha, beta):
    """Exact partial-OT optimum: min <C, T> s.t. T 1 <= alpha, T^T 1 = beta, T >= 0."""
    v, m = cost.shape
    row_sums = np.kron(np.eye(v), np.ones((1, m)))
    col_sums = np.kron(np.ones((1, v)), np.eye(m))
    result = linprog(
        cost.reshape(-1), A_ub=row_sums, b_ub=alpha, A_eq=col_sums, b_eq=beta, bounds=(0, None), method="highs"
    )
    assert result.success
    return result.fun


@pytest.mark.parametrize(
    "text,expected",
    [([1.0, 0.0], 0.0), ([0.0, 1.0], 1.0), ([-1.0, 0.0], 2.0)],
    ids=["identical", "orthogonal", "antipodal"],
)
def test_cost_matrix_known_values(text, expected):
    """Test cosine distances of identical, orthogonal and antipodal vectors."""
    cost = cost_matrix(np.array([[1.0, 0.0]]), np.array([text]))

    assert cost.shape == (1, 1)
    assert cost[0, 0] == pytest.approx(expected, abs=1e-15)


def test_cost_matrix_broadcasts_stacks(random_unit_rows):
    """Test that (B, 1, V, d) patches against (K, M, d) text give (B, K, V, M) costs."""
    patches = random_unit_rows(3 * 4, 5, seed=1).reshape(3, 4, 5)
    text = random_unit_rows(2 * 2, 5, seed=2).reshape(2, 2, 5)
    cost = cost_matrix(patches[:, None], text)

    assert cost.shape == (3, 2, 4, 2)
    assert cost[2, 1] == pytest.approx(1.0 - patches[2] @ text[1].T, abs=1e-15)
    assert np.all((cost >= 0.0) & (cost <= 2.0))


def test_cost_matrix_rejects_non_unit_rows():
    """Test that rows off the unit sphere are rejected."""
    with pytest.raises(NumericalError):
        cost_matrix(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]))


def test_problem_validation():
    """Test that invalid marginals and costs are rejected."""
    cost = np.full((3, 2), 0.5)
    with pytest.raises(ConfigError):
        TransportProblem(cost, np.full(3, 0.1), np.array([0.5, 0.5]), 0.1)
    with pytest.raises(ConfigError):
        TransportProblem(cost, np.ones(3), np.array([0.5, 0.6]), 0.1)
    with pytest.raises(ConfigError):
        TransportProblem(np.full((3, 2), 2.5), np.ones(3), np.array([0.5, 0.5]), 0.1)
    with pytest.raises(ShapeMismatchError):
        TransportProblem(cost, np.ones(4), np.array([0.5, 0.5]), 0.1)


def test_transport_config_validation():
    """Test that solver settings are range-checked."""
    with pytest.raises(ConfigError):
        TransportConfig(lam=0.0)
    with pytest.raises(ConfigError):
        TransportConfig(alpha_scale=0.5)


def test_solve_constant_cost_is_uniform():
    """Test that a constant cost gives uniform columns with mass one half each."""
    v = 4
    plan = solve_dykstra(_problem(np.full((v, 2), 0.5)))

    assert plan.converged
    assert np.allclose(plan.plan, 1.0 / (2 * v), atol=1e-12)
    assert np.allclose(plan.plan.sum(axis=0), 0.5, atol=1e-12)


def test_solve_feasibility():
    """Test nonnegativity and marginal feasibility of converged plans."""
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = int(rng.integers(2, 7))
        problem = _problem(rng.uniform(0.0, 2.0, (v, 2)), lam=0.1, max_iters=5000, tol=1e-10)
        plan = solve_dykstra(problem)
        assert plan.converged
        assert np.all(plan.plan >= 0.0)
        assert np.allclose(plan.plan.sum(axis=0), problem.beta, atol=1e-8)
        assert np.all(plan.plan.sum(axis=1) <= problem.alpha + 1e-8)


def test_solve_matches_lp_oracle():
    """Test the transport cost at lambda = 1e-3 against the exact LP on 20 random instances."""
    rng = np.random.default_rng(2024)
    for _ in range(20):
        v = int(rng.integers(2, 5))
        # exp(-0.6 / 1e-3) stays above the underflow floor
        problem = _problem(rng.uniform(0.0, 0.6, (v, 2)), lam=1e-3, max_iters=20000, tol=1e-9)
        plan = solve_dykstra(problem)
        optimum = _lp_optimum(problem.cost, problem.alpha, problem.beta)

        assert np.sum(problem.cost * plan.plan) == pytest.approx(optimum, abs=1e-2)
        if plan.converged:
            assert np.allclose(plan.plan.sum(axis=0), problem.beta, atol=1e-8)
            assert np.all(plan.plan.sum(axis=1) <= problem.alpha + 1e-8)


def test_solve_underflow_names_lambda():
    """Test that an underflowing kernel raises an error naming lambda."""
    with pytest.raises(NumericalError, match="lambda"):
        solve_dykstra(_problem(np.full((3, 2), 1.0), lam=1e-3))


def test_solve_batched_matches_single():
    """Test that stacked problems follow the same trajectory as individual solves."""
    rng = np.random.default_rng(3)
    costs = rng.uniform(0.0, 2.0, (5, 4, 2))
    batched = solve_dykstra(_problem(costs))

    for i in range(5):
        single = solve_dykstra(_problem(costs[i]))
        assert np.allclose(batched.plan[i], single.plan, atol=1e-12)
        assert batched.iterations_used[i] == single.iterations_used
        assert batched.converged[i] == single.converged


def test_solve_records_stopping_history():
    """Test that a converged solve ends with a change below tol."""
    plan = solve_dykstra(_problem(np.random.default_rng(4).uniform(0.0, 2.0, (3, 2)), tol=1e-8))

    assert plan.converged
    assert plan.changes.shape[0] == plan.iterations_used
    assert plan.changes[int(plan.iterations_used) - 1] < 1e-8


def test_solve_unconverged_flag():
    """Test that hitting max_iters leaves the flag down."""
    plan = solve_dykstra(_problem(np.random.default_rng(5).uniform(0.0, 0.6, (4, 2)), lam=1e-3, max_iters=1))

    assert not plan.converged
    assert plan.iterations_used == 1


def test_solve_scale_invariance():
    """Test that scaling C and lambda together leaves the plan unchanged."""
    cost = np.random.default_rng(6).uniform(0.0, 1.0, (4, 2))
    plan = solve_dykstra(_problem(cost, lam=0.1, tol=1e-12, max_iters=1000)).plan
    scaled = solve_dykstra(_problem(2.0 * cost, lam=0.2, tol=1e-12, max_iters=1000)).plan

    assert np.allclose(plan, scaled, atol=1e-10)


def test_ot_distance_special_cases():
    """Test the empty plan and the unregularized distance."""
    cost = np.random.default_rng(7).uniform(0.0, 2.0, (4, 2))
    plan = np.random.default_rng(8).uniform(0.0, 0.2, (4, 2))

    assert ot_distance(cost, np.zeros((4, 2)), 0.1) == 0.0
    assert ot_distance(cost, plan, 0.0) == pytest.approx(sum(cost.flat[i] * plan.flat[i] for i in range(8)), abs=1e-15)


def test_ot_distance_matches_explicit_loop():
    """Test the entropic distance against an element-by-element evaluation."""
    rng = np.random.default_rng(9)
    cost = rng.uniform(0.0, 2.0, (4, 2))
    plan = solve_dykstra(_problem(cost)).plan
    expected = 0.0
    for i in range(4):
        for j in range(2):
            t = plan[i, j]
            expected += cost[i, j] * t + (0.1 * t * math.log(t) if t > 0 else 0.0)

    assert ot_distance(cost, plan, 0.1) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("lam", ["0.1", "0.5"])
def test_ot_distance_golden(golden, lam):
    """Test a frozen V = 4 instance against its stored distance."""
    case = golden("ot_distance")
    distance = ot_distance(np.array(case["cost"]), np.array(case["plan"]), float(lam))

    assert distance == pytest.approx(case["distances"][lam], abs=1e-12)


def test_ot_distance_rejects_negative_plan():
    """Test that a negative plan entry is an error."""
    with pytest.raises(NumericalError):
        ot_distance(np.ones((2, 2)), np.array([[0.5, -0.1], [0.0, 0.0]]), 0.1)


def test_predict_ot_values():
    """Test OT predictions: sigmoid value, uniformity and shift invariance."""
    p = predict_ot(np.array([0.2, 0.7]), 1.0)

    assert p[0] == pytest.approx(1.0 / (1.0 + math.exp(-0.5)), abs=1e-12)
    assert predict_ot(np.full(4, 0.3), 0.01) == pytest.approx(np.full(4, 0.25))
    d = np.array([0.1, 0.4, 0.9])
    assert predict_ot(d, 0.5) == pytest.approx(predict_ot(d - 0.3, 0.5), abs=1e-14)


def test_distance_text_gradient_is_linear(random_unit_rows):
    """Test that the fixed-plan gradient vanishes for T = 0 and doubles with T."""
    patches = random_unit_rows(4, 5, seed=10)
    plan = np.random.default_rng(11).uniform(0.0, 0.25, (4, 2))

    assert not distance_text_gradient(np.zeros((4, 2)), patches).any()
    assert np.allclose(distance_text_gradient(2 * plan, patches), 2 * distance_text_gradient(plan, patches))


def test_grad_distance_zero_plan(random_unit_rows):
    """Test that a zero plan yields zero prompt gradients."""
    zero = TransportPlan(np.zeros((4, 2)), np.ones(4), np.ones(2), np.array(1), np.array(True), np.zeros((1,)))
    grads, converged = grad_distance_wrt_text(zero, random_unit_rows(4, 8, seed=1), [np.ones((8, 16))] * 2)

    assert converged
    assert all(not g.any() for g in grads)


def test_grad_distance_matches_finite_differences(text_encoder, image_encoder, prompts):
    """Test the chained fixed-plan gradient against re-solving at perturbed prompts."""
    patches = image_encoder.encode(np.random.default_rng(12).standard_normal(8)).patch_features
    token = prompts.class_embeddings[0]
    config = TransportConfig(lam=0.1, max_iters=5000, tol=1e-12)

    def distance(shared, private):
        text = np.stack([encode_text(text_encoder, shared, token).feature, encode_text(text_encoder, private, token).feature])
        cost = cost_matrix(patches, text)
        return ot_distance(cost, solve_dykstra(make_problem(cost, config)).plan, config.lam)

    shared = encode_text(text_encoder, prompts.shared, token)
    private = encode_text(text_encoder, prompts.private, token)
    cost = cost_matrix(patches, np.stack([shared.feature, private.feature]))
    plan = solve_dykstra(make_problem(cost, config))
    (grad_shared, grad_private), converged = grad_distance_wrt_text(plan, patches, [shared.jacobian, private.jacobian])

    numeric_shared = numerical_gradient(lambda s: distance(s, prompts.private), prompts.shared)
    numeric_private = numerical_gradient(lambda p: distance(prompts.shared, p), prompts.private)
    assert converged
    assert relative_error(grad_shared, numeric_shared) <= 1e-3
    assert relative_error(grad_private, numeric_private) <= 1e-3


def test_problem_json_defaults():
    """Test that a minimal JSON problem takes the default marginals."""
    problem = problem_from_json({"cost": [[0.1, 0.5], [0.7, 0.2], [0.4, 0.4]], "lambda": 0.1})

    assert problem.alpha == pytest.approx([2 / 3] * 3)
    assert problem.beta == pytest.approx([0.5, 0.5])
    solution = solution_to_json(problem, solve_dykstra(problem))
    assert solution["converged"] is True
    assert np.array(solution["plan"]).shape == (3, 2)


@pytest.mark.parametrize(
    "raw,error",
    [
        ({"cost": [[0.1, 0.2]]}, ConfigError),
        ({"cost": [[0.1, 0.2]], "lambda": -1}, ConfigError),
        ({"cost": [[0.1, 0.2]], "lambda": 0.1, "extra": 1}, ConfigError),
        ({"cost": [[0.1, 0.2], [0.3]], "lambda": 0.1}, ShapeMismatchError),
    ],
    ids=["missing-lambda", "negative-lambda", "unknown-key", "ragged"],
)
def test_problem_json_invalid(raw, error):
    """Test that malformed JSON problems are rejected."""
    with pytest.raises(error):
        problem_from_json(raw)
