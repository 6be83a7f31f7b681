"""Entropic partial optimal transport between image patches and text features.

Problems are stacked along leading axes: a cost of shape ``(..., V, M)`` is solved as
independent ``V x M`` problems sharing one ``alpha`` (length V) and ``beta`` (length M).
The solver alternates the two KL projections in scaling form::

    u <- min(1, alpha / (Q v))      # rows: T 1 <= alpha
    v <- beta / (Q^T u)             # columns: T^T 1 = beta

with ``Q = exp(-C / lambda)`` and ``T = diag(u) Q diag(v)``.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import softmax, xlogy

from fedprompt._linalg import has_unit_rows, require_finite
from fedprompt.config import StrictValidator
from fedprompt.errors import ConfigError, NumericalError, ShapeMismatchError

logger = logging.getLogger(__name__)

_FLOOR = 1e-300
_MARGINAL_TOLERANCE = 1e-12


@dataclass(frozen=True)
class TransportConfig:
    lam: float = 0.1
    max_iters: int = 100
    tol: float = 1e-8
    alpha_scale: float = 2.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam!r}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters!r}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol!r}")
        if not self.alpha_scale >= 1:
            raise ConfigError(f"alpha_scale must be >= 1, got {self.alpha_scale!r}")


@dataclass(frozen=True, eq=False)
class TransportProblem:
    cost: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    lam: float
    max_iters: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if cost.ndim < 2:
            raise ShapeMismatchError(f"cost must have at least 2 axes, got shape {cost.shape}")
        if alpha.shape != cost.shape[-2:-1] or beta.shape != cost.shape[-1:]:
            raise ShapeMismatchError(
                f"marginals {alpha.shape}/{beta.shape} do not fit cost of shape {cost.shape}"
            )
        require_finite("transport problem", cost, alpha, beta)
        if np.any(cost < 0.0) or np.any(cost > 2.0):
            raise ConfigError("cost entries must lie in [0, 2]")
        if np.any(alpha < 0.0) or np.any(beta < 0.0):
            raise ConfigError("marginals must be nonnegative")
        if abs(beta.sum() - 1.0) > _MARGINAL_TOLERANCE:
            raise ConfigError(f"beta must sum to 1, got {beta.sum()!r}")
        if alpha.sum() < beta.sum() - _MARGINAL_TOLERANCE:
            raise ConfigError("infeasible marginals: sum(alpha) < sum(beta)")
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam!r}")
        if self.max_iters < 1 or not self.tol > 0:
            raise ConfigError("max_iters must be >= 1 and tol > 0")
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.cost.shape[:-2]


@dataclass(frozen=True, eq=False)
class TransportPlan:
    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iterations_used: np.ndarray
    converged: np.ndarray
    changes: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def default_marginals(patch_count: int, text_count: int, alpha_scale: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """``alpha = (alpha_scale / V) 1_V`` and uniform ``beta`` over the text atoms."""
    return (
        np.full(patch_count, alpha_scale / patch_count),
        np.full(text_count, 1.0 / text_count),
    )


def make_problem(cost: np.ndarray, config: TransportConfig) -> TransportProblem:
    cost = np.asarray(cost, dtype=np.float64)
    alpha, beta = default_marginals(cost.shape[-2], cost.shape[-1], config.alpha_scale)
    return TransportProblem(cost, alpha, beta, config.lam, config.max_iters, config.tol)


def cost_matrix(image_patches: np.ndarray, text_features: np.ndarray) -> np.ndarray:
    """Cosine distance ``1 - <E_I[v], E_T[m]>`` between unit rows.

    Leading axes broadcast, so ``(B, 1, V, d)`` patches against ``(K, M, d)`` text
    features give a ``(B, K, V, M)`` stack.

    :param image_patches: unit rows, shape (..., V, d)
    :type image_patches: np.ndarray
    :param text_features: unit rows, shape (..., M, d)
    :type text_features: np.ndarray
    :raises NumericalError: if a row is not unit-norm within 1e-6
    :return: costs clipped to [0, 2], shape (..., V, M)
    :rtype: np.ndarray
    """
    require_finite("cost inputs", image_patches, text_features)
    if not (has_unit_rows(image_patches) and has_unit_rows(text_features)):
        raise NumericalError("cost matrix inputs must have unit-norm rows")
    similarity = np.einsum("...vd,...md->...vm", image_patches, text_features)
    return np.clip(1.0 - similarity, 0.0, 2.0)


def solve_dykstra(problem: TransportProblem) -> TransportPlan:
    """Solve every problem in the stack.

    Each problem stops on its own once the relative max-norm change of ``v`` drops
    below ``tol``; it is then frozen while the rest keep iterating.

    :param problem: stacked transport problems
    :type problem: TransportProblem
    :raises NumericalError: if ``exp(-C / lambda)`` is non-finite or a column underflows
    :return: plans with scalings, iteration counts, flags and the change history
    :rtype: TransportPlan
    """
    q = np.exp(-problem.cost / problem.lam)
    if not np.all(np.isfinite(q)) or np.any(q.max(axis=-2) < _FLOOR):
        raise NumericalError(
            f"exp(-C/lambda) underflows at lambda={problem.lam:g}; increase lambda"
        )

    batch = problem.batch_shape
    u = np.ones(q.shape[:-1])
    v = np.ones(batch + q.shape[-1:])
    active = np.ones(batch, dtype=bool)
    iterations = np.zeros(batch, dtype=np.int64)
    history = []

    for _ in range(problem.max_iters):
        qv = np.einsum("...vm,...m->...v", q, v)
        u_next = np.minimum(1.0, problem.alpha / np.maximum(qv, _FLOOR))
        qtu = np.einsum("...vm,...v->...m", q, u_next)
        v_next = problem.beta / np.maximum(qtu, _FLOOR)
        change = np.max(np.abs(v_next - v), axis=-1) / np.max(np.abs(v_next), axis=-1)

        u = np.where(active[..., None], u_next, u)
        v = np.where(active[..., None], v_next, v)
        history.append(np.where(active, change, np.nan))
        iterations += active
        active &= change >= problem.tol
        if not active.any():
            break

    converged = ~active
    if not converged.all():
        logger.debug("%d of %d transport problems hit max_iters", int(active.sum()), active.size)
    plan = u[..., :, None] * q * v[..., None, :]
    return TransportPlan(
        plan=plan,
        u=u,
        v=v,
        iterations_used=iterations,
        converged=converged,
        changes=np.stack(history),
    )


def ot_distance(cost: np.ndarray, plan: np.ndarray, lam: float) -> np.ndarray:
    """``<C, T> + lambda <T, log T>`` with ``0 log 0 = 0``, reduced over the last two axes.

    :raises NumericalError: on a negative or non-finite plan
    """
    cost, plan = np.asarray(cost, dtype=np.float64), np.asarray(plan, dtype=np.float64)
    require_finite("transport plan", cost, plan)
    if np.any(plan < 0.0):
        raise NumericalError("transport plan has negative entries")
    transport = np.sum(cost * plan, axis=(-2, -1))
    if lam == 0:
        return transport
    return transport + lam * np.sum(xlogy(plan, plan), axis=(-2, -1))


def predict_ot(distances: np.ndarray, tau: float) -> np.ndarray:
    """Class probabilities ``softmax((1 - d) / tau)`` along the last axis."""
    require_finite("class distances", distances)
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau!r}")
    return softmax((1.0 - np.asarray(distances)) / tau, axis=-1)


def distance_text_gradient(plan: np.ndarray, image_patches: np.ndarray) -> np.ndarray:
    """Gradient of the distance w.r.t. the text rows with the plan held fixed.

    ``d/dE_T[m] = -sum_v T[v, m] E_I[v]``; shapes (..., V, M) and (..., V, d) give (..., M, d).
    """
    return -np.einsum("...vm,...vd->...md", plan, image_patches)


def grad_distance_wrt_text(
    plan: TransportPlan, image_patches: np.ndarray, text_jacobians: Sequence[np.ndarray]
) -> tuple[list[np.ndarray], bool]:
    """Chain the fixed-plan distance gradient through the text-encoder jacobians.

    :param plan: solved plan for one problem, ``plan.plan`` of shape (V, M)
    :type plan: TransportPlan
    :param image_patches: unit patch rows, shape (V, d)
    :type image_patches: np.ndarray
    :param text_jacobians: one (d, n_m) jacobian per text atom, e.g. shared then private
    :type text_jacobians: Sequence[np.ndarray]
    :return: one flat gradient of length n_m per text atom, and the convergence flag
    :rtype: tuple[list[np.ndarray], bool]
    """
    if plan.plan.ndim != 2 or plan.plan.shape[1] != len(text_jacobians):
        raise ShapeMismatchError(
            f"plan of shape {plan.plan.shape} does not match {len(text_jacobians)} text jacobians"
        )
    converged = plan.all_converged
    if not converged:
        logger.warning("Transport plan did not converge; gradient uses the last iterate")
    feature_grads = distance_text_gradient(plan.plan, image_patches)
    grads = [feature_grads[m] @ jac for m, jac in enumerate(text_jacobians)]
    return grads, converged


_problem_schema = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["cost", "lambda"],
    "additionalProperties": False,
    "properties": {
        "cost": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 2}},
        },
        "alpha": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "beta": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "lambda": {"type": "number", "exclusiveMinimum": 0},
        "max_iters": {"type": "integer", "minimum": 1},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "alpha_scale": {"type": "number", "minimum": 1},
    },
}

_problem_validator = StrictValidator(_problem_schema)


def problem_from_json(raw: dict) -> TransportProblem:
    """Build a single problem from its JSON form; missing marginals take the defaults.

    :param raw: parsed JSON object
    :type raw: dict
    :raises ConfigError: on schema violations or ragged cost rows
    :return: validated problem
    :rtype: TransportProblem
    """
    errors = sorted(_problem_validator.iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        error = errors[0]
        where = "/".join(str(p) for p in error.path) or "<root>"
        raise ConfigError(f"invalid transport problem at '{where}': {error.message}")
    rows = raw["cost"]
    if len({len(row) for row in rows}) != 1:
        raise ShapeMismatchError("cost rows have different lengths")
    cost = np.array(rows, dtype=np.float64)
    alpha, beta = default_marginals(cost.shape[0], cost.shape[1], raw.get("alpha_scale", 2.0))
    return TransportProblem(
        cost=cost,
        alpha=np.array(raw["alpha"], dtype=np.float64) if "alpha" in raw else alpha,
        beta=np.array(raw["beta"], dtype=np.float64) if "beta" in raw else beta,
        lam=float(raw["lambda"]),
        max_iters=int(raw.get("max_iters", 100)),
        tol=float(raw.get("tol", 1e-8)),
    )


def solution_to_json(problem: TransportProblem, plan: TransportPlan) -> dict:
    return {
        "plan": plan.plan.tolist(),
        "u": plan.u.tolist(),
        "v": plan.v.tolist(),
        "distance": float(ot_distance(problem.cost, plan.plan, problem.lam)),
        "transport_cost": float(np.sum(problem.cost * plan.plan)),
        "iterations": int(plan.iterations_used),
        "converged": bool(plan.converged),
    }
