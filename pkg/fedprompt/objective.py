"""Local training objective: cross-entropy over class probabilities plus the dual-prompt
alignment term, with analytic gradients w.r.t. the shared and private prompts.

Class probabilities come from one of two paths:

* transport path: per (sample, class) entropic partial OT between the image patches and
  the class's text atoms (shared, plus private in dual-prompt mode), ``p = softmax((1 - d) / tau)``;
* cosine path: ``softmax(cos / tau)`` on the pooled image feature; in dual-prompt mode the
  cosine is the mean of the shared and private cosines.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from fedprompt.encoders import TextEncoder, encode_text
from fedprompt.errors import ConfigError, ShapeMismatchError
from fedprompt.prompts import PredictionConfig, PromptSet, class_text_features, predict_softmax_cosine
from fedprompt.transport import (
    TransportConfig,
    cost_matrix,
    distance_text_gradient,
    make_problem,
    ot_distance,
    predict_ot,
    solve_dykstra,
)

logger = logging.getLogger(__name__)

CE_FLOOR = 1e-12
PROBE_CLASS = 0


@dataclass(frozen=True)
class AlignmentConfig:
    scale: float = 10.0
    dpac_weight: float = 1.0
    dpac_enabled: bool = True
    cmfac_enabled: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"alignment scale must be > 0, got {self.scale!r}")
        if not self.dpac_weight >= 0:
            raise ConfigError(f"dpac_weight must be >= 0, got {self.dpac_weight!r}")


@dataclass(frozen=True)
class ObjectiveContext:
    text_encoder: TextEncoder
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    dual_prompt: bool = True

    @property
    def uses_dpac(self) -> bool:
        return self.dual_prompt and self.alignment.dpac_enabled


@dataclass(frozen=True, eq=False)
class Batch:
    patches: np.ndarray
    pooled: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if not (self.patches.shape[0] == self.pooled.shape[0] == self.labels.shape[0]):
            raise ShapeMismatchError(
                f"batch parts disagree: patches {self.patches.shape}, pooled {self.pooled.shape}, "
                f"labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True, eq=False)
class LossReport:
    ce: float
    dpac: float
    total: float
    grad_shared: np.ndarray
    grad_private: np.ndarray
    clamped: bool = False
    converged: bool = True


@dataclass(frozen=True, eq=False)
class _Forward:
    probs: np.ndarray
    shared: tuple[np.ndarray, np.ndarray]
    private: tuple[np.ndarray, np.ndarray] | None
    feature_grads: Callable[[np.ndarray], list[np.ndarray]]
    converged: bool = True


def cross_entropy(p: np.ndarray, label) -> tuple[np.ndarray | float, bool]:
    """``-log p[label]`` with ``p[label]`` clamped at 1e-12.

    Works on one vector with an int label or on a (B, K) stack with (B,) labels.

    :return: the loss (float or per-sample array) and whether any value was clamped
    :rtype: tuple[np.ndarray | float, bool]
    """
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(label)
    if np.any(labels < 0) or np.any(labels >= p.shape[-1]):
        raise ConfigError(f"label out of range for {p.shape[-1]} classes")
    picked = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
    clamped = bool(np.any(picked < CE_FLOOR))
    if clamped:
        logger.warning("Cross-entropy clamped: predicted probability of the true class below 1e-12")
    loss = -np.log(np.maximum(picked, CE_FLOOR))
    return (float(loss) if loss.ndim == 0 else loss), clamped


def _unit_projection(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x)
    unit = x / norm
    return unit, (np.eye(x.shape[0]) - np.outer(unit, unit)) / norm


def dpac_client_loss_and_grad(
    private_feature: np.ndarray,
    own_shared_feature: np.ndarray,
    other_shared_features: Sequence[np.ndarray],
    scale: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Alignment loss of one client and its gradients.

    ``log(1 + sum_j exp(s <a, b_j> - s <a, b_0>))`` with every vector L2-normalized,
    where ``a`` is the private feature, ``b_0`` the client's own shared feature and ``b_j``
    the other clients' shared features (constants).

    :param private_feature: private-prompt text feature, shape (d,)
    :type private_feature: np.ndarray
    :param own_shared_feature: the client's shared-prompt text feature, shape (d,)
    :type own_shared_feature: np.ndarray
    :param other_shared_features: other clients' shared features, possibly empty
    :type other_shared_features: Sequence[np.ndarray]
    :param scale: logit scale s
    :type scale: float
    :return: loss, gradient w.r.t. the private feature, gradient w.r.t. the own shared feature
    :rtype: tuple[float, np.ndarray, np.ndarray]
    """
    a, proj_a = _unit_projection(np.asarray(private_feature, dtype=np.float64))
    b0, proj_b0 = _unit_projection(np.asarray(own_shared_feature, dtype=np.float64))
    if len(other_shared_features) == 0:
        return 0.0, np.zeros_like(a), np.zeros_like(b0)
    others = np.stack([np.asarray(b, dtype=np.float64) for b in other_shared_features])
    others = others / np.linalg.norm(others, axis=1, keepdims=True)

    exponents = np.concatenate([[0.0], scale * (others @ a - a @ b0)])
    loss = float(logsumexp(exponents))
    weights = softmax(exponents)[1:]
    grad_a = scale * (weights @ (others - b0))
    grad_b0 = -scale * weights.sum() * a
    return loss, proj_a @ grad_a, proj_b0 @ grad_b0


def dpac_client_loss(
    private_feature: np.ndarray,
    own_shared_feature: np.ndarray,
    other_shared_features: Sequence[np.ndarray],
    scale: float,
) -> float:
    loss, _, _ = dpac_client_loss_and_grad(private_feature, own_shared_feature, other_shared_features, scale)
    return loss


def dpac_aggregate(per_client_losses: Sequence[float]) -> float:
    """Mean of the per-client alignment losses."""
    if len(per_client_losses) == 0:
        raise ConfigError("cannot aggregate alignment losses of zero clients")
    return float(np.mean(per_client_losses))


def snapshot_features(
    context: ObjectiveContext, prompts: PromptSet, snapshots: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """Probe-class text features of other clients' shared prompts."""
    probe = prompts.class_embeddings[PROBE_CLASS]
    return [encode_text(context.text_encoder, snapshot, probe).feature for snapshot in snapshots]


def _forward(context: ObjectiveContext, prompts: PromptSet, batch: Batch) -> _Forward:
    shared, shared_jac = class_text_features(context.text_encoder, prompts, "shared")
    private, text_private = None, None
    if context.dual_prompt:
        text_private = class_text_features(context.text_encoder, prompts, "private")
        private = text_private[0]
    tau = context.prediction.tau
    n = len(batch)

    if not context.alignment.cmfac_enabled:
        if context.dual_prompt:
            cosines = 0.5 * (batch.pooled @ shared.T + batch.pooled @ private.T)
            probs = softmax(cosines / tau, axis=-1)
            factor = 0.5
        else:
            probs = predict_softmax_cosine(shared, batch.pooled, context.prediction)
            factor = 1.0

        def feature_grads(dloss: np.ndarray) -> list[np.ndarray]:
            grad = factor / tau * dloss.T @ batch.pooled
            return [grad, grad] if context.dual_prompt else [grad]

        return _Forward(probs, (shared, shared_jac), text_private, feature_grads)

    atoms = shared[:, None, :] if private is None else np.stack([shared, private], axis=1)
    cost = cost_matrix(batch.patches[:, None], atoms)
    plan = solve_dykstra(make_problem(cost, context.transport))
    distances = ot_distance(cost, plan.plan, context.transport.lam)
    probs = predict_ot(distances, tau)
    logger.debug(
        "Solved %d transport problems, max iterations %d", plan.converged.size, int(plan.iterations_used.max())
    )

    def feature_grads(dloss: np.ndarray) -> list[np.ndarray]:
        # d total / d distance, then the fixed-plan distance gradient per text atom
        ddist = -dloss / tau
        per_problem = distance_text_gradient(plan.plan, batch.patches[:, None])
        grad = np.einsum("bk,bkmd->kmd", ddist, per_problem)
        return [grad[:, m] for m in range(grad.shape[1])]

    return _Forward(probs, (shared, shared_jac), text_private, feature_grads, plan.all_converged)


def predict_proba(context: ObjectiveContext, prompts: PromptSet, batch: Batch) -> np.ndarray:
    """Class probabilities (B, K), the same computation training uses."""
    return _forward(context, prompts, batch).probs


def total_loss_and_grad(
    context: ObjectiveContext,
    prompts: PromptSet,
    batch: Batch,
    other_shared_features: Sequence[np.ndarray] = (),
) -> LossReport:
    """Batch-mean cross-entropy plus the weighted alignment term, with prompt gradients.

    :param context: encoders and objective settings
    :type context: ObjectiveContext
    :param prompts: the client's current prompts
    :type prompts: PromptSet
    :param batch: encoded samples and labels
    :type batch: Batch
    :param other_shared_features: probe-class features of other clients' shared prompts
    :type other_shared_features: Sequence[np.ndarray]
    :return: loss parts and gradients shaped like the prompts
    :rtype: LossReport
    """
    if len(batch) == 0:
        raise ConfigError("empty batch")
    forward = _forward(context, prompts, batch)
    shared, shared_jac = forward.shared

    losses, clamped = cross_entropy(forward.probs, batch.labels)
    ce = float(np.mean(losses))
    dloss = (forward.probs - np.eye(prompts.n_classes)[batch.labels]) / len(batch)

    text_grads = forward.feature_grads(dloss)
    grad_shared = np.einsum("kdn,kd->n", shared_jac, text_grads[0])
    grad_private = np.zeros(prompts.private.size)
    if forward.private is not None:
        grad_private = np.einsum("kdn,kd->n", forward.private[1], text_grads[1])

    dpac = 0.0
    total = ce
    if context.uses_dpac:
        mu = context.alignment.dpac_weight
        private, private_jac = forward.private
        dpac, grad_a, grad_b0 = dpac_client_loss_and_grad(
            private[PROBE_CLASS], shared[PROBE_CLASS], other_shared_features, context.alignment.scale
        )
        total = ce + mu * dpac
        grad_private = grad_private + mu * (grad_a @ private_jac[PROBE_CLASS])
        grad_shared = grad_shared + mu * (grad_b0 @ shared_jac[PROBE_CLASS])

    return LossReport(
        ce=ce,
        dpac=dpac,
        total=total,
        grad_shared=grad_shared.reshape(prompts.shared.shape),
        grad_private=grad_private.reshape(prompts.private.shape),
        clamped=clamped,
        converged=forward.converged,
    )


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """Plain SGD update ``params - lr * grads``."""
    params, grads = np.asarray(params, dtype=np.float64), np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeMismatchError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr!r}")
    return params - lr * grads
