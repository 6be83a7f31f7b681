"""Central finite-difference checks of every analytic gradient in the objective."""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fedprompt._linalg import normalize_rows, relative_error
from fedprompt.encoders import EncoderConfig, build_encoders, encode_image, encode_text
from fedprompt.objective import AlignmentConfig, Batch, ObjectiveContext, dpac_client_loss_and_grad, total_loss_and_grad
from fedprompt.prompts import PredictionConfig, PromptSet
from fedprompt.transport import TransportConfig

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5


@dataclass(frozen=True)
class GradcheckSettings:
    embed_dim: int = 8
    feature_dim: int = 8
    patch_count: int = 4
    n_classes: int = 3
    shared_len: int = 2
    private_len: int = 2
    batch_size: int = 3
    n_others: int = 2
    tau: float = 0.1
    dpac_scale: float = 2.0
    dpac_weight: float = 1.0
    ot_lambda: float = 0.1
    ot_max_iters: int = 5000
    ot_tol: float = 1e-12
    step: float = DEFAULT_STEP


def numerical_gradient(f: Callable[[np.ndarray], np.ndarray | float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` over every entry of ``x``.

    :param f: scalar- or array-valued function of an array
    :type f: Callable
    :param x: evaluation point (not modified)
    :type x: np.ndarray
    :param step: h
    :type step: float
    :return: derivatives with the flattened entries of ``x`` on the last axis,
        shape ``f(x).shape + (x.size,)``
    :rtype: np.ndarray
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    columns = []
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        hi = np.asarray(f(x), dtype=np.float64)
        flat[i] = original - step
        lo = np.asarray(f(x), dtype=np.float64)
        flat[i] = original
        columns.append((hi - lo) / (2.0 * step))
    return np.stack(columns, axis=-1)


@dataclass(frozen=True, eq=False)
class _Fixture:
    context: ObjectiveContext
    prompts: PromptSet
    batch: Batch
    others: list[np.ndarray]


def _fixture(settings: GradcheckSettings, seed: int) -> _Fixture:
    rng = np.random.default_rng(seed)
    e = settings.embed_dim
    image_encoder, text_encoder = build_encoders(
        EncoderConfig(settings.feature_dim, settings.patch_count, e, seed=seed)
    )
    classes, _ = normalize_rows(rng.standard_normal((settings.n_classes, e)))
    prompts = PromptSet(
        shared=rng.normal(0.0, 0.5, size=(settings.shared_len, e)),
        private=rng.normal(0.0, 0.5, size=(settings.private_len, e)),
        class_embeddings=classes,
        bound=True,
    )
    encoding = encode_image(image_encoder, rng.standard_normal((settings.batch_size, e)))
    batch = Batch(
        patches=encoding.patch_features,
        pooled=encoding.pooled_feature,
        labels=rng.integers(settings.n_classes, size=settings.batch_size),
    )
    others = list(normalize_rows(rng.standard_normal((settings.n_others, settings.feature_dim)))[0])
    context = ObjectiveContext(
        text_encoder=text_encoder,
        prediction=PredictionConfig(settings.tau),
        alignment=AlignmentConfig(settings.dpac_scale, settings.dpac_weight),
        transport=TransportConfig(settings.ot_lambda, settings.ot_max_iters, settings.ot_tol),
    )
    return _Fixture(context, prompts, batch, others)


def _objective_errors(fixture: _Fixture, context: ObjectiveContext, step: float, prefix: str) -> dict[str, float]:
    prompts, batch, others = fixture.prompts, fixture.batch, fixture.others
    report = total_loss_and_grad(context, prompts, batch, others)

    def loss_at_shared(shared):
        return total_loss_and_grad(context, prompts.with_prompts(shared=shared), batch, others).total

    def loss_at_private(private):
        return total_loss_and_grad(context, prompts.with_prompts(private=private), batch, others).total

    numeric_shared = numerical_gradient(loss_at_shared, prompts.shared, step).reshape(prompts.shared.shape)
    numeric_private = numerical_gradient(loss_at_private, prompts.private, step).reshape(prompts.private.shape)
    return {
        f"{prefix}_shared": relative_error(report.grad_shared, numeric_shared),
        f"{prefix}_private": relative_error(report.grad_private, numeric_private),
    }


def _dpac_errors(fixture: _Fixture, step: float) -> dict[str, float]:
    encoder = fixture.context.text_encoder
    prompts, others = fixture.prompts, fixture.others
    scale = fixture.context.alignment.scale
    probe = prompts.class_embeddings[0]
    private = encode_text(encoder, prompts.private, probe)
    shared = encode_text(encoder, prompts.shared, probe)
    _, grad_a, grad_b0 = dpac_client_loss_and_grad(private.feature, shared.feature, others, scale)

    def loss(private_prompt, shared_prompt):
        a = encode_text(encoder, private_prompt, probe).feature
        b0 = encode_text(encoder, shared_prompt, probe).feature
        return dpac_client_loss_and_grad(a, b0, others, scale)[0]

    numeric_private = numerical_gradient(lambda p: loss(p, prompts.shared), prompts.private, step)
    numeric_shared = numerical_gradient(lambda s: loss(prompts.private, s), prompts.shared, step)
    return {
        "dpac_shared": relative_error(grad_b0 @ shared.jacobian, numeric_shared),
        "dpac_private": relative_error(grad_a @ private.jacobian, numeric_private),
    }


def run_gradcheck(settings: GradcheckSettings | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative error of each analytic gradient block against central differences.

    Blocks: the text-encoder jacobian, the cosine-softmax cross-entropy, the alignment
    term alone and the full transport objective (re-solved at every perturbation).

    :param settings: problem sizes and solver settings
    :type settings: GradcheckSettings | None
    :param seed: seed of the random configuration
    :type seed: int
    :return: block name -> max relative error
    :rtype: dict[str, float]
    """
    settings = settings or GradcheckSettings()
    fixture = _fixture(settings, seed)
    encoder = fixture.context.text_encoder
    probe = fixture.prompts.class_embeddings[0]

    text = encode_text(encoder, fixture.prompts.shared, probe)
    numeric_jac = numerical_gradient(lambda p: encode_text(encoder, p, probe).feature, fixture.prompts.shared, settings.step)
    errors = {"text_jacobian": relative_error(text.jacobian, numeric_jac)}

    softmax_context = ObjectiveContext(
        text_encoder=encoder,
        prediction=fixture.context.prediction,
        alignment=AlignmentConfig(settings.dpac_scale, settings.dpac_weight, dpac_enabled=False, cmfac_enabled=False),
        transport=fixture.context.transport,
    )
    errors.update(_objective_errors(fixture, softmax_context, settings.step, "softmax"))
    errors.update(_dpac_errors(fixture, settings.step))
    errors.update(_objective_errors(fixture, fixture.context, settings.step, "full"))
    logger.debug("Gradcheck seed %d: %s", seed, errors)
    return errors
