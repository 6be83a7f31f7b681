"""Frozen toy image and text towers.

Both towers project into one joint feature space through a seeded semi-orthogonal
matrix ``W`` (d x e). The text tower mean-pools the prompt tokens with the class
token and applies ``W``; every image patch applies ``W`` plus a seeded per-patch
perturbation to the raw sample. All outputs are L2-normalized and all math runs in
float64, so the text jacobian can be checked against finite differences.
"""

from dataclasses import dataclass, field

import numpy as np

from fedprompt._linalg import normalize_jacobian, normalize_rows, require_finite
from fedprompt.errors import ConfigError, NumericalError, ShapeMismatchError


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 32
    patch_count: int = 16
    embed_dim: int = 32
    seed: int = 0
    patch_jitter: float = 0.25

    def __post_init__(self):
        for name in ("feature_dim", "patch_count", "embed_dim"):
            value = getattr(self, name)
            if not _is_int(value) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not _is_int(self.seed) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if not self.patch_jitter >= 0:
            raise ConfigError(f"patch_jitter must be >= 0, got {self.patch_jitter!r}")


@dataclass(frozen=True, eq=False)
class ImageEncoding:
    patch_features: np.ndarray
    pooled_feature: np.ndarray


@dataclass(frozen=True, eq=False)
class TextEncoding:
    feature: np.ndarray
    jacobian: np.ndarray


@dataclass(frozen=True, eq=False)
class ImageEncoder:
    config: EncoderConfig
    patch_maps: np.ndarray = field(repr=False)

    @property
    def input_dim(self) -> int:
        return self.config.embed_dim

    def encode(self, raw_sample: np.ndarray) -> ImageEncoding:
        return encode_image(self, raw_sample)


@dataclass(frozen=True, eq=False)
class TextEncoder:
    config: EncoderConfig
    projection: np.ndarray = field(repr=False)

    def encode(self, prompt_vectors: np.ndarray, class_embedding: np.ndarray) -> TextEncoding:
        return encode_text(self, prompt_vectors, class_embedding)


def _semi_orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    draw = rng.standard_normal((rows, cols))
    if rows >= cols:
        q, _ = np.linalg.qr(draw)
        return q
    q, _ = np.linalg.qr(draw.T)
    return q.T


def build_encoders(config: EncoderConfig) -> tuple[ImageEncoder, TextEncoder]:
    """Build the frozen towers from a seed.

    :param config: encoder dimensions and seed
    :type config: EncoderConfig
    :return: image and text encoder handles with read-only weights
    :rtype: tuple[ImageEncoder, TextEncoder]
    """
    d, v, e = config.feature_dim, config.patch_count, config.embed_dim
    rng = np.random.default_rng(config.seed)
    projection = _semi_orthogonal(rng, d, e)
    jitter = rng.standard_normal((v, d, e)) / np.sqrt(e)
    patch_maps = projection[None, :, :] + config.patch_jitter * jitter

    projection.flags.writeable = False
    patch_maps.flags.writeable = False
    return ImageEncoder(config, patch_maps), TextEncoder(config, projection)


def encode_image(handle: ImageEncoder, raw_sample: np.ndarray) -> ImageEncoding:
    """Encode one raw sample, or a stack of them along leading axes.

    :param handle: image encoder
    :type handle: ImageEncoder
    :param raw_sample: array of shape (..., e)
    :type raw_sample: np.ndarray
    :raises ShapeMismatchError: if the last axis is not the encoder input size
    :raises NumericalError: if a patch row is zero (e.g. zero input)
    :return: unit patch rows (..., V, d) and unit pooled feature (..., d)
    :rtype: ImageEncoding
    """
    raw = np.asarray(raw_sample, dtype=np.float64)
    if raw.ndim < 1 or raw.shape[-1] != handle.input_dim:
        raise ShapeMismatchError(
            f"raw sample has dimension {raw.shape[-1] if raw.ndim else 0}, encoder expects {handle.input_dim}"
        )
    require_finite("raw sample", raw)
    rows = np.einsum("vde,...e->...vd", handle.patch_maps, raw)
    patches, _ = normalize_rows(rows, "patch row")
    pooled, _ = normalize_rows(patches.mean(axis=-2), "pooled feature")
    return ImageEncoding(patch_features=patches, pooled_feature=pooled)


def encode_text(
    handle: TextEncoder, prompt_vectors: np.ndarray, class_embedding: np.ndarray
) -> TextEncoding:
    """Encode ``[V]_1..[V]_{h/2} [CLASS] [V]_{h/2+1}..[V]_h``.

    The jacobian is taken w.r.t. the row-major flattening of ``prompt_vectors``;
    mean-pooling gives every prompt vector the same block.

    :param handle: text encoder
    :type handle: TextEncoder
    :param prompt_vectors: learnable context, shape (h, e), h even
    :type prompt_vectors: np.ndarray
    :param class_embedding: class token, shape (e,)
    :type class_embedding: np.ndarray
    :raises ConfigError: if h is odd or zero
    :raises NumericalError: if the pooled projection is zero
    :return: unit feature (d,) and jacobian (d, h*e)
    :rtype: TextEncoding
    """
    prompts = np.asarray(prompt_vectors, dtype=np.float64)
    token = np.asarray(class_embedding, dtype=np.float64)
    e = handle.config.embed_dim
    if prompts.ndim != 2 or prompts.shape[1] != e or token.shape != (e,):
        raise ShapeMismatchError(
            f"prompt {prompts.shape} / class token {token.shape} do not match embed_dim {e}"
        )
    h = prompts.shape[0]
    if h == 0 or h % 2:
        raise ConfigError(f"prompt length must be even and positive, got {h}")
    require_finite("prompt vectors", prompts, token)

    tokens = np.concatenate([prompts[: h // 2], token[None, :], prompts[h // 2 :]])
    projected = handle.projection @ tokens.mean(axis=0)
    norm = float(np.linalg.norm(projected))
    if norm == 0.0:
        raise NumericalError("text feature is zero before normalization")
    feature = projected / norm

    block = normalize_jacobian(feature, norm) @ handle.projection / (h + 1)
    return TextEncoding(feature=feature, jacobian=np.tile(block, (1, h)))
