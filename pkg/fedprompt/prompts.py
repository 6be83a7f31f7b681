import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.special import softmax

from fedprompt._linalg import normalize_rows, require_finite
from fedprompt.encoders import TextEncoder, encode_text
from fedprompt.errors import ConfigError, ShapeMismatchError, StorageError

logger = logging.getLogger(__name__)

PromptRole = Literal["shared", "private"]

INIT_STD = 0.02

CHECKPOINT_MAGIC = b"FPRM"
CHECKPOINT_VERSION = 1
ROLE_TAGS = {"shared": 0, "private": 1, "classes": 2}
_HEADER_WORDS = 5


@dataclass(frozen=True, eq=False)
class PromptSet:
    shared: np.ndarray
    private: np.ndarray
    class_embeddings: np.ndarray
    bound: bool = False

    def __post_init__(self):
        for name in ("shared", "private", "class_embeddings"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.ndim != 2:
                raise ShapeMismatchError(f"{name} must be a matrix, got shape {value.shape}")
            require_finite(name, value)
            object.__setattr__(self, name, value)
        for name in ("shared", "private"):
            length = getattr(self, name).shape[0]
            if length == 0 or length % 2:
                raise ConfigError(f"{name} prompt length must be even and positive, got {length}")
        if self.n_classes < 2:
            raise ConfigError(f"at least 2 classes are required, got {self.n_classes}")
        widths = {self.shared.shape[1], self.private.shape[1], self.class_embeddings.shape[1]}
        if len(widths) != 1:
            raise ShapeMismatchError(f"prompt widths disagree: {sorted(widths)}")
        self.class_embeddings.flags.writeable = False

    @property
    def embed_dim(self) -> int:
        return self.shared.shape[1]

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def shared_len(self) -> int:
        return self.shared.shape[0]

    @property
    def private_len(self) -> int:
        return self.private.shape[0]

    def with_prompts(self, shared: np.ndarray | None = None, private: np.ndarray | None = None) -> "PromptSet":
        """Copy with new learnable prompts; class embeddings are carried over untouched."""
        return replace(
            self,
            shared=self.shared if shared is None else shared,
            private=self.private if private is None else private,
        )


@dataclass(frozen=True)
class PredictionConfig:
    tau: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau!r}")


def init_prompts(h_s: int, h_p: int, e: int, n_classes: int, seed: int) -> PromptSet:
    """Seeded prompt initialization.

    Context vectors are i.i.d. N(0, 0.02^2); class embeddings are seeded unit vectors.

    :param h_s: shared prompt length (even)
    :type h_s: int
    :param h_p: private prompt length (even)
    :type h_p: int
    :param e: embedding width
    :type e: int
    :param n_classes: number of classes K >= 2
    :type n_classes: int
    :param seed: RNG seed
    :type seed: int
    :return: unbound prompt set
    :rtype: PromptSet
    """
    for name, length in (("h_s", h_s), ("h_p", h_p)):
        if length < 2 or length % 2:
            raise ConfigError(f"{name} must be even and positive, got {length}")
    if n_classes < 2:
        raise ConfigError(f"at least 2 classes are required, got {n_classes}")
    if e < 1:
        raise ConfigError(f"embed dim must be positive, got {e}")
    rng = np.random.default_rng(seed)
    shared = rng.normal(0.0, INIT_STD, size=(h_s, e))
    private = rng.normal(0.0, INIT_STD, size=(h_p, e))
    classes, _ = normalize_rows(rng.standard_normal((n_classes, e)), "class embedding")
    return PromptSet(shared=shared, private=private, class_embeddings=classes)


def bind_classes(prompts: PromptSet, class_tokens: np.ndarray) -> PromptSet:
    """Attach a dataset's class tokens. Allowed once per prompt set."""
    if prompts.bound:
        raise ConfigError("class embeddings are already bound to a dataset")
    tokens = np.array(class_tokens, dtype=np.float64)
    if tokens.shape != prompts.class_embeddings.shape:
        raise ShapeMismatchError(
            f"class tokens have shape {tokens.shape}, prompts expect {prompts.class_embeddings.shape}"
        )
    return replace(prompts, class_embeddings=tokens, bound=True)


def template_prompts(prompts: PromptSet) -> PromptSet:
    """Hand-crafted template baseline: every context vector is zero."""
    return prompts.with_prompts(np.zeros_like(prompts.shared), np.zeros_like(prompts.private))


def assemble_prompt(prompts: PromptSet, class_k: int, which: PromptRole) -> tuple[np.ndarray, np.ndarray]:
    """Pick the prompt matrix and class token for class ``class_k``.

    The [CLASS] position is applied by ``encode_text``.
    """
    if not 0 <= class_k < prompts.n_classes:
        raise ConfigError(f"class index {class_k} out of range for {prompts.n_classes} classes")
    if which == "shared":
        return prompts.shared, prompts.class_embeddings[class_k]
    if which == "private":
        return prompts.private, prompts.class_embeddings[class_k]
    raise ConfigError(f"unknown prompt role {which!r}")


def class_text_features(
    encoder: TextEncoder, prompts: PromptSet, which: PromptRole
) -> tuple[np.ndarray, np.ndarray]:
    """Text features (K, d) and jacobians (K, d, h*e) for every class."""
    encodings = [
        encode_text(encoder, *assemble_prompt(prompts, k, which)) for k in range(prompts.n_classes)
    ]
    return (
        np.stack([enc.feature for enc in encodings]),
        np.stack([enc.jacobian for enc in encodings]),
    )


def predict_softmax_cosine(
    text_features: np.ndarray, image_pooled: np.ndarray, cfg: PredictionConfig
) -> np.ndarray:
    """Temperature softmax over cosine similarities.

    :param text_features: unit rows, shape (K, d)
    :type text_features: np.ndarray
    :param image_pooled: unit feature (d,) or a batch (B, d)
    :type image_pooled: np.ndarray
    :param cfg: temperature
    :type cfg: PredictionConfig
    :return: class probabilities, shape (K,) or (B, K)
    :rtype: np.ndarray
    """
    require_finite("prediction input", text_features, image_pooled)
    cosines = np.asarray(image_pooled) @ np.asarray(text_features).T
    return softmax(cosines / cfg.tau, axis=-1)


def save_prompt_matrix(path: str | Path, matrix: np.ndarray, role: str, n_classes: int) -> None:
    """Write one prompt matrix as ``FPRM`` + 5 x <u4 header + <f8 payload."""
    matrix = np.asarray(matrix, dtype=np.float64)
    header = np.array(
        [CHECKPOINT_VERSION, matrix.shape[0], matrix.shape[1], n_classes, ROLE_TAGS[role]], dtype="<u4"
    )
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(header.tobytes())
            fh.write(matrix.astype("<f8").tobytes())
    except OSError as e:
        raise StorageError(f"cannot write prompt file {path}: {e}") from e


def load_prompt_matrix(path: str | Path, role: str) -> tuple[np.ndarray, int]:
    """Read a matrix written by :func:`save_prompt_matrix`.

    :return: the matrix and the class count stored in the header
    :rtype: tuple[np.ndarray, int]
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read prompt file {path}: {e}") from e
    offset = len(CHECKPOINT_MAGIC) + 4 * _HEADER_WORDS
    if len(data) < offset or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise StorageError(f"{path} is not a prompt checkpoint")
    version, rows, cols, n_classes, tag = np.frombuffer(data, dtype="<u4", count=_HEADER_WORDS, offset=4)
    if version != CHECKPOINT_VERSION:
        raise StorageError(f"{path}: unsupported checkpoint version {version}")
    if tag != ROLE_TAGS[role]:
        raise StorageError(f"{path}: expected role {role!r}, found tag {tag}")
    if len(data) - offset != 8 * int(rows) * int(cols):
        raise StorageError(f"{path}: payload size does not match header {rows}x{cols}")
    matrix = np.frombuffer(data, dtype="<f8", offset=offset).reshape(int(rows), int(cols))
    return matrix.astype(np.float64), int(n_classes)


def save_prompt_set(directory: str | Path, prompts: PromptSet) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create checkpoint directory {directory}: {e}") from e
    save_prompt_matrix(directory / "shared.bin", prompts.shared, "shared", prompts.n_classes)
    save_prompt_matrix(directory / "private.bin", prompts.private, "private", prompts.n_classes)
    save_prompt_matrix(directory / "classes.bin", prompts.class_embeddings, "classes", prompts.n_classes)
    logger.debug("Prompt set written to %s", directory)
    return directory


def load_prompt_set(directory: str | Path) -> PromptSet:
    directory = Path(directory)
    shared, _ = load_prompt_matrix(directory / "shared.bin", "shared")
    private, _ = load_prompt_matrix(directory / "private.bin", "private")
    classes, _ = load_prompt_matrix(directory / "classes.bin", "classes")
    return PromptSet(shared=shared, private=private, class_embeddings=classes, bound=True)
