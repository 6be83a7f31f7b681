"""Per-class even partitioning across clients and the synthetic embedding dataset."""

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from fedprompt._linalg import normalize_rows
from fedprompt.encoders import ImageEncoder, encode_image
from fedprompt.errors import ConfigError, ShapeMismatchError
from fedprompt.objective import Batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetPreset:
    n_classes: int
    images_per_class: int
    train_fraction: float


PRESETS = {
    "fed-optimal": DatasetPreset(31, 60, 0.5),
    "fed-ucmerced": DatasetPreset(21, 100, 0.5),
    "fed-nwpu": DatasetPreset(45, 700, 0.2),
    "synthetic": DatasetPreset(8, 40, 0.5),
}

# Per-client (train, test) counts of the benchmark splits; cells where the split is not an integer
# are reported to within one image.
REFERENCE_COUNTS = {
    "fed-optimal": {2: (465, 465), 5: (186, 186), 10: (93, 93), 15: (62, 62), 20: (46, 46), 40: (23, 23)},
    "fed-ucmerced": {2: (525, 525), 5: (210, 210), 10: (105, 105), 15: (70, 70), 20: (52, 52), 40: (26, 26)},
    "fed-nwpu": {
        2: (3150, 12600),
        5: (1260, 5040),
        10: (630, 2520),
        15: (420, 1680),
        20: (315, 1260),
        40: (158, 630),
    },
}


@dataclass(frozen=True)
class PartitionSpec:
    n_classes: int
    images_per_class: int
    train_fraction: float
    n_clients: int
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.n_classes < 2:
            raise ConfigError(f"at least 2 classes are required, got {self.n_classes}")
        if self.images_per_class < 1:
            raise ConfigError(f"images_per_class must be >= 1, got {self.images_per_class}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie strictly between 0 and 1, got {self.train_fraction}")

    @classmethod
    def from_preset(cls, name: str, n_clients: int, seed: int = 0) -> "PartitionSpec":
        try:
            preset = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown dataset preset {name!r}") from None
        return cls(preset.n_classes, preset.images_per_class, preset.train_fraction, n_clients, seed)

    @property
    def train_per_class(self) -> int:
        return int(np.floor(self.images_per_class * self.train_fraction + 0.5))


@dataclass(frozen=True, eq=False)
class PartitionResult:
    train: tuple[np.ndarray, ...]
    test: tuple[np.ndarray, ...]

    @property
    def n_clients(self) -> int:
        return len(self.train)

    def counts_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "client_id": np.arange(self.n_clients),
                "train": [len(idx) for idx in self.train],
                "test": [len(idx) for idx in self.test],
            }
        )

    def indices_frame(self) -> pd.DataFrame:
        """Long-form table with one row per (client, split, sample index)."""
        frames = [
            pd.DataFrame({"client_id": client_id, "split": split, "index": indices})
            for client_id in range(self.n_clients)
            for split, indices in (("train", self.train[client_id]), ("test", self.test[client_id]))
        ]
        return pd.concat(frames, ignore_index=True)


def partition(spec: PartitionSpec) -> PartitionResult:
    """Split each class into train/test, then deal both splits round-robin over clients.

    Sample ``i`` belongs to class ``i // images_per_class``. Each split keeps one dealing
    pointer that carries over from class to class, starting at a seeded client, so client
    totals differ by at most one.

    :param spec: class layout, split fraction, client count and seed
    :type spec: PartitionSpec
    :raises ConfigError: if a class would end up with an empty train or test part
    :return: sorted per-client train and test index arrays
    :rtype: PartitionResult
    """
    n_train = spec.train_per_class
    if n_train == 0 or n_train == spec.images_per_class:
        raise ConfigError(
            f"train_fraction {spec.train_fraction} leaves an empty split for {spec.images_per_class} images per class"
        )
    rng = np.random.default_rng(spec.seed)
    start = int(rng.integers(spec.n_clients))
    train = [[] for _ in range(spec.n_clients)]
    test = [[] for _ in range(spec.n_clients)]
    train_ptr = test_ptr = start

    for k in range(spec.n_classes):
        ids = k * spec.images_per_class + rng.permutation(spec.images_per_class)
        for idx in ids[:n_train]:
            train[train_ptr % spec.n_clients].append(int(idx))
            train_ptr += 1
        for idx in ids[n_train:]:
            test[test_ptr % spec.n_clients].append(int(idx))
            test_ptr += 1

    result = PartitionResult(
        train=tuple(np.array(sorted(idx), dtype=np.int64) for idx in train),
        test=tuple(np.array(sorted(idx), dtype=np.int64) for idx in test),
    )
    logger.debug("Partitioned %dx%d samples over %d clients", spec.n_classes, spec.images_per_class, spec.n_clients)
    return result


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    samples: np.ndarray
    labels: np.ndarray
    prototypes: np.ndarray
    class_tokens: np.ndarray
    offset: np.ndarray
    sigma: float
    client_offsets: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def __len__(self) -> int:
        return self.labels.shape[0]


def gen_synthetic(
    n_classes: int, per_class: int, dim: int, sigma: float, seed: int, domain_shift: float = 2.0
) -> SyntheticDataset:
    """Seeded class-clustered raw samples.

    Every class has a unit class token (what the text side knows about the class). The
    image side sees the classes through a shared hidden offset: prototypes are
    ``normalize(class_token + offset)`` with ``|offset| = domain_shift``, and samples are
    prototypes plus N(0, sigma^2) noise, laid out class by class.

    :param n_classes: K >= 2
    :type n_classes: int
    :param per_class: samples per class
    :type per_class: int
    :param dim: raw sample dimension, equal to the encoder's embed dim
    :type dim: int
    :param sigma: noise standard deviation, >= 0
    :type sigma: float
    :param seed: RNG seed
    :type seed: int
    :param domain_shift: offset norm, >= 0
    :type domain_shift: float
    :raises ConfigError: on invalid sizes or negative sigma
    :return: the dataset
    :rtype: SyntheticDataset
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if domain_shift < 0:
        raise ConfigError(f"domain_shift must be >= 0, got {domain_shift}")
    if n_classes < 2 or per_class < 1 or dim < 1:
        raise ConfigError(f"invalid synthetic layout: K={n_classes}, per_class={per_class}, dim={dim}")

    rng = np.random.default_rng(seed)
    class_tokens, _ = normalize_rows(rng.standard_normal((n_classes, dim)), "class token")
    direction, _ = normalize_rows(rng.standard_normal(dim), "offset")
    offset = domain_shift * direction
    prototypes, _ = normalize_rows(class_tokens + offset, "prototype")
    labels = np.repeat(np.arange(n_classes), per_class)
    samples = prototypes[labels] + sigma * rng.standard_normal((labels.size, dim))
    return SyntheticDataset(
        samples=samples,
        labels=labels,
        prototypes=prototypes,
        class_tokens=class_tokens,
        offset=offset,
        sigma=sigma,
    )


def shift_clients(
    dataset: SyntheticDataset, split: PartitionResult, client_shift: float, seed: int
) -> SyntheticDataset:
    """Give every client its own view of the classes.

    Client ``i`` draws a direction ``c_i`` of norm ``client_shift`` and its samples (train and
    test) move to ``normalize(class_token + offset + c_i)`` with their noise kept. A single
    shared prompt can only fit the mean of the ``c_i``; a private prompt can fit its own.

    :param dataset: unshifted dataset
    :type dataset: SyntheticDataset
    :param split: client partition of ``dataset``
    :type split: PartitionResult
    :param client_shift: norm of every client offset, >= 0; 0 returns ``dataset`` unchanged
    :type client_shift: float
    :param seed: RNG seed for the directions
    :type seed: int
    :raises ConfigError: on a negative shift
    :return: dataset with per-client samples and ``client_offsets`` of shape (N, e)
    :rtype: SyntheticDataset
    """
    if client_shift < 0:
        raise ConfigError(f"client_shift must be >= 0, got {client_shift}")
    if client_shift == 0:
        return dataset

    rng = np.random.default_rng(seed)
    dim = dataset.samples.shape[1]
    directions, _ = normalize_rows(rng.standard_normal((split.n_clients, dim)), "client offset")
    client_offsets = client_shift * directions
    noise = dataset.samples - dataset.prototypes[dataset.labels]
    samples = dataset.samples.copy()
    for i, offset in enumerate(client_offsets):
        owned = np.concatenate([split.train[i], split.test[i]])
        shifted, _ = normalize_rows(dataset.class_tokens + dataset.offset + offset, "prototype")
        samples[owned] = shifted[dataset.labels[owned]] + noise[owned]
    return replace(dataset, samples=samples, client_offsets=client_offsets)


@dataclass(frozen=True, eq=False)
class EncodedDataset:
    patches: np.ndarray
    pooled: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def batch(self, indices: np.ndarray) -> Batch:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= len(self)):
            raise ShapeMismatchError(f"batch indices out of range for {len(self)} samples")
        return Batch(patches=self.patches[indices], pooled=self.pooled[indices], labels=self.labels[indices])


def encode_dataset(dataset: SyntheticDataset, image_encoder: ImageEncoder) -> EncodedDataset:
    encoding = encode_image(image_encoder, dataset.samples)
    return EncodedDataset(
        patches=encoding.patch_features, pooled=encoding.pooled_feature, labels=dataset.labels
    )


def nearest_prototype_accuracy(dataset: SyntheticDataset) -> float:
    """Accuracy of assigning each raw sample to its closest prototype."""
    dists = np.linalg.norm(dataset.samples[:, None, :] - dataset.prototypes[None, :, :], axis=-1)
    return float(np.mean(np.argmin(dists, axis=1) == dataset.labels))
