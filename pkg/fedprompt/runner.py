import json
import logging
import platform
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd
import scipy

from fedprompt import __version__
from fedprompt.config import ExperimentConfig, config_hash
from fedprompt.datasets import (
    PRESETS,
    DatasetPreset,
    EncodedDataset,
    PartitionResult,
    PartitionSpec,
    SyntheticDataset,
    encode_dataset,
    gen_synthetic,
    partition,
    shift_clients,
)
from fedprompt.encoders import EncoderConfig, ImageEncoder, TextEncoder, build_encoders
from fedprompt.errors import ConfigError, ShapeMismatchError, StorageError
from fedprompt.federation import (
    ClientState,
    MessageObserver,
    ServerState,
    TrainingHistory,
    evaluate_client,
    make_server,
    run_rounds,
)
from fedprompt.objective import AlignmentConfig, ObjectiveContext
from fedprompt.prompts import (
    PredictionConfig,
    PromptSet,
    bind_classes,
    init_prompts,
    load_prompt_set,
    save_prompt_set,
    template_prompts,
)
from fedprompt.transport import TransportConfig

logger = logging.getLogger(__name__)

SEED_STREAMS = {"encoders": 1, "data": 2, "partition": 3, "prompts": 4, "clients": 5, "shift": 6}
ABLATION_ARMS = {
    "dpm": {"dual_prompt": True},
    "spm": {"dual_prompt": False},
    "dpac": {"dpac": True},
    "no-dpac": {"dpac": False},
    "cmfac": {"cmfac": True},
    "no-cmfac": {"cmfac": False},
}
BASELINES = ("template",)


def derive_seed(master: int, stream: str, *extra: int) -> int:
    """Independent 64-bit seed for one named stream of a run."""
    entropy = [master, SEED_STREAMS[stream], *extra]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def derived_seeds(config: ExperimentConfig) -> dict[str, int]:
    return {stream: derive_seed(config.seed, stream) for stream in SEED_STREAMS}


def dataset_layout(config: ExperimentConfig) -> DatasetPreset:
    """Class layout of the run: config fields for ``synthetic``, the preset otherwise."""
    if config.dataset == "synthetic":
        return DatasetPreset(config.n_classes, config.per_class, config.train_fraction)
    return PRESETS[config.dataset]


def objective_context(config: ExperimentConfig, text_encoder: TextEncoder) -> ObjectiveContext:
    return ObjectiveContext(
        text_encoder=text_encoder,
        prediction=PredictionConfig(config.tau),
        alignment=AlignmentConfig(config.dpac_scale, config.dpac_weight, config.dpac, config.cmfac),
        transport=TransportConfig(config.ot_lambda, config.ot_max_iters, config.ot_tol, config.alpha_scale),
        dual_prompt=config.dual_prompt,
    )


@dataclass(eq=False)
class Experiment:
    config: ExperimentConfig
    seeds: dict[str, int]
    image_encoder: ImageEncoder
    context: ObjectiveContext
    dataset: SyntheticDataset
    data: EncodedDataset
    split: PartitionResult
    clients: list[ClientState]
    server: ServerState


def build_experiment(config: ExperimentConfig) -> Experiment:
    """Encoders, data, partition, prompts, clients and server for one run.

    Every random draw comes from a stream derived from ``config.seed``.

    :param config: validated experiment config
    :type config: ExperimentConfig
    :return: ready-to-train experiment
    :rtype: Experiment
    """
    seeds = derived_seeds(config)
    layout = dataset_layout(config)
    image_encoder, text_encoder = build_encoders(
        EncoderConfig(config.feature_dim, config.patch_count, config.embed_dim, seeds["encoders"], config.patch_jitter)
    )
    dataset = gen_synthetic(
        layout.n_classes, layout.images_per_class, config.embed_dim, config.sigma, seeds["data"], config.domain_shift
    )
    split = partition(
        PartitionSpec(layout.n_classes, layout.images_per_class, layout.train_fraction, config.n_clients, seeds["partition"])
    )
    dataset = shift_clients(dataset, split, config.client_shift, seeds["shift"])
    prompts = bind_classes(
        init_prompts(config.shared_len, config.private_len, config.embed_dim, layout.n_classes, seeds["prompts"]),
        dataset.class_tokens,
    )
    clients = [
        ClientState(
            client_id=i,
            prompts=prompts.with_prompts(prompts.shared.copy(), prompts.private.copy()),
            train_indices=split.train[i],
            test_indices=split.test[i],
            lr=config.lr,
            rng=np.random.default_rng(derive_seed(config.seed, "clients", i)),
        )
        for i in range(config.n_clients)
    ]
    server = make_server(clients, prompts.shared, config.aggregation)
    return Experiment(
        config=config,
        seeds=seeds,
        image_encoder=image_encoder,
        context=objective_context(config, text_encoder),
        dataset=dataset,
        data=encode_dataset(dataset, image_encoder),
        split=split,
        clients=clients,
        server=server,
    )


def train_experiment(config: ExperimentConfig, observer: MessageObserver | None = None) -> tuple[Experiment, TrainingHistory]:
    experiment = build_experiment(config)
    history = run_rounds(
        experiment.clients,
        experiment.server,
        experiment.context,
        experiment.data,
        rounds=config.rounds,
        epochs=config.local_epochs,
        batch_size=config.batch_size,
        eval_batch_size=config.eval_batch_size,
        observer=observer,
    )
    return experiment, history


def _versions() -> dict[str, str]:
    return {
        "fedprompt": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def _write_json(path: Path, payload: dict) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def _finite_or_none(value: float) -> float | None:
    return None if np.isnan(value) else float(value)


def run_experiment(config: ExperimentConfig, observer: MessageObserver | None = None) -> Path:
    """Train and write ``history.csv``, ``manifest.json`` and ``checkpoints/`` under ``config.out_dir``.

    :param config: validated experiment config
    :type config: ExperimentConfig
    :param observer: optional callback for every round message
    :type observer: MessageObserver | None
    :raises StorageError: if the run directory cannot be written
    :return: the run directory
    :rtype: Path
    """
    out_dir = Path(config.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create run directory {out_dir}: {e}") from e
    logger.info("Starting run in %s (seed %d, %d clients, %d rounds)", out_dir, config.seed, config.n_clients, config.rounds)

    experiment, history = train_experiment(config, observer)
    try:
        history.to_frame().to_csv(out_dir / "history.csv", index=False)
    except OSError as e:
        raise StorageError(f"cannot write history to {out_dir}: {e}") from e
    for client in experiment.clients:
        save_prompt_set(out_dir / "checkpoints" / f"client_{client.client_id}", client.prompts)

    _write_json(
        out_dir / "manifest.json",
        {
            "config": asdict(config),
            "config_hash": config_hash(config),
            "seeds": experiment.seeds,
            "versions": _versions(),
            "summary": {
                "rounds": experiment.server.round,
                "final_mean_accuracy": _finite_or_none(history.mean_accuracy()),
                "bytes_up": experiment.server.bytes_up,
                "bytes_down": experiment.server.bytes_down,
            },
        },
    )
    logger.info("Run finished: final mean accuracy %s", history.mean_accuracy())
    return out_dir


def _check_prompt_shapes(prompts: PromptSet, config: ExperimentConfig, n_classes: int, where: Path) -> None:
    expected = {
        "shared": (config.shared_len, config.embed_dim),
        "private": (config.private_len, config.embed_dim),
        "classes": (n_classes, config.embed_dim),
    }
    actual = {"shared": prompts.shared.shape, "private": prompts.private.shape, "classes": prompts.class_embeddings.shape}
    for name, shape in expected.items():
        if actual[name] != shape:
            raise ShapeMismatchError(f"{where}: '{name}' has shape {actual[name]}, config expects {shape}")


def evaluate(checkpoint_dir: str | Path, config: ExperimentConfig, baseline: str | None = None) -> dict:
    """Test accuracy of saved client prompts on the run's data and partition.

    :param checkpoint_dir: directory holding ``client_<i>/`` prompt sets
    :type checkpoint_dir: str | Path
    :param config: config of the run that produced the checkpoints
    :type config: ExperimentConfig
    :param baseline: ``"template"`` replaces learned context vectors with zeros
    :type baseline: str | None
    :raises ShapeMismatchError: naming the tensor that disagrees with the config
    :raises StorageError: on missing or corrupt checkpoint files
    :return: per-client and mean accuracy
    :rtype: dict
    """
    if baseline is not None and baseline not in BASELINES:
        raise ConfigError(f"unknown baseline {baseline!r}")
    checkpoint_dir = Path(checkpoint_dir)
    experiment = build_experiment(config)
    n_classes = dataset_layout(config).n_classes

    results = []
    for client in experiment.clients:
        where = checkpoint_dir / f"client_{client.client_id}"
        prompts = load_prompt_set(where)
        _check_prompt_shapes(prompts, config, n_classes, where)
        client.prompts = template_prompts(prompts) if baseline == "template" else prompts
        accuracy = evaluate_client(client, experiment.context, experiment.data, config.eval_batch_size)
        results.append({"client_id": client.client_id, "accuracy": accuracy})

    metrics = {
        "checkpoint_dir": str(checkpoint_dir),
        "baseline": baseline,
        "prediction": "transport" if config.cmfac else "cosine",
        "clients": results,
        "mean_accuracy": float(np.mean([r["accuracy"] for r in results])),
    }
    logger.info("Evaluated %d clients: mean accuracy %.4f", len(results), metrics["mean_accuracy"])
    return metrics


def random_checkpoint(config: ExperimentConfig, out: str | Path, seed: int | None = None) -> Path:
    """Write freshly initialized, dataset-unbound prompts for every client."""
    out = Path(out)
    seed = config.seed if seed is None else seed
    n_classes = dataset_layout(config).n_classes
    for i in range(config.n_clients):
        prompts = init_prompts(
            config.shared_len, config.private_len, config.embed_dim, n_classes, derive_seed(seed, "prompts", i)
        )
        save_prompt_set(out / f"client_{i}", prompts)
    return out


def sweep_ablation(config: ExperimentConfig, seeds: Iterable[int]) -> pd.DataFrame:
    """Final mean accuracy of every ablation arm for every seed.

    :param config: base config; each arm flips one switch
    :type config: ExperimentConfig
    :param seeds: master seeds
    :type seeds: Iterable[int]
    :return: one row per (arm, seed) with columns ``arm``, ``seed``, ``accuracy``
    :rtype: pd.DataFrame
    """
    rows = []
    for seed in seeds:
        for arm, switches in ABLATION_ARMS.items():
            _, history = train_experiment(replace(config, seed=seed, **switches))
            rows.append({"arm": arm, "seed": seed, "accuracy": history.mean_accuracy()})
            logger.info("Ablation arm %s, seed %d: %.4f", arm, seed, rows[-1]["accuracy"])
    return pd.DataFrame(rows, columns=["arm", "seed", "accuracy"])
