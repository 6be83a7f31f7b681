import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

from dotenv import load_dotenv
from jsonschema import Draft7Validator, validators

from fedprompt.errors import ConfigError, StorageError

load_dotenv()


class Config:
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    OUT_DIR = os.getenv("FEDPROMPT_OUT_DIR", "runs")
    WORKERS = int(os.getenv("FEDPROMPT_WORKERS", "1"))

    DATASET_PRESETS = ("synthetic", "fed-optimal", "fed-ucmerced", "fed-nwpu")
    AGGREGATION_MODES = ("weighted", "literal")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic"
    n_clients: int = 5
    rounds: int = 30
    local_epochs: int = 1
    lr: float = 0.001
    batch_size: int = 32
    eval_batch_size: int = 100
    tau: float = 0.01
    ot_lambda: float = 0.1
    ot_max_iters: int = 100
    ot_tol: float = 1e-8
    alpha_scale: float = 2.0
    dpac_scale: float = 10.0
    dpac_weight: float = 1.0
    shared_len: int = 4
    private_len: int = 4
    embed_dim: int = 32
    feature_dim: int = 32
    patch_count: int = 16
    patch_jitter: float = 0.25
    dual_prompt: bool = True
    dpac: bool = True
    cmfac: bool = True
    aggregation: str = "weighted"
    n_classes: int = 8
    per_class: int = 40
    sigma: float = 0.05
    domain_shift: float = 2.0
    client_shift: float = 0.0
    train_fraction: float = 0.5
    seed: int = 0
    out_dir: str = Config.OUT_DIR

    def override(self, **changes) -> "ExperimentConfig":
        """Return a validated copy with ``changes`` applied; ``None`` values are ignored."""
        changes = {k: v for k, v in changes.items() if v is not None}
        return validate_config({**asdict(self), **changes})


def _is_strict_integer(checker, instance) -> bool:
    # JSON 2.0 is a number, not a count
    return isinstance(instance, int) and not isinstance(instance, bool)


StrictValidator = validators.extend(
    Draft7Validator,
    type_checker=Draft7Validator.TYPE_CHECKER.redefine("integer", _is_strict_integer),
)

_positive_int = {"type": "integer", "minimum": 1}
_even_positive_int = {"type": "integer", "minimum": 2, "multipleOf": 2}
_positive_number = {"type": "number", "exclusiveMinimum": 0}

_config_schema = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {"type": "string", "enum": list(Config.DATASET_PRESETS)},
        "n_clients": _positive_int,
        "rounds": {"type": "integer", "minimum": 0},
        "local_epochs": {"type": "integer", "minimum": 0},
        "lr": _positive_number,
        "batch_size": _positive_int,
        "eval_batch_size": _positive_int,
        "tau": _positive_number,
        "ot_lambda": _positive_number,
        "ot_max_iters": _positive_int,
        "ot_tol": _positive_number,
        "alpha_scale": {"type": "number", "minimum": 1},
        "dpac_scale": _positive_number,
        "dpac_weight": {"type": "number", "minimum": 0},
        "shared_len": _even_positive_int,
        "private_len": _even_positive_int,
        "embed_dim": _positive_int,
        "feature_dim": _positive_int,
        "patch_count": _positive_int,
        "patch_jitter": {"type": "number", "minimum": 0},
        "dual_prompt": {"type": "boolean"},
        "dpac": {"type": "boolean"},
        "cmfac": {"type": "boolean"},
        "aggregation": {"type": "string", "enum": list(Config.AGGREGATION_MODES)},
        "n_classes": {"type": "integer", "minimum": 2},
        "per_class": _positive_int,
        "sigma": {"type": "number", "minimum": 0},
        "domain_shift": {"type": "number", "minimum": 0},
        "client_shift": {"type": "number", "minimum": 0},
        "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
        "out_dir": {"type": "string", "minLength": 1},
    },
}

_validator = StrictValidator(_config_schema)


def _field_name(error) -> str:
    if error.path:
        return str(error.path[-1])
    if error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(_config_schema["properties"]))
        return ", ".join(extra)
    return "<root>"


def validate_config(raw: dict) -> ExperimentConfig:
    """Check a raw mapping against the schema and build the config.

    :param raw: key/value mapping, e.g. parsed JSON
    :type raw: dict
    :raises ConfigError: naming the first offending field
    :return: validated config
    :rtype: ExperimentConfig
    """
    errors = sorted(_validator.iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        error = errors[0]
        raise ConfigError(f"invalid config field '{_field_name(error)}': {error.message}")
    return ExperimentConfig(**raw)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a JSON config file; missing keys take their defaults.

    :param path: config file path
    :type path: str | Path
    :raises ConfigError: on malformed JSON (with line/column) or invalid fields
    :raises StorageError: if the file cannot be read
    :return: validated config
    :rtype: ExperimentConfig
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return validate_config({**asdict(ExperimentConfig()), **raw})


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write config {path}: {e}") from e
    return path


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

