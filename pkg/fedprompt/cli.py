import json
import logging
from pathlib import Path

import click

from fedprompt import __version__, create_logger
from fedprompt.config import ExperimentConfig, load_config
from fedprompt.datasets import PRESETS, PartitionSpec, partition
from fedprompt.errors import ConfigError, FedPromptError, NumericalError, StorageError
from fedprompt.gradcheck import run_gradcheck
from fedprompt.runner import BASELINES, evaluate, random_checkpoint, run_experiment, sweep_ablation
from fedprompt.transport import problem_from_json, solution_to_json, solve_dykstra

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCES = {
    "text_jacobian": 1e-4,
    "softmax_shared": 1e-4,
    "softmax_private": 1e-4,
    "dpac_shared": 1e-4,
    "dpac_private": 1e-4,
    "full_shared": 1e-3,
    "full_private": 1e-3,
}


class FedPromptGroup(click.Group):
    """Maps package errors to ``error: <category>: <message>`` and the category's exit code."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except FedPromptError as e:
            click.echo(f"error: {e.category}: {e}", err=True)
            ctx.exit(e.exit_code)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except Exception as e:
            logger.exception("Unexpected failure")
            click.echo(f"error: {FedPromptError.category}: {e}", err=True)
            ctx.exit(FedPromptError.exit_code)


def _config(path: str | None, **overrides) -> ExperimentConfig:
    config = load_config(path) if path else ExperimentConfig()
    return config.override(**overrides)


def _read_json(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out is None:
        click.echo(text)
        return
    try:
        Path(out).write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {out}: {e}") from e


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON experiment config.")
seed_option = click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")
out_option = click.option("--out", type=click.Path(), default=None, help="Output location.")


@click.group(cls=FedPromptGroup)
@click.version_option(version=__version__, prog_name="fedprompt")
def cli():
    """Federated dual-prompt learning simulator."""
    create_logger()


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--rounds", type=int, default=None)
@click.option("--clients", "n_clients", type=int, default=None)
def train(config_path, seed, out, rounds, n_clients):
    """Run federated training and write history, manifest and checkpoints."""
    config = _config(config_path, seed=seed, out_dir=out, rounds=rounds, n_clients=n_clients)
    click.echo(str(run_experiment(config)))


@cli.command("evaluate")
@click.argument("checkpoint_dir", type=click.Path(file_okay=False))
@config_option
@seed_option
@out_option
@click.option("--baseline", type=click.Choice(BASELINES), default=None)
def evaluate_command(checkpoint_dir, config_path, seed, out, baseline):
    """Evaluate saved client prompts; writes metrics.json next to the checkpoints."""
    config = _config(config_path, seed=seed)
    metrics = evaluate(checkpoint_dir, config, baseline)
    _emit(metrics, out or str(Path(checkpoint_dir).parent / "metrics.json"))
    click.echo(json.dumps(metrics, indent=2, sort_keys=True))


@cli.command("partition")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="synthetic")
@click.option("--clients", "n_clients", type=int, required=True)
@click.option("--seed", type=int, default=0)
@out_option
def partition_command(preset, n_clients, seed, out):
    """Write per-client index lists and counts as CSV."""
    result = partition(PartitionSpec.from_preset(preset, n_clients, seed))
    counts = result.counts_frame()
    if out is not None:
        out_dir = Path(out)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            result.indices_frame().to_csv(out_dir / "partition.csv", index=False)
            counts.to_csv(out_dir / "counts.csv", index=False)
        except OSError as e:
            raise StorageError(f"cannot write partition to {out_dir}: {e}") from e
    click.echo(counts.to_csv(index=False), nl=False)


@cli.command()
@click.option("--seed", type=int, default=0)
@click.option("--configs", type=int, default=1, help="Number of seeded configurations.")
def gradcheck(seed, configs):
    """Compare analytic gradients against central finite differences."""
    worst = {}
    for offset in range(configs):
        for block, error in run_gradcheck(seed=seed + offset).items():
            worst[block] = max(worst.get(block, 0.0), error)
    for block, error in worst.items():
        click.echo(f"{block}\t{error:.3e}")
    failed = [block for block, error in worst.items() if error > GRADCHECK_TOLERANCES[block]]
    if failed:
        raise NumericalError(f"gradient check failed for {', '.join(failed)}")


@cli.command("ot-solve")
@click.argument("problem_file", type=click.Path(dir_okay=False))
@out_option
def ot_solve(problem_file, out):
    """Solve one transport problem given as JSON."""
    problem = problem_from_json(_read_json(problem_file))
    plan = solve_dykstra(problem)
    _emit(solution_to_json(problem, plan), out)


@cli.command()
@config_option
@click.option("--seeds", type=int, default=5, help="Number of master seeds, starting at --seed.")
@seed_option
@out_option
def ablate(config_path, seeds, seed, out):
    """Final accuracy of every ablation arm over several seeds."""
    config = _config(config_path)
    first = config.seed if seed is None else seed
    table = sweep_ablation(config, range(first, first + seeds))
    summary = table.groupby("arm", sort=False)["accuracy"].mean()
    if out is not None:
        try:
            table.to_csv(out, index=False)
        except OSError as e:
            raise StorageError(f"cannot write {out}: {e}") from e
    click.echo(summary.to_csv(header=True), nl=False)


@cli.command("random-checkpoint")
@config_option
@seed_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
def random_checkpoint_command(config_path, seed, out):
    """Write randomly initialized prompts for every client (chance-level reference)."""
    config = _config(config_path)
    click.echo(str(random_checkpoint(config, out, seed)))
