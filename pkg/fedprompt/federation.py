import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
import pandas as pd

from fedprompt.config import Config
from fedprompt.datasets import EncodedDataset
from fedprompt.errors import ConfigError, ProtocolError
from fedprompt.objective import (
    ObjectiveContext,
    dpac_aggregate,
    predict_proba,
    sgd_step,
    snapshot_features,
    total_loss_and_grad,
)
from fedprompt.prompts import PromptSet

logger = logging.getLogger(__name__)

BYTES_PER_VALUE = 8
HISTORY_COLUMNS = ("round", "client_id", "accuracy", "ce", "dpac", "bytes_up", "bytes_down")


@dataclass(eq=False)
class ClientState:
    client_id: int
    prompts: PromptSet
    train_indices: np.ndarray
    test_indices: np.ndarray
    lr: float
    rng: np.random.Generator
    snapshots: tuple[np.ndarray, ...] = ()
    train_ce: float = float("nan")
    train_dpac: float = float("nan")
    unconverged_steps: int = 0

    @property
    def n_train(self) -> int:
        return int(self.train_indices.size)


@dataclass(eq=False)
class ServerState:
    global_shared: np.ndarray
    client_weights: np.ndarray
    aggregation: str = "weighted"
    round: int = 0
    shared_snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    bytes_up: int = 0
    bytes_down: int = 0

    @property
    def n_clients(self) -> int:
        return self.client_weights.shape[0]

    @property
    def bytes_transmitted(self) -> int:
        return self.bytes_up + self.bytes_down


@dataclass(frozen=True, eq=False)
class RoundMessage:
    """What crosses the wire in one direction for one client.

    Only shared prompt values can be carried: the payload and, on the downlink, the
    other clients' last shared prompts.
    """

    direction: Literal["up", "down"]
    client_id: int
    payload: np.ndarray
    snapshots: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if self.direction not in ("up", "down"):
            raise ProtocolError(f"unknown message direction {self.direction!r}")
        if self.direction == "up" and self.snapshots:
            raise ProtocolError("uplink messages carry no snapshots")
        payload = np.array(self.payload, dtype=np.float64)
        payload.flags.writeable = False
        snapshots = tuple(np.array(s, dtype=np.float64) for s in self.snapshots)
        for snapshot in snapshots:
            snapshot.flags.writeable = False
        object.__setattr__(self, "payload", payload)
        object.__setattr__(self, "snapshots", snapshots)

    @property
    def value_count(self) -> int:
        return self.payload.size + sum(s.size for s in self.snapshots)

    @property
    def n_bytes(self) -> int:
        return self.value_count * BYTES_PER_VALUE


MessageObserver = Callable[[RoundMessage], None]


@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)
    round_dpac: list[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(HISTORY_COLUMNS))

    def mean_accuracy(self, round_no: int | None = None) -> float:
        """Mean client accuracy in ``round_no`` (default: the last recorded round)."""
        if not self.rows:
            return float("nan")
        if round_no is None:
            round_no = self.rows[-1]["round"]
        values = [row["accuracy"] for row in self.rows if row["round"] == round_no]
        return float(np.mean(values)) if values else float("nan")


def make_server(clients: Sequence[ClientState], global_shared: np.ndarray, aggregation: str = "weighted") -> ServerState:
    """Server state for a fixed client set.

    :raises ConfigError: on overlapping client data, empty clients or an unknown aggregation mode
    """
    if aggregation not in Config.AGGREGATION_MODES:
        raise ConfigError(f"unknown aggregation mode {aggregation!r}")
    if [c.client_id for c in clients] != list(range(len(clients))):
        raise ConfigError("client ids must be 0..N-1 in order")
    seen = np.concatenate([np.concatenate([c.train_indices, c.test_indices]) for c in clients])
    if np.unique(seen).size != seen.size:
        raise ConfigError("client datasets overlap")
    sizes = np.array([c.n_train for c in clients], dtype=np.float64)
    if np.any(sizes < 1):
        raise ConfigError("every client needs at least one training sample")
    weights = sizes / sizes.sum()
    return ServerState(global_shared=np.array(global_shared, dtype=np.float64), client_weights=weights, aggregation=aggregation)


def local_train(
    client: ClientState,
    context: ObjectiveContext,
    data: EncodedDataset,
    global_shared: np.ndarray,
    snapshots: Sequence[np.ndarray],
    epochs: int,
    batch_size: int,
) -> tuple[ClientState, RoundMessage]:
    """Run local epochs from the global shared prompt and report the new shared prompt.

    :param client: client to train; its prompts, rng and loss stats are updated in place
    :type client: ClientState
    :param context: objective settings
    :type context: ObjectiveContext
    :param data: encoded samples addressed by the client's indices
    :type data: EncodedDataset
    :param global_shared: current global shared prompt
    :type global_shared: np.ndarray
    :param snapshots: other clients' shared prompts from the last broadcast
    :type snapshots: Sequence[np.ndarray]
    :param epochs: local epochs, >= 0
    :type epochs: int
    :param batch_size: minibatch size
    :type batch_size: int
    :raises ConfigError: if the client has no training data
    :return: the client and its uplink message
    :rtype: tuple[ClientState, RoundMessage]
    """
    if client.n_train == 0:
        raise ConfigError(f"client {client.client_id} has an empty training set")
    global_shared = np.asarray(global_shared, dtype=np.float64)
    if global_shared.shape != client.prompts.shared.shape:
        raise ProtocolError(
            f"global shared prompt {global_shared.shape} does not match client prompt {client.prompts.shared.shape}"
        )
    prompts = client.prompts.with_prompts(shared=global_shared.copy())
    others = snapshot_features(context, prompts, snapshots) if context.uses_dpac else []

    ce_values, dpac_values = [], []
    unconverged = 0
    for _ in range(epochs):
        order = client.rng.permutation(client.train_indices)
        for start in range(0, order.size, batch_size):
            report = total_loss_and_grad(context, prompts, data.batch(order[start : start + batch_size]), others)
            shared = sgd_step(prompts.shared, report.grad_shared, client.lr)
            private = prompts.private
            if context.dual_prompt:
                private = sgd_step(prompts.private, report.grad_private, client.lr)
            prompts = prompts.with_prompts(shared, private)
            ce_values.append(report.ce)
            dpac_values.append(report.dpac)
            unconverged += not report.converged

    client.prompts = prompts
    client.train_ce = float(np.mean(ce_values)) if ce_values else float("nan")
    client.train_dpac = float(np.mean(dpac_values)) if dpac_values else float("nan")
    client.unconverged_steps = unconverged
    if unconverged:
        logger.warning(
            "Client %d: %d of %d steps used unconverged transport plans; raise ot_max_iters or ot_lambda",
            client.client_id,
            unconverged,
            len(ce_values),
        )
    logger.debug("Client %d trained %d steps, ce=%.6f", client.client_id, len(ce_values), client.train_ce)
    return client, RoundMessage("up", client.client_id, prompts.shared)


def aggregate(server: ServerState, up_messages: Sequence[RoundMessage]) -> ServerState:
    """Weighted mean of the uplinked shared prompts, reduced in client-id order.

    :param server: server to update in place
    :type server: ServerState
    :param up_messages: exactly one uplink message per client
    :type up_messages: Sequence[RoundMessage]
    :raises ProtocolError: on a missing, duplicate, misdirected or misshaped message
    :return: the updated server
    :rtype: ServerState
    """
    by_id = {}
    for message in up_messages:
        if message.direction != "up":
            raise ProtocolError(f"expected an uplink message, got {message.direction!r} from client {message.client_id}")
        if message.client_id in by_id:
            raise ProtocolError(f"duplicate message from client {message.client_id}")
        if message.payload.shape != server.global_shared.shape:
            raise ProtocolError(f"client {message.client_id} sent payload of shape {message.payload.shape}")
        by_id[message.client_id] = message
    missing = sorted(set(range(server.n_clients)) - set(by_id))
    if missing or len(by_id) != server.n_clients:
        raise ProtocolError(f"round {server.round + 1}: missing messages from clients {missing or sorted(by_id)}")

    total = np.zeros_like(server.global_shared)
    for client_id in range(server.n_clients):
        total = total + server.client_weights[client_id] * by_id[client_id].payload
    if server.aggregation == "literal":
        total = total / server.n_clients

    server.global_shared = total
    server.shared_snapshots = {cid: by_id[cid].payload for cid in range(server.n_clients)}
    server.round += 1
    server.bytes_up += sum(m.n_bytes for m in up_messages)
    return server


def broadcast(server: ServerState) -> list[RoundMessage]:
    """Downlink for every client: the global shared prompt plus the others' snapshots."""
    messages = []
    for client_id in range(server.n_clients):
        snapshots = tuple(server.shared_snapshots[j] for j in sorted(server.shared_snapshots) if j != client_id)
        messages.append(RoundMessage("down", client_id, server.global_shared, snapshots))
    server.bytes_down += sum(m.n_bytes for m in messages)
    return messages


def apply_broadcast(client: ClientState, message: RoundMessage) -> ClientState:
    if message.direction != "down" or message.client_id != client.client_id:
        raise ProtocolError(f"client {client.client_id} cannot apply {message.direction} message for {message.client_id}")
    client.prompts = client.prompts.with_prompts(shared=np.array(message.payload))
    client.snapshots = message.snapshots
    return client


def evaluate_client(
    client: ClientState, context: ObjectiveContext, data: EncodedDataset, eval_batch_size: int = 100
) -> float:
    """Test accuracy of the client's current prompts."""
    if client.test_indices.size == 0:
        raise ConfigError(f"client {client.client_id} has an empty test set")
    correct = 0
    for start in range(0, client.test_indices.size, eval_batch_size):
        batch = data.batch(client.test_indices[start : start + eval_batch_size])
        probs = predict_proba(context, client.prompts, batch)
        correct += int(np.sum(np.argmax(probs, axis=1) == batch.labels))
    return correct / client.test_indices.size


def run_rounds(
    clients: Sequence[ClientState],
    server: ServerState,
    context: ObjectiveContext,
    data: EncodedDataset,
    rounds: int,
    epochs: int = 1,
    batch_size: int = 32,
    eval_batch_size: int = 100,
    observer: MessageObserver | None = None,
    workers: int | None = None,
) -> TrainingHistory:
    """Synchronous federated rounds: local training, aggregation, broadcast, evaluation.

    :param clients: client states, ids 0..N-1
    :type clients: Sequence[ClientState]
    :param server: server state
    :type server: ServerState
    :param context: objective settings
    :type context: ObjectiveContext
    :param data: encoded samples
    :type data: EncodedDataset
    :param rounds: number of rounds R
    :type rounds: int
    :param epochs: local epochs per round
    :type epochs: int
    :param batch_size: training minibatch size
    :type batch_size: int
    :param eval_batch_size: evaluation batch size
    :type eval_batch_size: int
    :param observer: called with every message, uplink and downlink
    :type observer: MessageObserver | None
    :param workers: client threads per round, defaults to ``Config.WORKERS``
    :type workers: int | None
    :return: per-client rows for every round
    :rtype: TrainingHistory
    """
    history = TrainingHistory()
    workers = max(1, workers or Config.WORKERS)

    def train(client: ClientState) -> RoundMessage:
        _, message = local_train(
            client, context, data, server.global_shared, client.snapshots, epochs, batch_size
        )
        return message

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for _ in range(rounds):
            up_messages = list(pool.map(train, clients)) if workers > 1 else [train(c) for c in clients]
            for message in up_messages:
                if observer is not None:
                    observer(message)
            aggregate(server, up_messages)
            down_messages = broadcast(server)
            for client, message in zip(clients, down_messages):
                if observer is not None:
                    observer(message)
                apply_broadcast(client, message)

            for client, up, down in zip(clients, up_messages, down_messages):
                history.rows.append(
                    {
                        "round": server.round,
                        "client_id": client.client_id,
                        "accuracy": evaluate_client(client, context, data, eval_batch_size),
                        "ce": client.train_ce,
                        "dpac": client.train_dpac,
                        "bytes_up": up.n_bytes,
                        "bytes_down": down.n_bytes,
                    }
                )
            history.round_dpac.append(dpac_aggregate([c.train_dpac for c in clients]))
            logger.info(
                "Round %d: mean accuracy %.4f, alignment loss %.4f, %d bytes transmitted",
                server.round,
                history.mean_accuracy(server.round),
                history.round_dpac[-1],
                server.bytes_transmitted,
            )
    return history
