"""Unit tests for messages, aggregation and broadcast in fedprompt.federation."""

import logging

import numpy as np
import pytest

from fedprompt.datasets import encode_dataset, gen_synthetic
from fedprompt.errors import ConfigError, ProtocolError
from fedprompt.federation import (
    ClientState,
    RoundMessage,
    aggregate,
    apply_broadcast,
    broadcast,
    evaluate_client,
    local_train,
    make_server,
)


@pytest.fixture
def make_clients(prompts):
    """Factory fixture for clients with disjoint index ranges."""

    def _make(sizes, seed=0):
        clients, start = [], 0
        for i, size in enumerate(sizes):
            clients.append(
                ClientState(
                    client_id=i,
                    prompts=prompts,
                    train_indices=np.arange(start, start + size),
                    test_indices=np.arange(start + size, start + size + 2),
                    lr=0.01,
                    rng=np.random.default_rng(seed),
                )
            )
            start += size + 2
        return clients

    return _make


@pytest.fixture
def encoded(image_encoder):
    """Encoded synthetic samples: 3 classes of 10 over the small encoder."""
    return encode_dataset(gen_synthetic(3, 10, 8, 0.05, seed=1), image_encoder)


def _up(client_id, value, shape=(2, 8)):
    return RoundMessage("up", client_id, np.full(shape, float(value)))


def test_message_value_count():
    """Test that uplink size is the shared prompt size and bytes are 8 per value."""
    message = RoundMessage("up", 0, np.zeros((4, 512)))

    assert message.value_count == 2048
    assert message.n_bytes == 2048 * 8


def test_message_has_no_private_field():
    """Test that a message can only carry shared values."""
    fields = set(RoundMessage.__dataclass_fields__)

    assert fields == {"direction", "client_id", "payload", "snapshots"}
    with pytest.raises(TypeError):
        RoundMessage("up", 0, np.zeros(2), private=np.zeros(2))


def test_message_payload_is_a_read_only_copy():
    """Test that later changes to the sender's array do not leak into a message."""
    shared = np.zeros((2, 2))
    message = RoundMessage("up", 0, shared)
    shared[0, 0] = 5.0

    assert message.payload[0, 0] == 0.0
    with pytest.raises(ValueError):
        message.payload[0, 0] = 1.0


def test_uplink_rejects_snapshots():
    """Test that snapshots only travel downstream."""
    with pytest.raises(ProtocolError):
        RoundMessage("up", 0, np.zeros(2), (np.zeros(2),))


def test_server_weights_sum_to_one(make_clients, prompts):
    """Test that client weights are proportional to data size and normalized."""
    server = make_server(make_clients([1, 3, 6]), prompts.shared)

    assert server.client_weights == pytest.approx([0.1, 0.3, 0.6])
    assert abs(server.client_weights.sum() - 1.0) <= 1e-12


def test_make_server_rejects_overlap(make_clients, prompts):
    """Test that overlapping client data is refused at setup."""
    clients = make_clients([2, 2])
    clients[1].train_indices = clients[0].train_indices.copy()

    with pytest.raises(ConfigError):
        make_server(clients, prompts.shared)


def test_aggregate_uniform_weights(make_clients, prompts):
    """Test that equal data sizes average the prompts."""
    server = make_server(make_clients([4, 4]), prompts.shared)
    aggregate(server, [_up(0, 1.0), _up(1, 3.0)])

    assert np.allclose(server.global_shared, 2.0)
    assert server.round == 1


def test_aggregate_weighted_mean(make_clients, prompts):
    """Test weights (0.25, 0.75) on scalar prompts 0 and 4."""
    server = make_server(make_clients([1, 3]), prompts.shared)
    aggregate(server, [_up(0, 0.0), _up(1, 4.0)])

    assert np.allclose(server.global_shared, 3.0, atol=1e-15)


def test_aggregate_matches_scripted_mean(make_clients, prompts):
    """Test weighted aggregation against an explicit loop to 1e-12."""
    sizes = [3, 7, 2, 5, 11]
    server = make_server(make_clients(sizes), prompts.shared)
    rng = np.random.default_rng(0)
    payloads = [rng.standard_normal((2, 8)) for _ in sizes]
    aggregate(server, [RoundMessage("up", i, p) for i, p in enumerate(payloads)])

    expected = np.zeros((2, 8))
    for size, payload in zip(sizes, payloads):
        expected += size / sum(sizes) * payload
    assert np.allclose(server.global_shared, expected, atol=1e-12, rtol=0)


def test_aggregate_is_idempotent_and_linear(make_clients, prompts):
    """Test identical prompts aggregate to themselves and scaling commutes."""
    rng = np.random.default_rng(1)
    p = rng.standard_normal((2, 8))
    server = make_server(make_clients([2, 5, 9]), prompts.shared)
    aggregate(server, [RoundMessage("up", i, p) for i in range(3)])
    assert np.allclose(server.global_shared, p, atol=1e-15)

    payloads = [rng.standard_normal((2, 8)) for _ in range(3)]
    plain = make_server(make_clients([2, 5, 9]), prompts.shared)
    scaled = make_server(make_clients([2, 5, 9]), prompts.shared)
    aggregate(plain, [RoundMessage("up", i, q) for i, q in enumerate(payloads)])
    aggregate(scaled, [RoundMessage("up", i, 2.5 * q) for i, q in enumerate(payloads)])
    assert np.allclose(scaled.global_shared, 2.5 * plain.global_shared, atol=1e-12)


def test_aggregate_literal_mode(make_clients, prompts):
    """Test that the literal mode applies the extra 1/N factor."""
    server = make_server(make_clients([4, 4]), prompts.shared, aggregation="literal")
    aggregate(server, [_up(0, 2.0), _up(1, 2.0)])

    assert np.allclose(server.global_shared, 1.0)


@pytest.mark.parametrize(
    "messages",
    [
        [_up(0, 1.0)],
        [_up(0, 1.0), _up(0, 1.0)],
        [_up(0, 1.0), RoundMessage("down", 1, np.ones((2, 8)))],
        [_up(0, 1.0), _up(1, 1.0, shape=(4, 8))],
    ],
    ids=["missing", "duplicate", "downlink", "shape"],
)
def test_aggregate_protocol_errors(make_clients, prompts, messages):
    """Test that incomplete or malformed rounds are never aggregated."""
    server = make_server(make_clients([2, 2]), prompts.shared)
    before = server.global_shared.copy()

    with pytest.raises(ProtocolError):
        aggregate(server, messages)
    assert np.array_equal(server.global_shared, before)
    assert server.round == 0


def test_broadcast_and_apply(make_clients, prompts):
    """Test that broadcast sends the global prompt and the others' snapshots."""
    clients = make_clients([2, 2, 2])
    server = make_server(clients, prompts.shared)
    aggregate(server, [_up(i, float(i)) for i in range(3)])
    messages = broadcast(server)

    for client, message in zip(clients, messages):
        assert message.value_count >= server.global_shared.size
        apply_broadcast(client, message)
        assert np.array_equal(client.prompts.shared, server.global_shared)
        assert [s[0, 0] for s in client.snapshots] == [float(j) for j in range(3) if j != client.client_id]
    assert server.bytes_down == sum(m.n_bytes for m in messages)
    assert server.bytes_up == 3 * 16 * 8


def test_apply_broadcast_wrong_client(make_clients, prompts):
    """Test that a client refuses another client's downlink."""
    clients = make_clients([2, 2])
    server = make_server(clients, prompts.shared)
    aggregate(server, [_up(0, 0.0), _up(1, 0.0)])

    with pytest.raises(ProtocolError):
        apply_broadcast(clients[0], broadcast(server)[1])


def test_local_train_zero_epochs(make_clients, make_context, encoded):
    """Test that without training the uplink equals the global prompt."""
    client = make_clients([6])[0]
    global_shared = np.full((2, 8), 0.3)
    client, message = local_train(client, make_context(), encoded, global_shared, (), 0, 4)

    assert message.direction == "up"
    assert np.array_equal(message.payload, global_shared)


def test_local_train_identical_clients(make_clients, make_context, encoded):
    """Test that identical data, seed and initialization give identical uplinks."""
    context = make_context(cmfac=False)
    a = make_clients([6], seed=4)[0]
    b = make_clients([6], seed=4)[0]
    start = a.prompts.shared.copy()
    _, up_a = local_train(a, context, encoded, a.prompts.shared, (), 2, 4)
    _, up_b = local_train(b, context, encoded, b.prompts.shared, (), 2, 4)

    assert np.array_equal(up_a.payload, up_b.payload)
    assert not np.array_equal(up_a.payload, start)


def test_local_train_empty_dataset(make_clients, make_context, encoded):
    """Test that a client without training data is a configuration error."""
    client = make_clients([0])[0]

    with pytest.raises(ConfigError):
        local_train(client, make_context(), encoded, client.prompts.shared, (), 1, 4)


def test_evaluate_client_accuracy_range(make_clients, make_context, encoded):
    """Test that accuracy is a fraction of the test set."""
    client = make_clients([6])[0]
    accuracy = evaluate_client(client, make_context(), encoded, eval_batch_size=1)

    assert accuracy in (0.0, 0.5, 1.0)


def test_local_train_warns_on_unconverged_plans(make_clients, make_context, encoded, caplog):
    """Test that steps on capped transport solves are counted and logged as a warning."""
    client = make_clients([6])[0]
    caplog.set_level(logging.WARNING, logger="fedprompt.federation")
    local_train(client, make_context(max_iters=1), encoded, client.prompts.shared, (), 1, 4)

    assert client.unconverged_steps == 2
    warnings = [r for r in caplog.records if r.levelno == logging.WARNING and r.name == "fedprompt.federation"]
    assert len(warnings) == 1
    assert "2 of 2 steps" in warnings[0].getMessage()


def test_local_train_converged_plans_stay_quiet(make_clients, make_context, encoded, caplog):
    """Test that fully converged solves leave the counter at zero and log no warning."""
    client = make_clients([6])[0]
    caplog.set_level(logging.WARNING, logger="fedprompt.federation")
    local_train(client, make_context(tol=1e-6), encoded, client.prompts.shared, (), 1, 4)

    assert client.unconverged_steps == 0
    assert not [r for r in caplog.records if r.name == "fedprompt.federation"]
