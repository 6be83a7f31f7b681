"""Shared pytest fixtures for all tests."""

import json
from pathlib import Path

import numpy as np
import pytest

from fedprompt.config import ExperimentConfig
from fedprompt.encoders import EncoderConfig, build_encoders, encode_image
from fedprompt.objective import AlignmentConfig, Batch, ObjectiveContext
from fedprompt.prompts import PredictionConfig, bind_classes, init_prompts
from fedprompt.transport import TransportConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


@pytest.fixture
def golden():
    """Loader for the frozen reference values under tests/golden."""

    def _load(name):
        return json.loads((Path(__file__).parent / "golden" / f"{name}.json").read_text())

    return _load


@pytest.fixture
def encoder_config():
    """Small encoder dimensions used across unit tests."""
    return EncoderConfig(feature_dim=8, patch_count=4, embed_dim=8, seed=3)


@pytest.fixture
def encoders(encoder_config):
    """Image and text encoder built from the small config."""
    return build_encoders(encoder_config)


@pytest.fixture
def image_encoder(encoders):
    return encoders[0]


@pytest.fixture
def text_encoder(encoders):
    return encoders[1]


@pytest.fixture
def prompts():
    """Bound prompt set with 3 classes and visibly non-zero context vectors."""
    rng = np.random.default_rng(11)
    base = init_prompts(2, 2, 8, 3, seed=5)
    base = base.with_prompts(rng.normal(0.0, 0.5, (2, 8)), rng.normal(0.0, 0.5, (2, 8)))
    tokens = rng.standard_normal((3, 8))
    return bind_classes(base, tokens / np.linalg.norm(tokens, axis=1, keepdims=True))


@pytest.fixture
def make_batch(image_encoder):
    """Factory fixture encoding random raw samples into a batch."""

    def _make(size=4, seed=0, n_classes=3):
        rng = np.random.default_rng(seed)
        encoding = encode_image(image_encoder, rng.standard_normal((size, image_encoder.input_dim)))
        return Batch(
            patches=encoding.patch_features,
            pooled=encoding.pooled_feature,
            labels=rng.integers(n_classes, size=size),
        )

    return _make


@pytest.fixture
def make_context(text_encoder):
    """Factory fixture for objective contexts over the small text encoder."""

    def _make(tau=0.1, dual_prompt=True, dpac=True, cmfac=True, scale=2.0, mu=1.0, lam=0.1, max_iters=2000, tol=1e-12):
        return ObjectiveContext(
            text_encoder=text_encoder,
            prediction=PredictionConfig(tau),
            alignment=AlignmentConfig(scale, mu, dpac, cmfac),
            transport=TransportConfig(lam, max_iters, tol),
            dual_prompt=dual_prompt,
        )

    return _make


@pytest.fixture
def small_config(tmp_path):
    """Factory fixture for a fast experiment config writing under tmp_path."""

    def _make(**changes):
        base = ExperimentConfig(
            n_clients=2,
            rounds=2,
            n_classes=4,
            per_class=10,
            embed_dim=8,
            feature_dim=8,
            patch_count=4,
            batch_size=8,
            out_dir=str(tmp_path / "run"),
        )
        return base.override(**changes)

    return _make
