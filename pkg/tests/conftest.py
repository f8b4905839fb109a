"""Shared fixtures: a synthetic session with known statistics and a small
trained checkpoint, both session-scoped (training runs once per pytest session).

Set LOBSIM_TEST_CACHE to a directory to cache the trained checkpoint between
pytest invocations; by default everything is rebuilt fresh.
"""

import os
from pathlib import Path

import pytest

from lobsim.data import filter_events, parse_message_file, train_val_split
from lobsim.model import ModelBundle, ModelConfig
from lobsim.synthetic import SyntheticConfig, write_session
from lobsim.training import TrainConfig, train

TOY_WINDOW = 32
TOY_N_EVENTS = 12_000
TOY_SEED = 1
# bump when fixture-relevant code changes to invalidate an external cache
CACHE_TAG = "v10"


def toy_model_config() -> ModelConfig:
    return ModelConfig(
        layers=2, attention_heads=2, aug_dim=32, dropout=0.0, window=TOY_WINDOW
    )


def toy_train_config() -> TrainConfig:
    return TrainConfig(max_steps=40_000, steps_per_epoch=1000, batch_size=64, seed=0)


@pytest.fixture(scope="session")
def session_files(tmp_path_factory):
    """Paths of a generated synthetic day (message + orderbook CSV)."""
    d = tmp_path_factory.mktemp("synthetic")
    cfg = SyntheticConfig(n_events=TOY_N_EVENTS, seed=TOY_SEED)
    msg_path, lob_path = write_session(d, cfg)
    return {"config": cfg, "message": msg_path, "orderbook": lob_path}


@pytest.fixture(scope="session")
def toy_events(session_files):
    return filter_events(parse_message_file(session_files["message"]))


@pytest.fixture(scope="session")
def toy_datasets(toy_events):
    return train_val_split(toy_events, window=TOY_WINDOW)


@pytest.fixture(scope="session")
def toy_bundle(toy_datasets):
    cache_dir = os.environ.get("LOBSIM_TEST_CACHE")
    cache_path = None
    if cache_dir:
        cache_path = Path(cache_dir) / f"toy_bundle_{CACHE_TAG}.pt"
        if cache_path.exists():
            return ModelBundle.load(cache_path)
    train_ds, val_ds = toy_datasets
    result = train(train_ds, val_ds, toy_model_config(), toy_train_config())
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        result.bundle.save(cache_path)
    return result.bundle
