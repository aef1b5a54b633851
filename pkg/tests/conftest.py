"""Shared fixtures: a small data/model profile that keeps unit tests fast.

The acceptance suite builds its own (larger) artifacts in
test_acceptance.py; everything here targets second-scale runtimes.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from crepa.data import generate_dataset
from crepa.diffusion import NoiseSchedule
from crepa.dit import DiTConfig, VideoDiT
from crepa.encoder import EncoderConfig, pretrain_encoder

SIZE = 16
FRAMES = 8


@pytest.fixture(scope="session")
def tiny_entries(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny-data")
    return generate_dataset(out, n_per_class=2, frames=FRAMES, size=SIZE, master_seed=11)


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def tiny_encoder(tiny_entries):
    config = EncoderConfig(grid=4, feature_dim=32, image_size=SIZE, seed=3)
    encoder, stats = pretrain_encoder(tiny_entries, config, frames=FRAMES, steps=250)
    assert stats["holdout_accuracy"] >= 0.8
    return encoder


@pytest.fixture(scope="session")
def tiny_dit_config():
    return DiTConfig(
        depth=3, dim=32, heads=2, patch=4, frames=FRAMES, height=SIZE, width=SIZE,
        tap_layer=2, seed=5,
    )


@pytest.fixture()
def tiny_model(tiny_dit_config):
    return VideoDiT(tiny_dit_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_threaded_torch():
    torch.set_num_threads(1)
