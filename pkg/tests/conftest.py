"""Shared fixtures: generated sessions and trained models are expensive,
so they are built once per test run."""

import pytest

from intentloop import synth
from intentloop.pipeline import train_from_recording


@pytest.fixture(scope="session")
def intention_session():
    """Default-config INTENTION session with ground truth (seed 1)."""
    cfg = synth.SynthConfig(seed=1)
    return synth.generate_session(cfg, synth.INTENTION)


@pytest.fixture(scope="session")
def train_result(intention_session):
    recording, _ = intention_session
    return train_from_recording(recording, seed=1)


@pytest.fixture(scope="session")
def noise_free_session():
    cfg = synth.noise_free(synth.SynthConfig(seed=42))
    return synth.generate_session(cfg, synth.INTENTION)


@pytest.fixture(scope="session")
def noise_free_train(noise_free_session):
    recording, _ = noise_free_session
    return train_from_recording(recording, seed=42)
