"""Shared fixtures: hand-built montages and a small synthetic corpus."""

import pytest

from hdnirs import SimConfig, generate_corpus

from helpers import build_pairs


@pytest.fixture
def pair2():
    """Two 30 mm pairs, 20 mm apart, one module, four channels."""
    return build_pairs([(0.0, 0.0), (20.0, 0.0)])


@pytest.fixture(scope="session")
def mini_corpus():
    """Ten-pair five-session corpus; small but runs the full decode path."""
    return generate_corpus(SimConfig(n_pairs=10, n_sessions=5,
                                     dead_per_session=1, noisy_per_session=1,
                                     seed=3))
