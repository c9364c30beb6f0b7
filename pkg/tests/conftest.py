from __future__ import annotations

import numpy as np
import pytest

from pix2graph.dataset import synthesize_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """30 normal / 15 anomalous synthetic images (seed 7)."""
    root = tmp_path_factory.mktemp("small_corpus")
    return synthesize_corpus(root, 30, 15, seed=7)


@pytest.fixture(scope="session")
def frozen_corpus(tmp_path_factory):
    """The 200 / 60 synthetic acceptance corpus (seed 7)."""
    root = tmp_path_factory.mktemp("frozen_corpus")
    return synthesize_corpus(root, 200, 60, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def frozen_color_graphs(frozen_corpus):
    """SLICO + RAG + COLOR graphs of the frozen corpus, unmasked."""
    from pix2graph.evaluation import build_graphs
    from pix2graph.graphs import PipelineConfig

    return build_graphs(frozen_corpus, PipelineConfig(), jobs=4)
