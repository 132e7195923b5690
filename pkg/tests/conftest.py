from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from toollib.config import PipelineConfig
from toollib.gateway import CallableBackend, Completion, Gateway, MockEmbedder


def make_gateway(responder, seed: int = 7, dim: int = 64) -> Gateway:
    """Gateway over a rule-based callable backend for both role slots."""

    def adapt(request):
        result = responder(request)
        if isinstance(result, Completion):
            return result
        return Completion(text=str(result))

    backend = CallableBackend(adapt)
    return Gateway(
        {"general": backend, "solver": backend},
        MockEmbedder(seed=seed, dim=dim),
        sleep=lambda _s: None,
    )


@pytest.fixture()
def base_config() -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.embed_dim = 64
    cfg.seed_size = 6
    cfg.batch_size = 5
    return cfg
