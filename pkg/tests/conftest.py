"""Shared fixtures: tiny documents and desk-scale model configurations."""

from __future__ import annotations

import numpy as np
import pytest

from pagegraph.data import BoundingBox, DocumentRecord, RegionRecord
from pagegraph.encoder import EncoderConfig, init_encoder_params
from pagegraph.providers import StubProvider

WORDS = ("total", "invoice", "date", "name", "amount", "claim", "memo", "phone")


def make_document(
    n_regions: int = 5,
    seed: int = 0,
    width: float = 1000.0,
    height: float = 800.0,
    doc_id: str = "doc0",
    doc_class: int | None = None,
) -> DocumentRecord:
    rng = np.random.default_rng(seed)
    regions = []
    for i in range(n_regions):
        x0 = float(rng.uniform(0, width - 220))
        y0 = float(rng.uniform(0, height - 90))
        w = float(rng.uniform(60, 200))
        h = float(rng.uniform(24, 80))
        regions.append(
            RegionRecord(
                region_id=f"r{i:03d}",
                text=f"{WORDS[i % len(WORDS)]} {i}",
                box=BoundingBox.from_corners(x0, y0, x0 + w, y0 + h),
                label=None,
            )
        )
    return DocumentRecord(doc_id, width, height, tuple(regions), doc_class)


def small_config(**overrides) -> EncoderConfig:
    base = dict(layers=2, dim=24, heads=2, top_k=3)
    base.update(overrides)
    return EncoderConfig(**base)


@pytest.fixture
def tiny_doc() -> DocumentRecord:
    return make_document(n_regions=5, seed=7)


@pytest.fixture
def stub_provider() -> StubProvider:
    # small raw dims keep gradient sweeps fast
    return StubProvider(text_dim=8, vis_dim=6, seed=0)


@pytest.fixture
def small_model(stub_provider):
    cfg = small_config()
    registry = init_encoder_params(
        cfg, stub_provider.text_dim, stub_provider.vis_dim, seed=1,
        entity_labels=4, doc_classes=3,
    )
    return cfg, registry
