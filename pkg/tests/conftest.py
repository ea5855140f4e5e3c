from __future__ import annotations

import numpy as np
import pytest

from shiftlab.backbone import Backbone, BackboneConfig

TINY = BackboneConfig(image_side=8, patch_size=4, d_model=32, n_heads=4, n_blocks=4, n_prompts=8)


@pytest.fixture
def tiny_cfg() -> BackboneConfig:
    return TINY


@pytest.fixture
def tiny_model() -> Backbone:
    return Backbone(TINY, seed=0)


def grid_batch(cfg: BackboneConfig, b: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    side = cfg.grid_side
    x = rng.normal(size=(b, cfg.channels_image, side, side)).astype(np.float32)
    c = rng.uniform(size=(b, cfg.channels_control, side, side)).astype(np.float32)
    return x, c


def jitter(model: Backbone, seed: int = 0, std: float = 0.05) -> Backbone:
    """Perturb every parameter so zero-initialized paths carry signal."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = (p.data + rng.normal(0.0, std, size=p.shape)).astype(p.dtype)
    return model


_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
