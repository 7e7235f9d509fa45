from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from app.grid import ChannelGrid
from app.models import BumpSpec, InitialSpec


@pytest.fixture
def grid16() -> ChannelGrid:
    return ChannelGrid(nx=16, ny=16)


@pytest.fixture
def grid32() -> ChannelGrid:
    return ChannelGrid(nx=32, ny=32)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def wide_bumps() -> InitialSpec:
    """Bumps wide enough for a 16 x 16 grid (width >= 2 * dx)."""

    return InitialSpec(
        mass1=2.0,
        mass2=1.0,
        bumps=(
            BumpSpec(species=1, x=math.pi, y=0.0, width=0.8),
            BumpSpec(species=2, x=math.pi / 2, y=0.2, width=0.8),
        ),
        seed=3,
    )


SMALL_CONFIG = """\
[grid]
nx = 16
ny = 16

[params]
A = 10.0
chi1 = 1.0
chi2 = 1.0
dt = 1e-3
t_end = {t_end}

[initial]
seed = 5
mass1 = 2.0
mass2 = 1.0
bump_width = [0.8, 0.8]

[experiment]
{experiment}

[output]
sample_every = 0.005
"""


@pytest.fixture
def write_config(tmp_path: Path):
    """Write a small TOML config and return its path."""

    def _write(t_end: float = 0.01, experiment: str = "", name: str = "run.toml", text: str | None = None) -> Path:
        path = tmp_path / name
        body = text if text is not None else SMALL_CONFIG.format(t_end=t_end, experiment=experiment)
        path.write_text(body, encoding="utf-8")
        return path

    return _write
