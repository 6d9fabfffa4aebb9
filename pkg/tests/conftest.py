"""Shared fixtures: the default N=16 configuration and its derived objects."""
from __future__ import annotations

import numpy as np
import pytest

from fraclame.config import RunConfig, shipped_config
from fraclame.grid import scalar_bump
from fraclame.solvers import DirectSolver

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def cfg():
    return RunConfig.load(shipped_config("default"))


@pytest.fixture(scope="session")
def ctx(cfg):
    return cfg.context()


@pytest.fixture(scope="session")
def part(cfg):
    return cfg.partition()


@pytest.fixture(scope="session")
def omega(part):
    return part.omega


@pytest.fixture(scope="session")
def p1(cfg, omega):
    return cfg.lame("p1", omega)


@pytest.fixture(scope="session")
def c1(cfg, omega):
    return cfg.coefficients("c1", omega)


@pytest.fixture(scope="session")
def solver(p1, ctx, omega):
    return DirectSolver(p1, ctx, omega)


@pytest.fixture(scope="session")
def frame_data(ctx):
    """Two unit-amplitude exterior data fields on opposite sides of the W1 frame."""
    g = ctx.grid
    g1 = np.zeros((3,) + g.shape)
    g1[0] = scalar_bump(g, [0, 0, 0.625], [0.3, 0.3, 0.07])
    g1[2] = 0.5 * g1[0]
    g2 = np.zeros((3,) + g.shape)
    g2[1] = scalar_bump(g, [0.625, 0, 0], [0.07, 0.3, 0.3])
    g2[0] = -0.3 * g2[1]
    return g1 / np.abs(g1).max(), g2 / np.abs(g2).max()


def omega_random(rng, omega, shape=(3,)):
    return rng.standard_normal(shape + omega.shape) * omega


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
