from __future__ import annotations

import numpy as np
import pytest

from fairlend.env import EnvConfig
from fairlend.policy import PolicyParams

ACCEPTANCE_LINES: list[str] = []


def simplex(rng, n, zero_prob=0.0):
    p = rng.dirichlet(np.ones(n))
    if zero_prob:
        mask = rng.random(n) < zero_prob
        if mask.all():
            mask[rng.integers(n)] = False
        p = np.where(mask, 0.0, p)
        p = p / p.sum()
    return p


def random_config(rng, num_levels=7, horizon=20, symmetric=False, **overrides) -> EnvConfig:
    def group():
        return (
            simplex(rng, num_levels),
            rng.uniform(0.05, 0.95, num_levels),
            simplex(rng, 3),
        )

    a = group()
    b = a if symmetric else group()
    kw = dict(
        num_levels=num_levels,
        group_prior=float(rng.uniform(0.2, 0.8)),
        init_score_dist=np.stack([a[0], b[0]]),
        repay_prob=np.stack([a[1], b[1]]),
        drift_dist=np.stack([a[2], b[2]]),
        horizon=horizon,
    )
    kw.update(overrides)
    return EnvConfig(**kw)


def random_params(rng, num_levels=7, scale=1.5) -> PolicyParams:
    return PolicyParams.random(rng, num_levels, scale)


def point_mass(num_levels, x):
    p = np.zeros(num_levels)
    p[x - 1] = 1.0
    return p


def simple_config(num_levels=7, repay=0.5, drift=(0.0, 1.0, 0.0), init=None, horizon=20, **kw):
    init = point_mass(num_levels, 1) if init is None else np.asarray(init, dtype=float)
    return EnvConfig(
        num_levels=num_levels,
        group_prior=0.5,
        init_score_dist=np.stack([init, init]),
        repay_prob=np.full((2, num_levels), repay),
        drift_dist=np.stack([drift, drift]),
        horizon=horizon,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
