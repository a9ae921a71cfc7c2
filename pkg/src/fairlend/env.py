"""Discrete lending MDP.

Individuals carry a group, an integer credit score in ``1..C``, a hidden
credit drift in ``{-1, 0, +1}`` and a hidden repayment outcome.  Approving a
loan moves the score up by one on repayment and down by one on default;
denying leaves only the drift.  The result is clamped into ``1..C``.

Arrays are indexed ``[group, score - 1, ...]`` with ``PLUS = 0`` and
``MINUS = 1``; decisions are ``DENY = 0`` and ``APPROVE = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PLUS = 0
MINUS = 1
GROUPS = (PLUS, MINUS)
GROUP_NAMES = ("plus", "minus")

DENY = 0
APPROVE = 1

DRIFTS = np.array([-1, 0, 1])

PROB_TOL = 1e-12


class ConfigError(ValueError):
    """Raised when an environment or training configuration is invalid."""


class DomainError(ValueError):
    """Raised for out-of-range scores, groups or decisions."""


def _prob_rows(name: str, value, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ConfigError(f"{name}: entries must lie in [0, 1]")
    return arr


def _check_sums(name: str, arr: np.ndarray) -> None:
    sums = arr.sum(axis=-1)
    for g, total in enumerate(np.atleast_1d(sums)):
        if abs(total - 1.0) > PROB_TOL:
            raise ConfigError(
                f"{name}[{GROUP_NAMES[g]}]: probabilities sum to {float(total)!r}, not 1"
            )


@dataclass(frozen=True, eq=False)
class EnvConfig:
    """Full parameterization of a lending environment.

    ``init_score_dist`` and ``repay_prob`` have shape ``(2, C)``;
    ``drift_dist`` has shape ``(2, 3)`` over drifts ``(-1, 0, +1)``.
    ``gain_potential`` optionally overrides the cubic gain with per-group
    potentials ``phi`` so that ``g_s(x, x') = phi_s(x') - phi_s(x)``.
    """

    num_levels: int
    group_prior: float
    init_score_dist: np.ndarray
    repay_prob: np.ndarray
    drift_dist: np.ndarray
    reward_success: float = 1.0
    reward_default: float = 2.0
    horizon: int = 20
    gain_potential: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        c = self.num_levels
        if int(c) != c or c < 1:
            raise ConfigError(f"num_levels must be a positive integer, got {c!r}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigError(f"horizon must be a positive integer, got {self.horizon!r}")
        if not 0.0 <= float(self.group_prior) <= 1.0:
            raise ConfigError(f"group_prior must lie in [0, 1], got {self.group_prior!r}")
        for name in ("reward_success", "reward_default"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        init = _prob_rows("init_score_dist", self.init_score_dist, (2, c))
        _check_sums("init_score_dist", init)
        repay = _prob_rows("repay_prob", self.repay_prob, (2, c))
        drift = _prob_rows("drift_dist", self.drift_dist, (2, 3))
        _check_sums("drift_dist", drift)
        set_ = object.__setattr__
        set_(self, "num_levels", int(c))
        set_(self, "horizon", int(self.horizon))
        set_(self, "group_prior", float(self.group_prior))
        set_(self, "reward_success", float(self.reward_success))
        set_(self, "reward_default", float(self.reward_default))
        set_(self, "init_score_dist", init)
        set_(self, "repay_prob", repay)
        set_(self, "drift_dist", drift)
        if self.gain_potential is not None:
            pot = np.asarray(self.gain_potential, dtype=float)
            if pot.shape != (2, c) or not np.all(np.isfinite(pot)):
                raise ConfigError(f"gain_potential: expected finite shape {(2, c)}")
            set_(self, "gain_potential", pot)
        for arr in (init, repay, drift, self.gain_potential):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def group_weights(self) -> np.ndarray:
        return np.array([self.group_prior, 1.0 - self.group_prior])

    def replace(self, **changes) -> "EnvConfig":
        kw = {
            "num_levels": self.num_levels,
            "group_prior": self.group_prior,
            "init_score_dist": self.init_score_dist,
            "repay_prob": self.repay_prob,
            "drift_dist": self.drift_dist,
            "reward_success": self.reward_success,
            "reward_default": self.reward_default,
            "horizon": self.horizon,
            "gain_potential": self.gain_potential,
        }
        kw.update(changes)
        return EnvConfig(**kw)


@dataclass(frozen=True)
class Individual:
    group: int
    score: int
    drift: int
    repays: bool


def check_score(x, config: EnvConfig) -> int:
    if int(x) != x or not 1 <= x <= config.num_levels:
        raise DomainError(f"score {x!r} outside 1..{config.num_levels}")
    return int(x)


def check_group(s) -> int:
    if s not in GROUPS:
        raise DomainError(f"group must be PLUS (0) or MINUS (1), got {s!r}")
    return int(s)


def check_decision(d) -> int:
    if d not in (DENY, APPROVE):
        raise DomainError(f"decision must be DENY (0) or APPROVE (1), got {d!r}")
    return int(d)


def gain_potential(config: EnvConfig, s: int = PLUS) -> np.ndarray:
    """Potential ``phi`` over scores so that ``g(x, x') = phi[x'-1] - phi[x-1]``."""
    if config.gain_potential is not None:
        return config.gain_potential[check_group(s)]
    levels = np.arange(1, config.num_levels + 1, dtype=float)
    cubes = levels**3
    # max adjacent cubic step is always the top one; C=1 has no steps
    scale = cubes[-1] - cubes[-2] if config.num_levels > 1 else 1.0
    return cubes / scale


def gain_matrix(config: EnvConfig, s: int = PLUS) -> np.ndarray:
    """``G[i, j] = g(i + 1, j + 1)`` for one group."""
    phi = gain_potential(config, s)
    return phi[None, :] - phi[:, None]


def qualification_gain(x: int, x_next: int, config: EnvConfig, s: int = PLUS) -> float:
    x = check_score(x, config)
    x_next = check_score(x_next, config)
    if config.gain_potential is None:
        c = config.num_levels
        if c == 1:
            return 0.0
        return (x_next**3 - x**3) / (c**3 - (c - 1) ** 3)
    phi = gain_potential(config, s)
    return float(phi[x_next - 1] - phi[x - 1])


def next_score(x: int, d: int, repays: bool, drift: int, config: EnvConfig) -> int:
    step = 0 if d == DENY else (1 if repays else -1)
    return int(min(max(x + drift + step, 1), config.num_levels))


def transition_distribution(x: int, d: int, s: int, config: EnvConfig) -> np.ndarray:
    """Next-score distribution for one ``(x, d, s)``; entry ``i`` is score ``i + 1``."""
    x = check_score(x, config)
    d = check_decision(d)
    s = check_group(s)
    out = np.zeros(config.num_levels)
    p_repay = config.repay_prob[s, x - 1]
    for drift, p_drift in zip(DRIFTS, config.drift_dist[s]):
        if d == DENY:
            out[next_score(x, d, False, drift, config) - 1] += p_drift
        else:
            out[next_score(x, d, True, drift, config) - 1] += p_drift * p_repay
            out[next_score(x, d, False, drift, config) - 1] += p_drift * (1 - p_repay)
    return out


def transition_kernel(config: EnvConfig) -> np.ndarray:
    """All transition rows at once, shape ``(2, C, 2, C)`` = ``P[s, x, d, x']``."""
    c = config.num_levels
    kernel = np.zeros((2, c, 2, c))
    idx = np.arange(c)
    for s in GROUPS:
        p = config.repay_prob[s]
        for drift, p_drift in zip(DRIFTS, config.drift_dist[s]):
            stay = np.clip(idx + drift, 0, c - 1)
            up = np.clip(idx + drift + 1, 0, c - 1)
            down = np.clip(idx + drift - 1, 0, c - 1)
            np.add.at(kernel[s, :, DENY], (idx, stay), p_drift)
            np.add.at(kernel[s, :, APPROVE], (idx, up), p_drift * p)
            np.add.at(kernel[s, :, APPROVE], (idx, down), p_drift * (1 - p))
    return kernel


def reward(x: int, d: int, y: bool, config: EnvConfig) -> float:
    if d == DENY:
        return 0.0
    return config.reward_success if y else -config.reward_default


def expected_reward(config: EnvConfig) -> np.ndarray:
    """Expected one-step reward ``r[s, x, d]`` with repayment marginalized."""
    r = np.zeros((2, config.num_levels, 2))
    p = config.repay_prob
    r[:, :, APPROVE] = p * config.reward_success - (1 - p) * config.reward_default
    return r


def _draw_drift(rng: np.random.Generator, s: int, config: EnvConfig) -> int:
    return int(DRIFTS[rng.choice(3, p=config.drift_dist[s])])


def sample_individual(rng: np.random.Generator, config: EnvConfig) -> Individual:
    s = PLUS if rng.random() < config.group_prior else MINUS
    x = int(rng.choice(config.num_levels, p=config.init_score_dist[s])) + 1
    repays = bool(rng.random() < config.repay_prob[s, x - 1])
    return Individual(group=s, score=x, drift=_draw_drift(rng, s, config), repays=repays)


def sample_step(
    rng: np.random.Generator, ind: Individual, d: int, config: EnvConfig
) -> tuple[Individual, float, float]:
    """Advance one individual by one decision; returns ``(next, reward, gain)``."""
    d = check_decision(d)
    s = ind.group
    x_next = next_score(ind.score, d, ind.repays, ind.drift, config)
    r = reward(ind.score, d, ind.repays, config)
    g = qualification_gain(ind.score, x_next, config, s)
    repays = bool(rng.random() < config.repay_prob[s, x_next - 1])
    nxt = Individual(group=s, score=x_next, drift=_draw_drift(rng, s, config), repays=repays)
    return nxt, r, g
