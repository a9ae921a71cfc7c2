"""Tabular softmax lending policies.

The behavior policy keeps two logits per ``(group, score)``.  The baseline
policy that always denies has no parameters.  The virtual policy used in the
decomposition lives in :mod:`fairlend.analysis`; here it is only a tag.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .env import APPROVE, DENY, GROUP_NAMES, DomainError, EnvConfig, check_decision, check_group


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Logits of shape ``(2, C, 2)`` indexed ``[group, score - 1, decision]``."""

    logits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.logits, dtype=float)
        if arr.ndim != 3 or arr.shape[0] != 2 or arr.shape[2] != 2:
            raise ValueError(f"logits must have shape (2, C, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    @property
    def num_levels(self) -> int:
        return self.logits.shape[1]

    @classmethod
    def zeros(cls, num_levels: int) -> "PolicyParams":
        return cls(np.zeros((2, num_levels, 2)))

    @classmethod
    def random(cls, rng: np.random.Generator, num_levels: int, scale: float = 1.0):
        return cls(rng.normal(scale=scale, size=(2, num_levels, 2)))

    @classmethod
    def from_approval(cls, p_approve) -> "PolicyParams":
        """Logits reproducing the given ``(2, C)`` approval probabilities."""
        p = np.asarray(p_approve, dtype=float)
        logits = np.zeros(p.shape + (2,))
        logits[..., APPROVE] = np.log(p) - np.log1p(-p)
        return cls(logits)

    @classmethod
    def always_deny(cls, num_levels: int, margin: float = 60.0) -> "PolicyParams":
        logits = np.zeros((2, num_levels, 2))
        logits[..., DENY] = margin
        return cls(logits)

    def __add__(self, other) -> "PolicyParams":
        return PolicyParams(self.logits + np.asarray(other))


@dataclass(frozen=True)
class PolicyKind:
    """Which policy a value table belongs to: behavior, baseline or virtual."""

    tag: str
    params: PolicyParams | None = None

    def __post_init__(self):
        if self.tag not in ("behavior", "baseline_pi0", "virtual_ps"):
            raise ValueError(f"unknown policy kind {self.tag!r}")
        if (self.tag == "baseline_pi0") != (self.params is None):
            raise ValueError(f"{self.tag} policy kind has wrong parameter presence")

    @classmethod
    def behavior(cls, params: PolicyParams) -> "PolicyKind":
        return cls("behavior", params)

    @classmethod
    def baseline(cls) -> "PolicyKind":
        return cls("baseline_pi0")

    @classmethod
    def virtual(cls, params: PolicyParams) -> "PolicyKind":
        return cls("virtual_ps", params)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def probability_table(params: PolicyParams) -> np.ndarray:
    """``pi[s, x - 1, d]`` for every state."""
    return softmax(params.logits)


def baseline_table(num_levels: int) -> np.ndarray:
    table = np.zeros((2, num_levels, 2))
    table[..., DENY] = 1.0
    return table


def _index(params_or_levels, x: int, s: int) -> tuple[int, int]:
    c = params_or_levels if isinstance(params_or_levels, int) else params_or_levels.num_levels
    if int(x) != x or not 1 <= x <= c:
        raise DomainError(f"score {x!r} outside 1..{c}")
    return check_group(s), int(x) - 1


def action_probabilities(params: PolicyParams, x: int, s: int) -> tuple[float, float]:
    g, i = _index(params, x, s)
    p = softmax(params.logits[g, i])
    return float(p[DENY]), float(p[APPROVE])


def baseline_probabilities(x: int, s: int) -> tuple[float, float]:
    check_group(s)
    if int(x) != x or x < 1:
        raise DomainError(f"invalid score {x!r}")
    return 1.0, 0.0


def log_prob_gradient(params: PolicyParams, x: int, s: int, d: int) -> np.ndarray:
    """Gradient of ``ln pi(d | x, s)`` with respect to every logit."""
    g, i = _index(params, x, s)
    d = check_decision(d)
    grad = np.zeros_like(params.logits)
    grad[g, i] = -softmax(params.logits[g, i])
    grad[g, i, d] += 1.0
    return grad


def sample_action(rng: np.random.Generator, params: PolicyParams, x: int, s: int) -> int:
    _, p1 = action_probabilities(params, x, s)
    return APPROVE if rng.random() < p1 else DENY


def save_policy(params: PolicyParams, path: Union[str, Path]) -> None:
    """Write one ``group score logit_deny logit_approve`` row per state."""
    lines = ["# group score logit_deny logit_approve"]
    for g, name in enumerate(GROUP_NAMES):
        for i in range(params.num_levels):
            l0, l1 = params.logits[g, i]
            lines.append(f"{name} {i + 1} {float(l0)!r} {float(l1)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_policy(path: Union[str, Path]) -> PolicyParams:
    rows = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] not in GROUP_NAMES:
            raise ValueError(f"{path}:{lineno}: malformed policy row {raw!r}")
        rows[(GROUP_NAMES.index(parts[0]), int(parts[1]))] = (float(parts[2]), float(parts[3]))
    levels = sorted({x for _, x in rows})
    c = len(levels)
    if levels != list(range(1, c + 1)) or len(rows) != 2 * c:
        raise ValueError(f"{path}: policy table must cover both groups and scores 1..C")
    logits = np.array([[rows[(g, x)] for x in range(1, c + 1)] for g in range(2)])
    return PolicyParams(logits)


def check_compatible(params: PolicyParams, config: EnvConfig) -> None:
    if params.num_levels != config.num_levels:
        raise ValueError(
            f"policy has {params.num_levels} score levels, environment has {config.num_levels}"
        )
