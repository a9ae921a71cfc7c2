"""Exact finite-horizon analysis of a lending policy.

Everything here is backward induction or forward propagation over the known
transition kernel.  Time runs ``t = 1..T``; tables store ``t`` at row
``t - 1`` and the terminal row ``T + 1`` is identically zero.

The qualification-gain parity ``C`` splits into three parts using two
hypothetical policies: ``pi0`` always denies, and the virtual policy moves
like the behavior policy but collects the per-step gain ``pi0`` would have
collected.

    C   = E+[V_pi]               - E-[V_pi]
    DPE = E+[V_pi - V_ps]        - E-[V_pi - V_ps]
    IPE = E+[V_ps - V_pi0]       - E-[V_ps - V_pi0]
    SPE = E+[V_pi0]              - E-[V_pi0]

with ``E+`` / ``E-`` taken over each group's own initial score distribution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from .env import (
    APPROVE,
    DENY,
    GROUPS,
    MINUS,
    PLUS,
    EnvConfig,
    check_group,
    check_score,
    expected_reward,
    gain_matrix,
    transition_kernel,
)
from .policy import PolicyKind, PolicyParams, baseline_table, check_compatible, probability_table

DEFAULT_EPSILON = 0.05
MAX_ENUM_LEVELS = 4
MAX_ENUM_HORIZON = 4

_SIGN = {PLUS: 1.0, MINUS: -1.0}


class CapacityError(ValueError):
    """Raised when an exhaustive enumeration would be too large."""


@dataclass(frozen=True, eq=False)
class ValueTables:
    """``v[t-1, x-1]`` for ``t = 1..T+1`` and ``q[t-1, x-1, d]`` for ``t = 1..T``."""

    v: np.ndarray
    q: np.ndarray
    group: int
    kind: PolicyKind

    def expected_initial(self, init: np.ndarray) -> float:
        return float(init @ self.v[0])


@dataclass(frozen=True, eq=False)
class VisitationTable:
    """Occupancy ``occupancy[t-1, x-1]`` for ``t = 1..T+1``; ``eta`` sums rows ``1..T``."""

    occupancy: np.ndarray
    eta: np.ndarray
    group: int

    @property
    def final(self) -> np.ndarray:
        return self.occupancy[-1]

    @property
    def time_average(self) -> np.ndarray:
        return self.eta / self.eta.sum()


@dataclass(frozen=True)
class DecompositionReport:
    c_pi: float
    dpe: float
    ipe: float
    spe: float
    lambda_metric: float
    wasserstein_gap: float
    loan_rate_plus: float
    loan_rate_minus: float

    def as_dict(self) -> dict:
        return asdict(self)


# -- kernels ---------------------------------------------------------------


def backward_induction(
    pi: np.ndarray, kernel: np.ndarray, step_value: np.ndarray, horizon: int
) -> tuple[np.ndarray, np.ndarray]:
    """Generic finite-horizon evaluation for one group.

    ``pi`` is ``(C, 2)``, ``kernel`` is ``(C, 2, C)`` and ``step_value[x, d]``
    is the expected immediate payoff.  Returns ``(v, q)``.
    """
    c = kernel.shape[0]
    v = np.zeros((horizon + 1, c))
    q = np.zeros((horizon, c, 2))
    for t in range(horizon - 1, -1, -1):
        q[t] = step_value + kernel @ v[t + 1]
        v[t] = np.sum(pi * q[t], axis=1)
    return v, q


def expected_gain(config: EnvConfig, kernel: Optional[np.ndarray] = None) -> np.ndarray:
    """``eg[s, x-1, d] = sum_x' P(x'|x,d,s) g_s(x, x')``."""
    if kernel is None:
        kernel = transition_kernel(config)
    return np.stack([np.einsum("xdy,xy->xd", kernel[s], gain_matrix(config, s)) for s in GROUPS])


def mixed_kernel(pi: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """State-to-state kernel under ``pi`` for one group, ``(C, C)``."""
    return np.einsum("xd,xdy->xy", pi, kernel)


def _policy_table(params: Optional[PolicyParams], config: EnvConfig) -> np.ndarray:
    if params is None:
        return baseline_table(config.num_levels)
    check_compatible(params, config)
    return probability_table(params)


# -- value functions --------------------------------------------------------


def _values(pi, s, config, kind, virtual=False, kernel=None, gains=None) -> ValueTables:
    s = check_group(s)
    if kernel is None:
        kernel = transition_kernel(config)
    if gains is None:
        gains = expected_gain(config, kernel)
    step = gains[s]
    if virtual:
        step = np.repeat(step[:, DENY : DENY + 1], 2, axis=1)
    v, q = backward_induction(pi[s], kernel[s], step, config.horizon)
    return ValueTables(v=v, q=q, group=s, kind=kind)


def value_behavior(params: PolicyParams, s: int, config: EnvConfig) -> ValueTables:
    return _values(_policy_table(params, config), s, config, PolicyKind.behavior(params))


def value_baseline(s: int, config: EnvConfig) -> ValueTables:
    return _values(baseline_table(config.num_levels), s, config, PolicyKind.baseline())


def value_virtual(params: PolicyParams, s: int, config: EnvConfig) -> ValueTables:
    """Moves as under ``params`` but earns the always-deny expected gain each step."""
    pi = _policy_table(params, config)
    return _values(pi, s, config, PolicyKind.virtual(params), virtual=True)


def reward_values(params: PolicyParams, s: int, config: EnvConfig, kernel=None) -> ValueTables:
    """Same recursion with expected bank reward in place of qualification gain."""
    pi = _policy_table(params, config)
    if kernel is None:
        kernel = transition_kernel(config)
    v, q = backward_induction(pi[s], kernel[s], expected_reward(config)[s], config.horizon)
    return ValueTables(v=v, q=q, group=s, kind=PolicyKind.behavior(params))


def expected_utility(params: PolicyParams, config: EnvConfig) -> float:
    """Expected total episode reward over the group mixture."""
    kernel = transition_kernel(config)
    total = 0.0
    for s, w in zip(GROUPS, config.group_weights):
        total += w * reward_values(params, s, config, kernel).expected_initial(
            config.init_score_dist[s]
        )
    return float(total)


# -- visitation --------------------------------------------------------------


def propagate(init: np.ndarray, step_kernel: np.ndarray, horizon: int) -> np.ndarray:
    occ = np.zeros((horizon + 1, len(init)))
    occ[0] = init
    for t in range(horizon):
        occ[t + 1] = occ[t] @ step_kernel
    return occ


def visitation(
    params: Optional[PolicyParams],
    s: int,
    config: EnvConfig,
    init: Optional[np.ndarray] = None,
) -> VisitationTable:
    """Forward occupancy of one group; ``params=None`` means always deny."""
    s = check_group(s)
    init = config.init_score_dist[s] if init is None else np.asarray(init, dtype=float)
    if init.shape != (config.num_levels,) or abs(init.sum() - 1.0) > 1e-10 or np.any(init < 0):
        raise ValueError("init must be a probability vector over the score levels")
    pi = _policy_table(params, config)
    occ = propagate(init, mixed_kernel(pi[s], transition_kernel(config)[s]), config.horizon)
    return VisitationTable(occupancy=occ, eta=occ[:-1].sum(axis=0), group=s)


# -- benefit -------------------------------------------------------------------


def benefit_table(config: EnvConfig) -> np.ndarray:
    """``delta[s, x-1]``: expected gain of approving over denying."""
    eg = expected_gain(config)
    return eg[..., APPROVE] - eg[..., DENY]


def benefit(x: int, s: int, config: EnvConfig) -> float:
    x = check_score(x, config)
    return float(benefit_table(config)[check_group(s), x - 1])


# -- decomposition --------------------------------------------------------------


def wasserstein_gap(p, q) -> float:
    """W1 between two distributions on a unit-spaced ordered support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim != 1 or p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.abs(np.cumsum(p) - np.cumsum(q)).sum())


def _pair_weights(benefits: np.ndarray, state_dists: np.ndarray, epsilon: float) -> np.ndarray:
    """``w[x, x'] = eps / (eps + |delta+(x) - delta-(x')|) * P+(x) P-(x')``."""
    dist = np.abs(benefits[PLUS][:, None] - benefits[MINUS][None, :])
    return epsilon / (epsilon + dist) * np.outer(state_dists[PLUS], state_dists[MINUS])


def lambda_from_table(
    approve: np.ndarray, benefits: np.ndarray, state_dists: np.ndarray, epsilon: float
) -> float:
    w = _pair_weights(benefits, state_dists, epsilon)
    gap = np.abs(approve[PLUS][:, None] - approve[MINUS][None, :])
    return float(np.sum(w * gap))


def benefit_fairness_gap(
    params: PolicyParams,
    state_dists,
    config: EnvConfig,
    epsilon: float = DEFAULT_EPSILON,
) -> float:
    """Approval gaps across group pairs, down-weighted as their benefits diverge."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    dists = np.asarray(state_dists, dtype=float)
    if dists.shape != (2, config.num_levels) or np.any(np.abs(dists.sum(axis=1) - 1) > 1e-9):
        raise ValueError("state_dists must be two probability vectors over the score levels")
    approve = _policy_table(params, config)[..., APPROVE]
    return lambda_from_table(approve, benefit_table(config), dists, epsilon)


def decompose(
    params: PolicyParams, config: EnvConfig, epsilon: float = DEFAULT_EPSILON
) -> DecompositionReport:
    pi = _policy_table(params, config)
    kernel = transition_kernel(config)
    gains = expected_gain(config, kernel)
    pi0 = baseline_table(config.num_levels)
    c_pi = dpe = ipe = spe = 0.0
    visits = []
    for s in GROUPS:
        init = config.init_score_dist[s]
        v_pi = init @ _values(pi, s, config, None, kernel=kernel, gains=gains).v[0]
        v_ps = init @ _values(pi, s, config, None, True, kernel, gains).v[0]
        v_0 = init @ _values(pi0, s, config, None, kernel=kernel, gains=gains).v[0]
        sign = _SIGN[s]
        c_pi += sign * v_pi
        dpe += sign * (v_pi - v_ps)
        ipe += sign * (v_ps - v_0)
        spe += sign * v_0
        visits.append(propagate(init, mixed_kernel(pi[s], kernel[s]), config.horizon))
    eta = np.stack([occ[:-1].sum(axis=0) for occ in visits])
    benefits = gains[..., APPROVE] - gains[..., DENY]
    lam = lambda_from_table(pi[..., APPROVE], benefits, eta / config.horizon, epsilon)
    rates = (eta * pi[..., APPROVE]).sum(axis=1) / config.horizon
    return DecompositionReport(
        c_pi=float(c_pi),
        dpe=float(dpe),
        ipe=float(ipe),
        spe=float(spe),
        lambda_metric=lam,
        wasserstein_gap=wasserstein_gap(visits[PLUS][-1], visits[MINUS][-1]),
        loan_rate_plus=float(rates[PLUS]),
        loan_rate_minus=float(rates[MINUS]),
    )


def parity(params: PolicyParams, config: EnvConfig) -> float:
    """Just ``C``, without the rest of the report."""
    pi = _policy_table(params, config)
    kernel = transition_kernel(config)
    gains = expected_gain(config, kernel)
    return float(
        sum(
            _SIGN[s]
            * (config.init_score_dist[s] @ _values(pi, s, config, None, kernel=kernel, gains=gains).v[0])
            for s in GROUPS
        )
    )


def dpe_via_benefit(params: PolicyParams, config: EnvConfig) -> float:
    """Direct effect as visit-weighted ``pi(approve) * benefit`` per group."""
    pi = _policy_table(params, config)
    benefits = benefit_table(config)
    out = 0.0
    for s in GROUPS:
        eta = visitation(params, s, config).eta
        out += _SIGN[s] * float(np.sum(eta * pi[s, :, APPROVE] * benefits[s]))
    return out


# -- exhaustive enumeration -------------------------------------------------------


def _check_capacity(config: EnvConfig) -> None:
    if config.num_levels > MAX_ENUM_LEVELS or config.horizon > MAX_ENUM_HORIZON:
        raise CapacityError(
            f"enumeration limited to C <= {MAX_ENUM_LEVELS}, T <= {MAX_ENUM_HORIZON}; "
            f"got C={config.num_levels}, T={config.horizon}"
        )


def enumerate_trajectories(
    pi: np.ndarray, kernel: np.ndarray, start: int, horizon: int
) -> Iterator[tuple[float, tuple[int, ...], tuple[int, ...]]]:
    """Every ``(prob, states, decisions)`` path of one group from score index ``start``.

    ``states`` has ``horizon + 1`` zero-based score indices; zero-probability
    branches are skipped.
    """
    c = kernel.shape[0]

    def walk(prob, states, decisions):
        if len(decisions) == horizon:
            yield prob, states, decisions
            return
        x = states[-1]
        for d in (DENY, APPROVE):
            pd = pi[x, d]
            if pd == 0.0:
                continue
            for y in range(c):
                py = kernel[x, d, y]
                if py == 0.0:
                    continue
                yield from walk(prob * pd * py, states + (y,), decisions + (d,))

    yield from walk(1.0, (start,), ())


def brute_force_values(params: PolicyParams, s: int, config: EnvConfig) -> dict[str, np.ndarray]:
    """``V(1, x)`` for the behavior, baseline and virtual policies by path enumeration."""
    _check_capacity(config)
    s = check_group(s)
    pi = _policy_table(params, config)[s]
    pi0 = baseline_table(config.num_levels)[s]
    kernel = transition_kernel(config)[s]
    g = gain_matrix(config, s)
    deny_gain = np.einsum("xy,xy->x", kernel[:, DENY], g)
    out = {k: np.zeros(config.num_levels) for k in ("behavior", "baseline", "virtual")}
    for x in range(config.num_levels):
        for prob, xs, _ in enumerate_trajectories(pi, kernel, x, config.horizon):
            out["behavior"][x] += prob * sum(g[a, b] for a, b in zip(xs[:-1], xs[1:]))
            out["virtual"][x] += prob * sum(deny_gain[a] for a in xs[:-1])
        for prob, xs, _ in enumerate_trajectories(pi0, kernel, x, config.horizon):
            out["baseline"][x] += prob * sum(g[a, b] for a, b in zip(xs[:-1], xs[1:]))
    return out


def brute_force_visits(pi: np.ndarray, kernel: np.ndarray, horizon: int) -> np.ndarray:
    """``eta[x, x']``: expected visits to ``x'`` over ``t = 1..T`` starting at ``x``."""
    c = kernel.shape[0]
    eta = np.zeros((c, c))
    for x in range(c):
        for prob, xs, _ in enumerate_trajectories(pi, kernel, x, horizon):
            for visited in xs[:-1]:
                eta[x, visited] += prob
    return eta


def proposition1_residual(params: PolicyParams, s: int, config: EnvConfig) -> tuple[float, float]:
    """Max residuals of the direct- and delayed-impact identities over start states.

    Left sides come from the DP tables; right sides from visit counts found by
    enumerating every path, with benefit and approval taken at the visited
    state.
    """
    _check_capacity(config)
    s = check_group(s)
    pi = _policy_table(params, config)[s]
    pi0 = baseline_table(config.num_levels)[s]
    kernel = transition_kernel(config)[s]
    gains = expected_gain(config, transition_kernel(config))[s]
    delta = gains[:, APPROVE] - gains[:, DENY]
    eta_pi = brute_force_visits(pi, kernel, config.horizon)
    eta_0 = brute_force_visits(pi0, kernel, config.horizon)

    v_pi = value_behavior(params, s, config).v[0]
    v_ps = value_virtual(params, s, config).v[0]
    v_0 = value_baseline(s, config).v[0]
    direct = eta_pi @ (pi[:, APPROVE] * delta)
    delayed = (eta_pi - eta_0) @ gains[:, DENY]
    return (
        float(np.max(np.abs((v_pi - v_ps) - direct))),
        float(np.max(np.abs((v_ps - v_0) - delayed))),
    )
