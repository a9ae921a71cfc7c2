"""KL-penalized PPO with qualification-gain-parity and benefit-fairness penalties.

Objective maximized at every minibatch step::

    J = L_util - beta_kl * L_kl - beta_c * C**2 - beta_lambda * Lambda

``ppo`` uses the first two terms, ``ppo-c`` adds the parity penalty and
``ppo-cb`` adds the benefit-fairness term as well.  In ``oracle`` mode the
advantages, ``C`` and ``Lambda`` (and their gradients) come from exact DP on
the known MDP; in ``sampled`` mode they are estimated from the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from .analysis import (
    DEFAULT_EPSILON,
    DecompositionReport,
    _pair_weights,
    decompose,
    expected_gain,
    expected_utility,
)
from .env import (
    APPROVE,
    DENY,
    GROUP_NAMES,
    GROUPS,
    MINUS,
    PLUS,
    EnvConfig,
    ConfigError,
    expected_reward,
    gain_potential,
    transition_kernel,
)
from .policy import PolicyParams, check_compatible, probability_table, softmax

log = logging.getLogger(__name__)

ALGOS = ("ppo", "ppo-c", "ppo-cb")
MODES = ("oracle", "sampled")
_SIGN = np.array([1.0, -1.0])


class EstimationError(ValueError):
    """Raised when a batch cannot support an estimate (e.g. a group is missing)."""


class OptimizationError(RuntimeError):
    """Raised when an objective term becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "ppo-c"
    mode: str = "oracle"
    beta_kl: float = 10.0
    beta_c: float = 1.0
    beta_lambda: float = 0.5
    learning_rate: float = 0.05
    iterations: int = 300
    episodes_per_iter: int = 200
    minibatch_size: int = 256
    epochs_per_batch: int = 4
    epsilon: float = DEFAULT_EPSILON
    init_scale: float = 0.1
    adjusted: bool = False

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("beta_kl", "beta_c", "beta_lambda", "learning_rate", "init_scale"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ConfigError(f"{name} must be a nonnegative number, got {value!r}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon!r}")
        for name in ("iterations", "episodes_per_iter", "minibatch_size", "epochs_per_batch"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")

    @property
    def effective_beta_c(self) -> float:
        return self.beta_c if self.algo in ("ppo-c", "ppo-cb") else 0.0

    @property
    def effective_beta_lambda(self) -> float:
        return self.beta_lambda if self.algo == "ppo-cb" else 0.0

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """Flat per-timestep records, episode-major; scores are 1-based."""

    group: np.ndarray
    score: np.ndarray
    decision: np.ndarray
    reward: np.ndarray
    gain: np.ndarray
    old_prob: np.ndarray
    episode: np.ndarray
    timestep: np.ndarray
    reward_to_go: np.ndarray
    gain_to_go: np.ndarray
    episode_reward_total: np.ndarray
    episode_gain_total: np.ndarray
    horizon: int

    def __len__(self) -> int:
        return len(self.group)

    @property
    def n_episodes(self) -> int:
        return len(self) // self.horizon

    @property
    def episode_reward(self) -> np.ndarray:
        return self.reward_to_go[self.timestep == 1]

    @property
    def episode_gain(self) -> np.ndarray:
        return self.gain_to_go[self.timestep == 1]

    @property
    def episode_group(self) -> np.ndarray:
        return self.group[self.timestep == 1]

    def take(self, idx: np.ndarray) -> "RolloutBatch":
        return RolloutBatch(
            **{
                f.name: getattr(self, f.name)[idx]
                for f in fields(self)
                if f.name != "horizon"
            },
            horizon=self.horizon,
        )


class _Model:
    """Per-config tables reused across the many evaluations of one training run."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.kernel = transition_kernel(config)
        self.gains = expected_gain(config, self.kernel)
        self.rewards = expected_reward(config)
        self.benefits = self.gains[..., APPROVE] - self.gains[..., DENY]
        self.potential = np.stack([gain_potential(config, s) for s in GROUPS])
        self.horizon = config.horizon

    def _backward(self, pi, step):
        """Both groups at once: ``v[t, s, x]``, ``q[t, s, x, d]``."""
        c = self.config.num_levels
        v = np.zeros((self.horizon + 1, 2, c))
        q = np.zeros((self.horizon, 2, c, 2))
        for t in range(self.horizon - 1, -1, -1):
            q[t] = step + np.einsum("sxdy,sy->sxd", self.kernel, v[t + 1])
            v[t] = (pi * q[t]).sum(axis=-1)
        return v, q

    def gain_values(self, pi):
        return self._backward(pi, self.gains)

    def reward_values(self, pi):
        return self._backward(pi, self.rewards)

    def occupancy(self, pi):
        """``occ[t, s, x]`` for ``t = 1..T+1``."""
        step = np.einsum("sxd,sxdy->sxy", pi, self.kernel)
        occ = np.zeros((self.horizon + 1, 2, self.config.num_levels))
        occ[0] = self.config.init_score_dist
        for t in range(self.horizon):
            occ[t + 1] = np.einsum("sx,sxy->sy", occ[t], step)
        return occ


# -- rollouts ----------------------------------------------------------------------


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def collect_rollouts(
    rng: np.random.Generator, params: PolicyParams, config: EnvConfig, n_episodes: int
) -> RolloutBatch:
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    check_compatible(params, config)
    n, horizon, c = int(n_episodes), config.horizon, config.num_levels
    pi = probability_table(params)
    phi = np.stack([gain_potential(config, s) for s in GROUPS])

    group = np.where(rng.random(n) < config.group_prior, PLUS, MINUS)
    x = _categorical(rng, config.init_score_dist[group])
    cols = {k: np.zeros((n, horizon)) for k in ("score", "decision", "reward", "gain", "old_prob")}
    for t in range(horizon):
        repays = rng.random(n) < config.repay_prob[group, x]
        drift = _categorical(rng, config.drift_dist[group]) - 1
        p1 = pi[group, x, APPROVE]
        approve = rng.random(n) < p1
        step = np.where(approve, np.where(repays, 1, -1), 0)
        x_next = np.clip(x + drift + step, 0, c - 1)
        cols["score"][:, t] = x + 1
        cols["decision"][:, t] = approve
        cols["reward"][:, t] = np.where(
            approve, np.where(repays, config.reward_success, -config.reward_default), 0.0
        )
        cols["gain"][:, t] = phi[group, x_next] - phi[group, x]
        cols["old_prob"][:, t] = np.where(approve, p1, 1.0 - p1)
        x = x_next

    def to_go(a):
        return np.cumsum(a[:, ::-1], axis=1)[:, ::-1]

    reward_to_go = to_go(cols["reward"])
    gain_to_go = to_go(cols["gain"])

    return RolloutBatch(
        group=np.repeat(group, horizon),
        score=cols["score"].astype(int).ravel(),
        decision=cols["decision"].astype(int).ravel(),
        reward=cols["reward"].ravel(),
        gain=cols["gain"].ravel(),
        old_prob=cols["old_prob"].ravel(),
        episode=np.repeat(np.arange(n), horizon),
        timestep=np.tile(np.arange(1, horizon + 1), n),
        reward_to_go=reward_to_go.ravel(),
        gain_to_go=gain_to_go.ravel(),
        episode_reward_total=np.repeat(reward_to_go[:, 0], horizon),
        episode_gain_total=np.repeat(gain_to_go[:, 0], horizon),
        horizon=horizon,
    )


# -- estimators ------------------------------------------------------------------------


def estimate_advantages(
    batch: RolloutBatch, params: PolicyParams, config: EnvConfig, mode: str = "oracle"
) -> np.ndarray:
    if mode == "oracle":
        model = _Model(config)
        v, q = model.reward_values(probability_table(params))
        t, s, x = batch.timestep - 1, batch.group, batch.score - 1
        return q[t, s, x, batch.decision] - v[t, s, x]
    if mode == "sampled":
        return batch.reward_to_go - _cell_means(batch, batch.reward_to_go)
    raise ValueError(f"unknown mode {mode!r}")


def _cell_means(batch: RolloutBatch, values: np.ndarray) -> np.ndarray:
    """Per-record mean of ``values`` over records sharing ``(t, x, s)``."""
    key = (batch.group * (batch.horizon + 1) + batch.timestep) * (batch.score.max() + 1) + batch.score
    _, inv = np.unique(key, return_inverse=True)
    sums = np.bincount(inv, weights=values)
    counts = np.bincount(inv)
    return (sums / counts)[inv]


def _ratios(batch: RolloutBatch, pi: np.ndarray, old_pi: Optional[np.ndarray] = None) -> np.ndarray:
    new = pi[batch.group, batch.score - 1, batch.decision]
    old = batch.old_prob if old_pi is None else old_pi[batch.group, batch.score - 1, batch.decision]
    return new / old


def constraint_estimate(
    batch: RolloutBatch, params: PolicyParams, old_params: PolicyParams
) -> float:
    """Importance-weighted estimate of the parity gap ``C``.

    Per group: the mean episode gain plus ``T`` times the mean over records
    of ``(ratio - 1) * gain_to_go``.  With ``params == old_params`` this is
    the plain group gap of mean episode gains.
    """
    value, _ = _constraint_and_grad(batch, probability_table(params), probability_table(old_params))
    return value


def _constraint_and_grad(batch, pi, old_pi=None, want_grad=False):
    ratio = _ratios(batch, pi, old_pi)
    ep_gain = batch.episode_gain_total
    value = 0.0
    grad = np.zeros_like(pi) if want_grad else None
    for s in GROUPS:
        m = batch.group == s
        k = int(m.sum())
        if k == 0:
            raise EstimationError(f"batch has no records for group {GROUP_NAMES[s]!r}")
        weighted = ratio[m] * batch.gain_to_go[m]
        value += _SIGN[s] * (ep_gain[m].mean() + batch.horizon * (weighted - batch.gain_to_go[m]).mean())
        if want_grad:
            coef = _SIGN[s] * batch.horizon * weighted / k
            _accumulate_logprob_grad(grad, batch.take(np.flatnonzero(m)), pi, coef)
    return float(value), grad


def _accumulate_logprob_grad(grad, batch, pi, coef) -> None:
    """``grad += sum_r coef_r * d ln pi(d_r | x_r, s_r) / d logits``."""
    s, x, d = batch.group, batch.score - 1, batch.decision
    cell = s * pi.shape[1] + x
    for k in (DENY, APPROVE):
        contrib = coef * ((d == k) - pi[s, x, k])
        grad[..., k] += np.bincount(cell, weights=contrib, minlength=grad[..., k].size).reshape(grad.shape[:2])


def _softmax_jvp_approve(pi: np.ndarray, dl_dp1: np.ndarray) -> np.ndarray:
    """Chain ``dL/dp(approve)`` through the softmax onto both logits."""
    p1 = pi[..., APPROVE]
    grad = np.empty_like(pi)
    grad[..., APPROVE] = dl_dp1 * p1 * (1 - p1)
    grad[..., DENY] = -grad[..., APPROVE]
    return grad


def lambda_and_grad(pi, benefits, state_dists, epsilon):
    """Benefit-fairness gap and its (sub)gradient in the logits, dists held fixed."""
    w = _pair_weights(benefits, state_dists, epsilon)
    diff = pi[PLUS, :, APPROVE][:, None] - pi[MINUS, :, APPROVE][None, :]
    sgn = np.sign(diff) * w
    dl_dp1 = np.stack([sgn.sum(axis=1), -sgn.sum(axis=0)])
    return float(np.sum(w * np.abs(diff))), _softmax_jvp_approve(pi, dl_dp1)


def parity_and_grad_oracle(model: _Model, pi: np.ndarray, occ=None) -> tuple[float, np.ndarray]:
    """Exact ``C`` and ``dC/dlogits`` from the gain Q tables and occupancies.

    ``dC/dlogit[s, x, d] = sign_s * sum_t occ(t, x) * pi(d|x,s) * (Q - V)(t, x, d)``
    """
    v, q = model.gain_values(pi)
    if occ is None:
        occ = model.occupancy(pi)
    value = float(_SIGN @ np.sum(model.config.init_score_dist * v[0], axis=1))
    adv = q - v[:-1, :, :, None]
    grad = _SIGN[:, None, None] * np.einsum("tsx,tsxd->sxd", occ[:-1], adv) * pi
    return value, grad


def constraint_gradient_oracle(params: PolicyParams, config: EnvConfig) -> np.ndarray:
    """Exact gradient of ``C**2`` with respect to the logits."""
    check_compatible(params, config)
    value, grad = parity_and_grad_oracle(_Model(config), probability_table(params))
    return 2.0 * value * grad


def _kl_and_grad(batch, pi, old_pi):
    s, x = batch.group, batch.score - 1
    p_old, p_new = old_pi[s, x], pi[s, x]
    kl = np.sum(p_old * (np.log(p_old) - np.log(p_new)), axis=1)
    grad = np.zeros_like(pi)
    n = len(batch)
    cell = s * pi.shape[1] + x
    for d in (DENY, APPROVE):
        w = (p_new[:, d] - p_old[:, d]) / n
        grad[..., d] = np.bincount(cell, weights=w, minlength=grad[..., d].size).reshape(grad.shape[:2])
    return float(kl.mean()), grad


def _util_and_grad(batch, pi, adv):
    ratio = _ratios(batch, pi)
    grad = np.zeros_like(pi)
    _accumulate_logprob_grad(grad, batch, pi, ratio * adv / len(batch))
    return float(np.mean(ratio * adv)), grad


def empirical_state_dists(batch: RolloutBatch, num_levels: int) -> np.ndarray:
    dists = np.zeros((2, num_levels))
    for s in GROUPS:
        counts = np.bincount(batch.score[batch.group == s] - 1, minlength=num_levels)
        if counts.sum() == 0:
            raise EstimationError(f"batch has no records for group {GROUP_NAMES[s]!r}")
        dists[s] = counts / counts.sum()
    return dists


# -- update ------------------------------------------------------------------------------


@dataclass
class UpdateDiagnostics:
    l_util: float
    l_kl: float
    constraint: float
    lambda_metric: float
    l_util_start: float
    l_kl_start: float
    l_util_trace: list = field(default_factory=list)


class _Objective:
    """Evaluates the four objective terms and their gradients for one update."""

    def __init__(self, model, batch, adv, old_pi, train_cfg, baseline_gap=0.0):
        self.model = model
        self.batch = batch
        self.adv = adv
        self.old_pi = old_pi
        self.cfg = train_cfg
        self.baseline_gap = baseline_gap
        self.state_dists = None
        if train_cfg.mode == "sampled":
            self.state_dists = empirical_state_dists(batch, model.config.num_levels)

    def terms(self, pi, idx=None, want_grad=True):
        cfg = self.cfg
        mb = self.batch if idx is None else self.batch.take(idx)
        adv = self.adv if idx is None else self.adv[idx]
        l_util, g_util = _util_and_grad(mb, pi, adv)
        l_kl, g_kl = _kl_and_grad(mb, pi, self.old_pi)
        beta_c, beta_l = cfg.effective_beta_c, cfg.effective_beta_lambda
        if cfg.mode == "oracle":
            occ = self.model.occupancy(pi)
            c_val, c_grad = parity_and_grad_oracle(self.model, pi, occ)
            dists = occ[:-1].mean(axis=0)
        else:
            try:
                c_val, c_grad = _constraint_and_grad(mb, pi, None, want_grad=True)
            except EstimationError:
                # minibatch missed a group: fall back to the whole batch
                c_val, c_grad = _constraint_and_grad(self.batch, pi, None, want_grad=True)
            dists = self.state_dists
        c_val += self.baseline_gap
        lam, g_lam = lambda_and_grad(pi, self.model.benefits, dists, cfg.epsilon)
        values = {"util": l_util, "kl": l_kl, "constraint": c_val, "lambda": lam}
        for name, v in values.items():
            if not np.isfinite(v):
                raise OptimizationError(f"objective term {name!r} is not finite")
        grad = g_util - cfg.beta_kl * g_kl - beta_c * 2.0 * c_val * c_grad - beta_l * g_lam
        if not np.all(np.isfinite(grad)):
            raise OptimizationError("objective gradient is not finite")
        return values, grad


def ppo_update(
    params: PolicyParams,
    batch: RolloutBatch,
    train_cfg: TrainConfig,
    config: EnvConfig,
    rng: Optional[np.random.Generator] = None,
    advantages: Optional[np.ndarray] = None,
    baseline_gap: float = 0.0,
    _model: Optional[_Model] = None,
) -> tuple[PolicyParams, UpdateDiagnostics]:
    """Minibatch gradient ascent on ``J`` for ``epochs_per_batch`` passes.

    ``batch.old_prob`` defines the old policy for the importance ratios and
    the KL term.  ``baseline_gap`` is added to ``C`` when training on the
    baseline-adjusted parity.
    """
    check_compatible(params, config)
    model = _model or _Model(config)
    rng = rng if rng is not None else np.random.default_rng(0)
    if advantages is None:
        advantages = estimate_advantages(batch, params, config, train_cfg.mode)
    old_pi = probability_table(params)
    obj = _Objective(model, batch, advantages, old_pi, train_cfg, baseline_gap)
    logits = np.array(params.logits)

    start, _ = obj.terms(old_pi)
    trace = [start["util"]]
    n = len(batch)
    for _ in range(train_cfg.epochs_per_batch):
        order = rng.permutation(n)
        for lo in range(0, n, train_cfg.minibatch_size):
            idx = order[lo : lo + train_cfg.minibatch_size]
            _, grad = obj.terms(softmax(logits), idx)
            logits += train_cfg.learning_rate * grad
        trace.append(obj.terms(softmax(logits))[0]["util"])
    end, _ = obj.terms(softmax(logits))
    diag = UpdateDiagnostics(
        l_util=end["util"],
        l_kl=end["kl"],
        constraint=end["constraint"],
        lambda_metric=end["lambda"],
        l_util_start=start["util"],
        l_kl_start=start["kl"],
        l_util_trace=trace,
    )
    return PolicyParams(logits), diag


# -- training loop -------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    utility: float
    batch_utility: float
    report: DecompositionReport
    adjusted_c_pi: float
    diagnostics: UpdateDiagnostics


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    params: Optional[PolicyParams] = None

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> IterationRecord:
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        out = []
        for rec in self.records:
            if hasattr(rec, name):
                out.append(getattr(rec, name))
            else:
                out.append(getattr(rec.report, name))
        return np.array(out, dtype=float)

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]


def train(
    env_cfg: EnvConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    on_iteration: Optional[Callable[[IterationRecord], None]] = None,
    init_params: Optional[PolicyParams] = None,
) -> TrainHistory:
    """Collect, estimate, update; repeat.  Diagnostics are always exact."""
    from .counterfactual import baseline_gap

    model = _Model(env_cfg)
    params = init_params or PolicyParams.random(rng, env_cfg.num_levels, train_cfg.init_scale)
    check_compatible(params, env_cfg)
    gap = baseline_gap(env_cfg)
    train_gap = gap if train_cfg.adjusted else 0.0
    history = TrainHistory()
    for it in range(1, train_cfg.iterations + 1):
        batch = collect_rollouts(rng, params, env_cfg, train_cfg.episodes_per_iter)
        adv = estimate_advantages(batch, params, env_cfg, train_cfg.mode)
        params, diag = ppo_update(
            params, batch, train_cfg, env_cfg, rng, adv, baseline_gap=train_gap, _model=model
        )
        report = decompose(params, env_cfg, train_cfg.epsilon)
        rec = IterationRecord(
            iteration=it,
            utility=expected_utility(params, env_cfg),
            batch_utility=float(batch.episode_reward.mean()),
            report=report,
            adjusted_c_pi=gap + report.c_pi,
            diagnostics=diag,
        )
        history.records.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
        log.debug("iter %d utility %.4f c_pi %.4f", it, rec.utility, report.c_pi)
    history.params = params
    return history
