"""Baseline-qualification adjustment of the parity measure.

Both groups are imagined to start from the pooled score distribution one
step before the first real period.  Intervening on the group then moves each
individual to the score they would have had in that group; the rank-preserving
(comonotonic) coupling between the pooled distribution and the group's own
initial distribution plays the role of that counterfactual map.  The
expected gain of this fictitious step is ``G_s``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .analysis import parity
from .env import MINUS, PLUS, EnvConfig, check_group, gain_matrix
from .policy import PolicyParams


@dataclass(frozen=True, eq=False)
class Coupling:
    """Joint mass ``table[i, j]`` of (source score ``i + 1``, target score ``j + 1``)."""

    table: np.ndarray

    @property
    def source(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def target(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def conditional(self) -> np.ndarray:
        """Rows normalized to ``P(target | source)``; empty rows stay zero."""
        src = self.source
        out = np.zeros_like(self.table)
        nz = src > 0
        out[nz] = self.table[nz] / src[nz, None]
        return out

    def cells(self):
        """``(row, column, mass)`` for every cell carrying mass, 1-based scores."""
        rows, cols = np.nonzero(self.table)
        return [(int(i) + 1, int(j) + 1, float(self.table[i, j])) for i, j in zip(rows, cols)]

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["row", "column", "mass"])
            for i, j, m in self.cells():
                writer.writerow([i, j, repr(m)])


def _prob_vector(name, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-10:
        raise ValueError(f"{name} must be a probability vector")
    return p


def monotone_coupling(from_dist, to_dist) -> Coupling:
    """Comonotonic coupling: quantiles of ``from_dist`` map to equal quantiles of ``to_dist``.

    Cell ``(i, j)`` receives the overlap of the CDF intervals
    ``[F(i-1), F(i)]`` and ``[G(j-1), G(j)]``.
    """
    p = _prob_vector("from_dist", from_dist)
    q = _prob_vector("to_dist", to_dist)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    fp = np.concatenate([[0.0], np.cumsum(p)])
    fq = np.concatenate([[0.0], np.cumsum(q)])
    # pin both CDFs to end exactly at 1 so the last cells close the marginals
    fp[-1] = fq[-1] = 1.0
    hi = np.minimum(fp[1:, None], fq[None, 1:])
    lo = np.maximum(fp[:-1, None], fq[None, :-1])
    table = np.maximum(hi - lo, 0.0)
    return Coupling(table)


def common_marginal(config: EnvConfig) -> np.ndarray:
    """Pooled initial score distribution ``sum_s P(s) P(x | s)``."""
    return config.group_weights @ config.init_score_dist


def baseline_coupling(s: int, config: EnvConfig) -> Coupling:
    return monotone_coupling(common_marginal(config), config.init_score_dist[check_group(s)])


def baseline_gain(s: int, config: EnvConfig) -> float:
    """Expected gain of moving from the pooled start to group ``s``'s start."""
    s = check_group(s)
    return float(np.sum(baseline_coupling(s, config).table * gain_matrix(config, s)))


def baseline_gap(config: EnvConfig) -> float:
    return baseline_gain(PLUS, config) - baseline_gain(MINUS, config)


def baseline_gain_monte_carlo(
    rng: np.random.Generator, s: int, config: EnvConfig, n_samples: int
) -> tuple[float, float]:
    """Sample pooled scores, map them counterfactually, average the gain.

    Returns ``(mean, standard_error)``.
    """
    s = check_group(s)
    pooled = common_marginal(config)
    cond = baseline_coupling(s, config).conditional()
    g = gain_matrix(config, s)
    c = config.num_levels
    x = rng.choice(c, size=n_samples, p=pooled / pooled.sum())
    cdf = np.cumsum(cond[x], axis=1)
    x_cf = np.minimum((rng.random(n_samples)[:, None] >= cdf).sum(axis=1), c - 1)
    draws = g[x, x_cf]
    return float(draws.mean()), float(draws.std(ddof=1) / np.sqrt(n_samples))


def adjusted_parity(params: PolicyParams, config: EnvConfig) -> float:
    """Parity gap counted from the shared fictitious start."""
    return baseline_gap(config) + parity(params, config)

