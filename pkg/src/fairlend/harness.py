"""Multi-seed experiments and their CSV / SVG outputs."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union
from xml.sax.saxutils import escape

import numpy as np

from .analysis import DecompositionReport
from .config import env_config_to_dict
from .env import ConfigError, EnvConfig
from .policy import save_policy
from .trainer import ALGOS, IterationRecord, TrainConfig, train


class EmissionError(ValueError):
    """Raised when a metric row cannot be written (e.g. a NaN)."""


@dataclass(frozen=True)
class MetricRow:
    iteration: int
    seed: Union[int, str]
    algo: str
    utility: float
    c_pi: float
    dpe: float
    ipe: float
    spe: float
    lambda_metric: float
    wasserstein_gap: float
    loan_rate_plus: float
    loan_rate_minus: float
    adjusted_c_pi: float

    @classmethod
    def from_record(cls, rec: IterationRecord, seed, algo: str) -> "MetricRow":
        r = rec.report
        return cls(
            iteration=rec.iteration,
            seed=seed,
            algo=algo,
            utility=rec.utility,
            c_pi=r.c_pi,
            dpe=r.dpe,
            ipe=r.ipe,
            spe=r.spe,
            lambda_metric=r.lambda_metric,
            wasserstein_gap=r.wasserstein_gap,
            loan_rate_plus=r.loan_rate_plus,
            loan_rate_minus=r.loan_rate_minus,
            adjusted_c_pi=rec.adjusted_c_pi,
        )


COLUMNS = tuple(f.name for f in fields(MetricRow))
METRICS = COLUMNS[3:]
REPORT_COLUMNS = tuple(f.name for f in fields(DecompositionReport))


def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _check_finite(row: MetricRow) -> None:
    for name in METRICS:
        value = getattr(row, name)
        if not math.isfinite(value):
            raise EmissionError(f"non-finite {name} ({value!r}) at iteration {row.iteration}")


class MetricCsvWriter:
    """Streams metric rows to a CSV file, one flushed line per row."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(COLUMNS)
        self._fh.flush()

    def write(self, row: MetricRow) -> None:
        _check_finite(row)
        self._writer.writerow([_format(v) for v in astuple(row)])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit_csv(rows: Iterable[MetricRow], path: Union[str, Path]) -> Path:
    """Write rows in the fixed column order; refuses non-finite metrics."""
    rows = list(rows)
    for row in rows:
        _check_finite(row)
    with MetricCsvWriter(path) as out:
        for row in rows:
            out.write(row)
    return Path(path)


def read_csv(path: Union[str, Path]) -> list[MetricRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for raw in reader:
            seed = int(raw[1]) if raw[1].lstrip("-").isdigit() else raw[1]
            out.append(MetricRow(int(raw[0]), seed, raw[2], *(float(v) for v in raw[3:])))
        return out


def report_csv(report: DecompositionReport, path: Union[str, Path]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerow([_format(getattr(report, c)) for c in REPORT_COLUMNS])
    return Path(path)


def average_rows(runs: Sequence[Sequence[MetricRow]], algo: str) -> list[MetricRow]:
    """Per-iteration arithmetic mean across seeds."""
    if not runs:
        return []
    n = min(len(r) for r in runs)
    out = []
    for i in range(n):
        values = np.array([[getattr(run[i], m) for m in METRICS] for run in runs])
        out.append(MetricRow(runs[0][i].iteration, "mean", algo, *map(float, values.mean(axis=0))))
    return out


# -- SVG charts ----------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    color: Optional[str] = None
    width: float = 2.0
    opacity: float = 1.0
    legend: bool = True


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def emit_svg(
    series: Sequence[Series],
    path: Union[str, Path],
    title: str = "",
    xlabel: str = "iteration",
    ylabel: str = "",
    width: int = 640,
    height: int = 400,
) -> Path:
    """Static SVG 1.1 line chart, one polyline per series."""
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [float(v) for s in series for v in s.x]
    ys = [float(v) for s in series for v in s.y]
    for s in series:
        if not all(math.isfinite(float(v)) for v in s.y):
            raise EmissionError(f"series {s.label!r} contains non-finite values")
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15" font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.1f}" y1="{top + ph}" x2="{px(t):.1f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(t):.1f}" y="{top + ph + 18}" text-anchor="middle" font-size="11" font-family="sans-serif">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{py(t):.1f}" x2="{left}" y2="{py(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.1f}" text-anchor="end" font-size="11" font-family="sans-serif">{t:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="13" font-family="sans-serif">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="13" font-family="sans-serif" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    legend_y = top
    for k, s in enumerate(series):
        color = s.color or _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(float(a)):.2f},{py(float(b)):.2f}" for a, b in zip(s.x, s.y))
        out.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="{s.width}" '
            f'stroke-opacity="{s.opacity}" points="{pts}"><title>{escape(s.label)}</title></polyline>'
        )
        if s.legend:
            lx = left + pw + 12
            out.append(f'<line x1="{lx}" y1="{legend_y + 6}" x2="{lx + 18}" y2="{legend_y + 6}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{lx + 24}" y="{legend_y + 10}" font-size="11" font-family="sans-serif">{escape(s.label)}</text>')
            legend_y += 18
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
    return Path(path)


# -- experiments -------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    """What to run: every label in :meth:`runs` is trained once per seed.

    ``variants`` maps a suffix to train-config overrides (used by sweeps);
    without variants each algo runs once with ``train_cfg``.
    """

    env_cfg: EnvConfig
    train_cfg: TrainConfig
    seeds: Sequence[int]
    out_dir: Union[str, Path]
    algos: Sequence[str] = ("ppo", "ppo-c")
    adjusted: bool = False
    variants: Mapping[str, Mapping] = field(default_factory=dict)
    workers: int = 1

    def runs(self) -> list[tuple[str, TrainConfig]]:
        out = []
        for algo in self.algos:
            base = self.train_cfg.replace(algo=algo, adjusted=self.adjusted)
            if not self.variants:
                out.append((algo, base))
            for suffix, overrides in self.variants.items():
                out.append((f"{algo}_{suffix}", base.replace(**overrides)))
        return out

    def validate(self) -> None:
        if len(self.seeds) < 1:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for algo in self.algos:
            if algo not in ALGOS:
                raise ConfigError(f"unknown algo {algo!r}; choose from {ALGOS}")
        labels = [label for label, _ in self.runs()]
        if len(set(labels)) != len(labels):
            raise ConfigError("run labels must be distinct")
        out = Path(self.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write_probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {out} is not writable: {exc}") from None


def _run_one(job) -> list[MetricRow]:
    label, cfg, env_cfg, seed, csv_path, policy_path = job
    rows = []
    with MetricCsvWriter(csv_path) as out:

        def record(rec):
            row = MetricRow.from_record(rec, seed, label)
            out.write(row)
            rows.append(row)

        history = train(env_cfg, cfg, np.random.default_rng(seed), on_iteration=record)
    save_policy(history.params, policy_path)
    return rows


def run_experiment(spec: ExperimentSpec) -> dict[str, list[Path]]:
    """Train every (label, seed) pair and write CSVs, charts and a manifest.

    Returns the written paths grouped as ``runs``, ``averages``, ``charts``,
    ``policies`` and ``meta``.
    """
    spec.validate()
    out = Path(spec.out_dir)
    (out / "runs").mkdir(exist_ok=True)
    (out / "policies").mkdir(exist_ok=True)
    (out / "charts").mkdir(exist_ok=True)

    jobs = []
    for label, cfg in spec.runs():
        for seed in spec.seeds:
            jobs.append(
                (
                    label,
                    cfg,
                    spec.env_cfg,
                    seed,
                    out / "runs" / f"{label}_seed{seed}.csv",
                    out / "policies" / f"{label}_seed{seed}.txt",
                )
            )
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]

    manifest = {
        "runs": [j[4] for j in jobs],
        "policies": [j[5] for j in jobs],
        "averages": [],
        "charts": [],
        "meta": [],
    }
    by_label: dict[str, list[list[MetricRow]]] = {}
    for job, rows in zip(jobs, results):
        by_label.setdefault(job[0], []).append(rows)
    means = {}
    for label, runs in by_label.items():
        means[label] = average_rows(runs, label)
        manifest["averages"].append(emit_csv(means[label], out / f"{label}_mean.csv"))

    for metric in METRICS:
        series = []
        for k, (label, runs) in enumerate(by_label.items()):
            color = _PALETTE[k % len(_PALETTE)]
            for run in runs:
                series.append(
                    Series(f"{label} seed {run[0].seed}" if run else label,
                           [r.iteration for r in run], [getattr(r, metric) for r in run],
                           color=color, width=1.0, opacity=0.3, legend=False)
                )
            series.append(
                Series(f"{label} (mean)", [r.iteration for r in means[label]],
                       [getattr(r, metric) for r in means[label]], color=color)
            )
        manifest["charts"].append(
            emit_svg(series, out / "charts" / f"{metric}.svg", title=metric, ylabel=metric)
        )

    config_path = out / "config.json"
    config_path.write_text(
        json.dumps(
            {
                "env": env_config_to_dict(spec.env_cfg),
                "runs": {label: cfg.__dict__ for label, cfg in spec.runs()},
                "seeds": list(spec.seeds),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    manifest["meta"].append(config_path)
    manifest_path = out / "manifest.json"
    manifest["meta"].append(manifest_path)
    manifest_path.write_text(
        json.dumps({k: [os.fspath(p) for p in v] for k, v in manifest.items()}, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest
