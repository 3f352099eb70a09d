"""Risk histograms with KDE curves, and accuracy comparison tables.

Outputs are plain CSV/JSON so any plotting tool can draw them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .kernel import RiskVector

log = logging.getLogger(__name__)

KDE_POINTS = 200


@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 30
    range_policy: str = "auto"
    range: tuple[float, float] | None = None
    kde_bandwidth: str = "silverman"
    fixed_bandwidth: float | None = None

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.range_policy not in ("auto", "fixed"):
            raise ValueError("range_policy must be 'auto' or 'fixed'")
        if self.range_policy == "fixed" and (self.range is None or not self.range[0] < self.range[1]):
            raise ValueError("fixed range policy needs range=(lo, hi) with lo < hi")
        if self.kde_bandwidth not in ("silverman", "fixed"):
            raise ValueError("kde_bandwidth must be 'silverman' or 'fixed'")
        if self.kde_bandwidth == "fixed" and not (self.fixed_bandwidth or 0) > 0:
            raise ValueError("fixed KDE bandwidth must be positive")


@dataclass
class DomainHistogram:
    domain_id: int
    counts: list[int]
    mean: float
    bandwidth: float
    density: list[float]


@dataclass
class RiskHistogram:
    spec: HistogramSpec
    edges: list[float]
    grid: list[float]
    domains: list[DomainHistogram]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def counts_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain_id", "bin_lo", "bin_hi", "count"])
        for d in self.domains:
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], d.counts):
                w.writerow([d.domain_id, repr(lo), repr(hi), c])
        return buf.getvalue()

    def kde_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain_id", "x", "density"])
        for d in self.domains:
            for x, y in zip(self.grid, d.density):
                w.writerow([d.domain_id, repr(x), repr(y)])
        return buf.getvalue()


def silverman_bandwidth(x: np.ndarray) -> float:
    """1.06 * std * n^(-1/5); degenerate samples fall back to a small width."""
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    if sd > 0:
        return 1.06 * sd * x.size ** (-0.2)
    return 1e-3 * max(1.0, abs(float(np.mean(x))))


def gaussian_kde(samples: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    z = (grid[:, None] - samples[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (samples.size * bandwidth * math.sqrt(2 * math.pi))


def _values(r) -> np.ndarray:
    if isinstance(r, RiskVector):
        r = r.risks
    if hasattr(r, "data") and not isinstance(r, np.ndarray):
        r = r.data
    return np.asarray(r, dtype=np.float64).ravel()


def risk_histogram(risks: Sequence, spec: HistogramSpec = HistogramSpec(),
                   domain_ids: Sequence[int] | None = None) -> RiskHistogram:
    """Shared-edge histograms, KDE curves and means, one per domain."""
    samples = [_values(r) for r in risks]
    if not samples or any(s.size == 0 for s in samples):
        raise ValueError("every domain needs at least one risk value")
    if domain_ids is None:
        domain_ids = [r.domain_id if isinstance(r, RiskVector) else i for i, r in enumerate(risks)]

    if spec.range_policy == "fixed":
        lo, hi = spec.range
    else:
        lo = min(float(s.min()) for s in samples)
        hi = max(float(s.max()) for s in samples)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, spec.bins + 1)

    widths = [spec.fixed_bandwidth if spec.kde_bandwidth == "fixed" else silverman_bandwidth(s)
              for s in samples]
    pad = 3.0 * max(widths)
    grid = np.linspace(lo - pad, hi + pad, KDE_POINTS)

    domains = []
    for did, s, h in zip(domain_ids, samples, widths):
        counts, _ = np.histogram(np.clip(s, lo, hi), bins=edges)
        domains.append(DomainHistogram(int(did), counts.tolist(), float(s.mean()), float(h),
                                       gaussian_kde(s, grid, h).tolist()))
    return RiskHistogram(spec, edges.tolist(), grid.tolist(), domains)


@dataclass
class CompareRow:
    objective: str
    runs: int
    mean: float
    std: float

    def render(self) -> str:
        return f"{self.mean:.1f} ± {self.std:.1f}"


def _run_accuracy(run) -> tuple[str, float]:
    if isinstance(run, tuple):
        return run[0], float(run[1])
    return run.objective, float(run.test_accuracy)


def compare_table(runs: Sequence, objectives: Sequence[str] | None = None) -> list[CompareRow]:
    """Mean ± sample std of test accuracy (percent) per objective.

    ``runs`` holds :class:`TrainMetrics` or ``(objective, accuracy)`` pairs.
    Objectives requested via ``objectives`` but without runs are skipped
    with a warning.
    """
    groups: dict[str, list[float]] = {}
    for run in runs:
        name, acc = _run_accuracy(run)
        groups.setdefault(name, []).append(100.0 * acc)
    order = list(objectives) if objectives is not None else list(groups)
    rows = []
    for name in order:
        accs = groups.get(name)
        if not accs:
            log.warning("no runs for objective %s; row omitted", name)
            continue
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        rows.append(CompareRow(name, len(accs), round(float(np.mean(accs)), 1), round(std, 1)))
    return rows


def table_csv(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["objective", "runs", "mean", "std"])
    for r in rows:
        w.writerow([r.objective, r.runs, f"{r.mean:.1f}", f"{r.std:.1f}"])
    return buf.getvalue()


def table_text(rows: Sequence[CompareRow]) -> str:
    width = max([len("objective")] + [len(r.objective) for r in rows])
    lines = [f"{'objective':<{width}}  runs  test acc (%)"]
    for r in rows:
        lines.append(f"{r.objective:<{width}}  {r.runs:>4}  {r.render()}")
    return "\n".join(lines) + "\n"
