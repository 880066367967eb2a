"""Trace-driven evaluation of bitrate selectors: per-session metrics, aggregates, CDFs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import NetworkTrace, VideoManifest
from .errors import SchemaError
from .qoe import DnnScorer, LinWeights, all_window_features, qoe_lin
from .sim import Rollout, SimConfig, buffer_samples, rollout

Z95 = 1.959963984540054
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SessionRow:
    abr: str
    trace_id: str
    mean_vmaf: float
    stall_ratio: float  # percent of wall clock spent rebuffering
    mean_abs_vmaf_change: float
    mean_buffer: float
    qoe_lin: float
    qoe_dnn: float
    rebuffer: float
    wall_clock: float


def session_qoe_dnn(r: Rollout, scorer: DnnScorer | None) -> float:
    """Mean learned score over every trailing window of the session."""
    if scorer is None:
        return float("nan")
    return float(np.mean(scorer.model(all_window_features(r.session, scorer.cfg))[:, 0]))


def session_row(abr: str, r: Rollout, manifest: VideoManifest, sim_cfg: SimConfig,
                w_lin: LinWeights, scorer: DnnScorer | None) -> SessionRow:
    s = r.session
    wall = r.wall_clock
    samples = buffer_samples(r.outcomes, manifest.chunk_duration, sim_cfg.drain_granularity)
    return SessionRow(
        abr=abr,
        trace_id=r.trace_id,
        mean_vmaf=float(s.vmaf.mean()),
        stall_ratio=100.0 * r.total_rebuffer / wall if wall > 0 else 0.0,
        mean_abs_vmaf_change=float(np.abs(np.diff(s.vmaf)).mean()) if len(s) > 1 else 0.0,
        mean_buffer=float(samples.mean()) if samples.size else 0.0,
        qoe_lin=qoe_lin(s, w_lin),
        qoe_dnn=session_qoe_dnn(r, scorer),
        rebuffer=r.total_rebuffer,
        wall_clock=wall,
    )


def evaluate(abr: str, make_policy: Callable[[], object], traces: Sequence[NetworkTrace],
             manifest: VideoManifest, sim_cfg: SimConfig, w_lin: LinWeights,
             scorer: DnnScorer | None = None) -> list[SessionRow]:
    """One session per trace, each starting at the trace origin with a fresh policy."""
    rows = []
    for tr in traces:
        r = rollout(make_policy(), manifest, tr, sim_cfg)
        rows.append(session_row(abr, r, manifest, sim_cfg, w_lin, scorer))
    return rows


METRICS = ("mean_vmaf", "stall_ratio", "mean_abs_vmaf_change", "mean_buffer", "qoe_lin", "qoe_dnn")


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% half-width under the normal approximation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


def aggregate(rows: Iterable[SessionRow]) -> list[dict]:
    by_abr: dict[str, list[SessionRow]] = {}
    for r in rows:
        by_abr.setdefault(r.abr, []).append(r)
    out = []
    for abr in sorted(by_abr):
        group = by_abr[abr]
        row: dict = {"abr": abr, "n": len(group)}
        for m in METRICS:
            mean, half = mean_ci([getattr(g, m) for g in group])
            row[m] = mean
            row[m + "_ci95"] = half
        out.append(row)
    return out


def cdf(values: Sequence[float]) -> list[tuple[float, float]]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    return [(float(x), (i + 1) / n) for i, x in enumerate(v)]


def cdf_rows(rows: Iterable[SessionRow], metric: str) -> list[dict]:
    by_abr: dict[str, list[float]] = {}
    for r in rows:
        by_abr.setdefault(r.abr, []).append(getattr(r, metric))
    return [{"abr": abr, "value": x, "cdf": p} for abr in sorted(by_abr) for x, p in cdf(by_abr[abr])]


def fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def to_csv(rows: Sequence[dict] | Sequence[SessionRow], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if rows and not isinstance(rows[0], dict):
        columns = [f.name for f in fields(rows[0])]
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(x) for x in astuple(r)])
        return buf.getvalue()
    if columns is None:
        columns = list(rows[0]) if rows else []
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def session_columns() -> list[str]:
    return [f.name for f in fields(SessionRow)]


def read_session_csv(text: str) -> list[SessionRow]:
    reader = csv.DictReader(io.StringIO(text))
    cols = session_columns()
    if reader.fieldnames != cols:
        raise SchemaError(f"session CSV columns {reader.fieldnames} != {cols}")
    out = []
    for line in reader:
        try:
            out.append(SessionRow(line["abr"], line["trace_id"],
                                  *(float(line[c]) for c in cols[2:])))
        except ValueError as exc:
            raise SchemaError(f"bad session row {line}: {exc}") from exc
    return out
