"""Plot-ready CSV bundles from run logs, selection logs and evaluation outputs."""

from __future__ import annotations

import csv
import io
from collections import Counter
from pathlib import Path
from typing import Sequence

from .errors import SchemaError
from .evaluation import SessionRow, cdf_rows, read_session_csv, to_csv
from .train import RUN_LOG_COLUMNS, SELECTION_COLUMNS

REPORT_VERSION = 1


def read_table(path: str | Path, columns: Sequence[str]) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != tuple(columns):
        raise SchemaError(f"{path}: columns {reader.fieldnames} != {list(columns)}")
    return list(reader)


def omega_curve(run_log: list[dict], run: str = "") -> list[dict]:
    return [{"run": run, "epoch": int(r["epoch"]), "omega": float(r["omega"]),
             "mean_entropy": float(r["mean_entropy"]), "lambda": float(r["lambda"])} for r in run_log]


def learning_curve(run_log: list[dict], run: str = "") -> list[dict]:
    """Validation points only; epochs without a validation pass are skipped."""
    return [{"run": run, "epoch": int(r["epoch"]), "eval_qoe_lin": float(r["eval_qoe_lin"]),
             "eval_qoe_dnn": float(r["eval_qoe_dnn"]) if r["eval_qoe_dnn"] else ""}
            for r in run_log if r["eval_qoe_lin"] != ""]


def selection_pdf(selection_log: list[dict], run: str = "") -> list[dict]:
    counts = Counter(r["trace_id"] for r in selection_log)
    total = sum(counts.values())
    return [{"run": run, "trace_id": t, "count": counts[t], "frequency": counts[t] / total}
            for t in sorted(counts)]


def scatter(rows: Sequence[SessionRow]) -> list[dict]:
    """Quality against stall ratio, one point per session, keyed by ABR name."""
    ordered = sorted(rows, key=lambda r: (r.abr, r.trace_id))
    return [{"abr": r.abr, "trace_id": r.trace_id, "mean_vmaf": r.mean_vmaf,
             "stall_ratio": r.stall_ratio} for r in ordered]


def build_report(run_logs: dict[str, Path], selection_logs: dict[str, Path],
                 session_csvs: Sequence[Path]) -> dict[str, str]:
    """File name -> CSV text. Inputs are keyed by run name."""
    out: dict[str, str] = {}
    if run_logs:
        omega_rows, curve_rows = [], []
        for name in sorted(run_logs):
            log = read_table(run_logs[name], RUN_LOG_COLUMNS)
            omega_rows += omega_curve(log, name)
            curve_rows += learning_curve(log, name)
        out["omega.csv"] = to_csv(omega_rows, ["run", "epoch", "omega", "mean_entropy", "lambda"])
        out["learning_curve.csv"] = to_csv(curve_rows, ["run", "epoch", "eval_qoe_lin", "eval_qoe_dnn"])
    if selection_logs:
        pdf_rows = []
        for name in sorted(selection_logs):
            pdf_rows += selection_pdf(read_table(selection_logs[name], SELECTION_COLUMNS), name)
        out["selection_pdf.csv"] = to_csv(pdf_rows, ["run", "trace_id", "count", "frequency"])
    if session_csvs:
        rows: list[SessionRow] = []
        for p in session_csvs:
            try:
                text = Path(p).read_text(encoding="utf-8")
            except OSError as exc:
                raise SchemaError(f"cannot read {p}: {exc}") from exc
            rows += read_session_csv(text)
        out["scatter.csv"] = to_csv(scatter(rows), ["abr", "trace_id", "mean_vmaf", "stall_ratio"])
        out["cdf_qoe_lin.csv"] = to_csv(cdf_rows(rows, "qoe_lin"), ["abr", "value", "cdf"])
        out["cdf_qoe_dnn.csv"] = to_csv(cdf_rows(rows, "qoe_dnn"), ["abr", "value", "cdf"])
    return out
