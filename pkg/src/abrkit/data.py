"""Domain types and on-disk formats: traces, manifests, sessions, ratings.

All loaders validate eagerly and raise a typed :mod:`abrkit.errors` exception
on the first violated invariant (the message lists every offending line for
text formats). Returned structures are frozen; numpy arrays are read-only.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DanglingSessionRef,
    DegenerateSplit,
    EmptyQuery,
    MalformedLine,
    MonotonicityViolation,
    NonMonotonicTimestamp,
    NonPositiveBandwidth,
    RangeError,
    SchemaError,
    ScoreOutOfRange,
    ValidationError,
)

log = logging.getLogger(__name__)

REFERENCE_LADDER_MBPS = (0.3, 0.75, 1.2, 1.85, 2.85, 4.3)

SESSIONS_FILE = "sessions.csv"
SCORES_FILE = "scores.csv"
SESSION_COLUMNS = ["session_id", "chunk_index", "vmaf", "bitrate_mbps", "rebuffer_s"]
SCORE_COLUMNS = ["query_id", "session_id", "user_id", "score"]


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _fmt(x: float) -> str:
    # repr is the shortest string that round-trips a float64 exactly
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class VideoManifest:
    chunk_duration: float
    ladder: np.ndarray  # (|A|,) Mbps
    sizes: np.ndarray  # (N, |A|) bytes
    vmaf: np.ndarray  # (N, |A|)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ladder", _frozen(self.ladder))
        object.__setattr__(self, "sizes", _frozen(self.sizes))
        object.__setattr__(self, "vmaf", _frozen(self.vmaf))
        _validate_manifest(self)

    @property
    def n_chunks(self) -> int:
        return self.sizes.shape[0]

    @property
    def n_levels(self) -> int:
        return self.ladder.shape[0]


@dataclass(frozen=True)
class NetworkTrace:
    id: str
    timestamps: np.ndarray  # seconds
    bandwidth: np.ndarray  # Mbps

    def __post_init__(self) -> None:
        object.__setattr__(self, "timestamps", _frozen(self.timestamps))
        object.__setattr__(self, "bandwidth", _frozen(self.bandwidth))
        _validate_trace_arrays(self.timestamps, self.bandwidth)

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.timestamps.tolist(), self.bandwidth.tolist()))

    @property
    def durations(self) -> np.ndarray:
        """Length of each piecewise-constant segment; the last repeats the final gap."""
        gaps = np.diff(self.timestamps)
        return np.append(gaps, gaps[-1])

    @property
    def span(self) -> float:
        return float(self.durations.sum())

    def mean_bandwidth(self) -> float:
        d = self.durations
        return float((d * self.bandwidth).sum() / d.sum())


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    vmaf: np.ndarray
    bitrate: np.ndarray  # Mbps
    rebuffer: np.ndarray  # seconds

    def __post_init__(self) -> None:
        for name in ("vmaf", "bitrate", "rebuffer"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = self.vmaf.shape[0]
        if self.vmaf.ndim != 1 or self.bitrate.shape != (n,) or self.rebuffer.shape != (n,):
            raise SchemaError(f"session {self.session_id}: per-chunk arrays differ in length")
        if n < 1:
            raise SchemaError(f"session {self.session_id}: no chunks")
        if not (np.all(np.isfinite(self.vmaf)) and np.all(np.isfinite(self.bitrate))
                and np.all(np.isfinite(self.rebuffer))):
            raise RangeError(f"session {self.session_id}: non-finite value")
        if np.any(self.vmaf < 0) or np.any(self.vmaf > 100):
            raise RangeError(f"session {self.session_id}: vmaf outside [0,100]")
        if np.any(self.rebuffer < 0):
            raise RangeError(f"session {self.session_id}: negative rebuffer")
        if np.any(self.bitrate <= 0):
            raise RangeError(f"session {self.session_id}: non-positive bitrate")

    def __len__(self) -> int:
        return int(self.vmaf.shape[0])

    def check_ladder(self, manifest: VideoManifest) -> None:
        if not np.all(np.isin(self.bitrate, manifest.ladder)):
            raise RangeError(f"session {self.session_id}: bitrate not on the manifest ladder")


@dataclass(frozen=True)
class RatingDataset:
    queries: Mapping[str, tuple[str, ...]]
    sessions: Mapping[str, SessionRecord]
    scores: Mapping[tuple[str, str], float]  # (user_id, session_id) -> score

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", MappingProxyType(
            {q: tuple(s) for q, s in self.queries.items()}))
        object.__setattr__(self, "sessions", MappingProxyType(dict(self.sessions)))
        object.__setattr__(self, "scores", MappingProxyType(
            {k: float(v) for k, v in self.scores.items()}))
        for (user, sid), score in self.scores.items():
            if sid not in self.sessions:
                raise DanglingSessionRef(f"score by user {user} references unknown session {sid}")
            if not (0.0 <= score <= 100.0):
                raise ScoreOutOfRange(f"score {score} by user {user} on {sid} outside [0,100]")
        for q, members in self.queries.items():
            if len(set(members)) < 2:
                raise EmptyQuery(f"query {q} has fewer than 2 sessions")
            for sid in members:
                if sid not in self.sessions:
                    raise DanglingSessionRef(f"query {q} references unknown session {sid}")

    @property
    def users(self) -> list[str]:
        return sorted({u for u, _ in self.scores})

    def counts(self) -> dict[str, int]:
        return {
            "queries": len(self.queries),
            "sessions": len(self.sessions),
            "users": len(self.users),
            "scores": len(self.scores),
        }

    def user_scores(self) -> dict[str, dict[str, float]]:
        """user -> {session_id: score}."""
        out: dict[str, dict[str, float]] = defaultdict(dict)
        for (user, sid), score in self.scores.items():
            out[user][sid] = score
        return dict(out)


# ---------------------------------------------------------------------------
# Traces


def _validate_trace_arrays(ts: np.ndarray, bw: np.ndarray, path: str | None = None) -> None:
    if ts.ndim != 1 or ts.shape != bw.shape:
        raise SchemaError("timestamps and bandwidth must be parallel 1-d arrays", path=path)
    if ts.shape[0] < 2:
        raise SchemaError("a trace needs at least 2 samples", path=path)
    if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(bw))):
        raise MalformedLine("non-finite value in trace", path=path)
    if ts[0] < 0:
        raise NonMonotonicTimestamp("first timestamp is negative", path=path, line=1)
    bad = np.nonzero(np.diff(ts) <= 0)[0]
    if bad.size:
        raise NonMonotonicTimestamp("timestamps must be strictly increasing", path=path,
                                    line=int(bad[0]) + 2)
    bad = np.nonzero(bw <= 0)[0]
    if bad.size:
        raise NonPositiveBandwidth("bandwidth must be positive", path=path, line=int(bad[0]) + 1)


def parse_trace(text: str, trace_id: str, path: str | None = None) -> NetworkTrace:
    """Parse ``<t_seconds> <mbps>`` lines; ``#`` starts a comment.

    Line numbers in errors refer to physical lines of ``text``.
    """
    ts: list[float] = []
    bw: list[float] = []
    problems: list[tuple[type[ValidationError], int, str]] = []
    prev_t: float | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            t, b = float(parts[0]), float(parts[1])
            if not (np.isfinite(t) and np.isfinite(b)):
                raise ValueError
        except ValueError:
            problems.append((MalformedLine, lineno, f"expected '<seconds> <mbps>', got {raw!r}"))
            continue
        if (prev_t is not None and t <= prev_t) or t < 0:
            problems.append((NonMonotonicTimestamp, lineno, f"timestamp {t} does not increase"))
        if b <= 0:
            problems.append((NonPositiveBandwidth, lineno, f"bandwidth {b} is not positive"))
        prev_t = t
        ts.append(t)
        bw.append(b)
    if problems:
        kind, lineno, msg = problems[0]
        extra = "; ".join(f"line {n}: {m}" for _, n, m in problems[1:6])
        raise kind(msg + (f" (also {extra})" if extra else ""), path=path, line=lineno)
    if len(ts) < 2:
        raise SchemaError("a trace needs at least 2 samples", path=path)
    return NetworkTrace(trace_id, np.array(ts), np.array(bw))


def load_trace(path: str | Path) -> NetworkTrace:
    path = Path(path)
    return parse_trace(path.read_text(encoding="utf-8"), path.stem, str(path))


def dump_trace(trace: NetworkTrace) -> str:
    return "".join(f"{_fmt(t)} {_fmt(b)}\n" for t, b in trace.samples)


def save_trace(trace: NetworkTrace, path: str | Path) -> None:
    Path(path).write_text(dump_trace(trace), encoding="utf-8")


def load_trace_dir(directory: str | Path) -> list[NetworkTrace]:
    """Every ``*.txt``/``*.log`` trace in ``directory``, sorted by id."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix in (".txt", ".log") and p.is_file())
    if not files:
        raise SchemaError("no trace files (*.txt, *.log)", path=str(directory))
    return [load_trace(p) for p in files]


def trace_from_packet_log(lines: Iterable[str], trace_id: str, bin_s: float = 1.0,
                          mtu_bytes: int = 1500) -> NetworkTrace:
    """Convert a packet-delivery log (one millisecond timestamp per line) to a cooked trace.

    Each line marks one ``mtu_bytes`` delivery opportunity; deliveries are
    binned into ``bin_s`` windows. Empty bins get a small floor so the trace
    stays strictly positive.
    """
    stamps = np.array([float(x) for x in (ln.strip() for ln in lines) if x], dtype=np.float64)
    if stamps.size == 0:
        raise SchemaError("packet log is empty")
    seconds = (stamps - stamps[0]) / 1000.0
    n_bins = max(int(np.floor(seconds[-1] / bin_s)) + 1, 2)
    counts = np.bincount(np.minimum((seconds / bin_s).astype(int), n_bins - 1), minlength=n_bins)
    mbps = np.maximum(counts * mtu_bytes * 8 / 1e6 / bin_s, 1e-3)
    return NetworkTrace(trace_id, np.arange(n_bins) * bin_s, mbps)


# ---------------------------------------------------------------------------
# Manifests


def _validate_manifest(m: VideoManifest) -> None:
    if not np.isfinite(m.chunk_duration) or m.chunk_duration <= 0:
        raise RangeError("chunk_duration must be positive")
    if m.ladder.ndim != 1 or m.ladder.shape[0] < 2:
        raise SchemaError("ladder needs at least 2 levels")
    if np.any(np.diff(m.ladder) <= 0) or np.any(m.ladder <= 0):
        raise MonotonicityViolation("ladder must be positive and strictly ascending")
    n_levels = m.ladder.shape[0]
    if m.sizes.ndim != 2 or m.sizes.shape[1] != n_levels or m.sizes.shape[0] < 1:
        raise SchemaError(f"sizes must be [N x {n_levels}]")
    if m.vmaf.shape != m.sizes.shape:
        raise SchemaError("vmaf and sizes shapes differ")
    if not (np.all(np.isfinite(m.sizes)) and np.all(np.isfinite(m.vmaf))):
        raise RangeError("non-finite size or vmaf")
    if np.any(m.sizes <= 0):
        raise RangeError("chunk sizes must be positive")
    bad = np.argwhere((m.vmaf < 0) | (m.vmaf > 100))
    if bad.size:
        c, a = bad[0]
        raise RangeError(f"vmaf[{c}][{a}] = {m.vmaf[c, a]} outside [0,100]")
    bad = np.argwhere(np.diff(m.sizes, axis=1) < 0)
    if bad.size:
        raise MonotonicityViolation(f"sizes decrease with bitrate at chunk {bad[0][0]}")
    bad = np.argwhere(np.diff(m.vmaf, axis=1) < 0)
    if bad.size:
        raise MonotonicityViolation(f"vmaf decreases with bitrate at chunk {bad[0][0]}")


def manifest_from_dict(obj: object, path: str | None = None) -> VideoManifest:
    try:
        if not isinstance(obj, dict):
            raise TypeError("top level must be an object")
        duration = float(obj["chunk_duration_s"])
        ladder = [float(x) for x in obj["ladder_mbps"]]
        chunks = obj["chunks"]
        if not isinstance(chunks, list) or not chunks:
            raise TypeError("chunks must be a nonempty list")
        sizes = [[float(x) for x in c["sizes_bytes"]] for c in chunks]
        vmaf = [[float(x) for x in c["vmaf"]] for c in chunks]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad manifest layout: {exc!r}", path=path) from exc
    if any(len(r) != len(ladder) for r in sizes + vmaf):
        raise SchemaError("every chunk needs one size and one vmaf per ladder level", path=path)
    try:
        return VideoManifest(duration, np.array(ladder), np.array(sizes), np.array(vmaf))
    except ValidationError as exc:
        raise type(exc)(str(exc), path=path) from exc


def manifest_to_dict(m: VideoManifest) -> dict:
    return {
        "chunk_duration_s": float(m.chunk_duration),
        "ladder_mbps": m.ladder.tolist(),
        "chunks": [{"sizes_bytes": [float(s) for s in row_s], "vmaf": [float(v) for v in row_v]}
                   for row_s, row_v in zip(m.sizes.tolist(), m.vmaf.tolist())],
    }


def dump_manifest(m: VideoManifest) -> str:
    return json.dumps(manifest_to_dict(m), indent=1, sort_keys=True) + "\n"


def load_manifest(path: str | Path) -> VideoManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", path=str(path)) from exc
    return manifest_from_dict(obj, str(path))


def save_manifest(m: VideoManifest, path: str | Path) -> None:
    Path(path).write_text(dump_manifest(m), encoding="utf-8")


# ---------------------------------------------------------------------------
# Ratings


def _read_csv(path: Path, columns: list[str]) -> list[dict[str, str]]:
    if not path.is_file():
        raise SchemaError(f"missing {path.name}", path=str(path))
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in columns):
            raise SchemaError(f"expected columns {columns}, got {reader.fieldnames}", path=str(path))
        return list(reader)


def parse_sessions(rows: list[dict[str, str]], path: str | None = None) -> dict[str, SessionRecord]:
    chunks: dict[str, dict[int, tuple[float, float, float]]] = defaultdict(dict)
    for lineno, row in enumerate(rows, start=2):
        try:
            sid = row["session_id"]
            idx = int(row["chunk_index"])
            vals = (float(row["vmaf"]), float(row["bitrate_mbps"]), float(row["rebuffer_s"]))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad session row: {exc}", path=path, line=lineno) from exc
        if not sid:
            raise SchemaError("empty session_id", path=path, line=lineno)
        if idx in chunks[sid]:
            raise SchemaError(f"duplicate chunk {idx} for session {sid}", path=path, line=lineno)
        chunks[sid][idx] = vals
    out = {}
    for sid, by_index in chunks.items():
        order = sorted(by_index)
        if order != list(range(len(order))):
            raise SchemaError(f"session {sid}: chunk indices must be 0..T-1", path=path)
        v, b, r = zip(*(by_index[i] for i in order))
        try:
            out[sid] = SessionRecord(sid, np.array(v), np.array(b), np.array(r))
        except ValidationError as exc:
            raise type(exc)(str(exc), path=path) from exc
    return out


def load_ratings(directory: str | Path) -> RatingDataset:
    directory = Path(directory)
    sessions = parse_sessions(_read_csv(directory / SESSIONS_FILE, SESSION_COLUMNS),
                              str(directory / SESSIONS_FILE))
    score_path = directory / SCORES_FILE
    rows = _read_csv(score_path, SCORE_COLUMNS)
    queries: dict[str, list[str]] = defaultdict(list)
    scores: dict[tuple[str, str], float] = {}
    for lineno, row in enumerate(rows, start=2):
        q, sid, user = row["query_id"], row["session_id"], row["user_id"]
        try:
            score = float(row["score"])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad score {row['score']!r}", path=str(score_path), line=lineno) from exc
        if sid not in sessions:
            raise DanglingSessionRef(f"unknown session {sid!r}", path=str(score_path), line=lineno)
        if not (0.0 <= score <= 100.0):
            raise ScoreOutOfRange(f"score {score} outside [0,100]", path=str(score_path), line=lineno)
        if (user, sid) in scores:
            raise SchemaError(f"duplicate score for user {user} on {sid}", path=str(score_path),
                              line=lineno)
        scores[(user, sid)] = score
        if sid not in queries[q]:
            queries[q].append(sid)
    for q, members in queries.items():
        if len(members) < 2:
            raise EmptyQuery(f"query {q} has fewer than 2 sessions", path=str(score_path))
    ds = RatingDataset(dict(queries), sessions, scores)
    log.info("loaded ratings from %s: %s", directory, ds.counts())
    return ds


def _session_query(ds: RatingDataset) -> dict[str, str]:
    out = {}
    for q in sorted(ds.queries):
        for sid in ds.queries[q]:
            out.setdefault(sid, q)
    return out


def dump_ratings(ds: RatingDataset) -> tuple[str, str]:
    """Canonical (sessions.csv, scores.csv) text."""
    sbuf = io.StringIO()
    w = csv.writer(sbuf, lineterminator="\n")
    w.writerow(SESSION_COLUMNS)
    for sid in sorted(ds.sessions):
        s = ds.sessions[sid]
        for i in range(len(s)):
            w.writerow([sid, i, _fmt(s.vmaf[i]), _fmt(s.bitrate[i]), _fmt(s.rebuffer[i])])
    qbuf = io.StringIO()
    w = csv.writer(qbuf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    membership = _session_query(ds)
    for user, sid in sorted(ds.scores):
        w.writerow([membership.get(sid, ""), sid, user, _fmt(ds.scores[(user, sid)])])
    return sbuf.getvalue(), qbuf.getvalue()


def save_ratings(ds: RatingDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sessions_text, scores_text = dump_ratings(ds)
    (directory / SESSIONS_FILE).write_text(sessions_text, encoding="utf-8")
    (directory / SCORES_FILE).write_text(scores_text, encoding="utf-8")


def subset(ds: RatingDataset, keep: Iterable[str]) -> RatingDataset:
    """Restrict to the given sessions; queries left with < 2 sessions are dropped."""
    keep = set(keep)
    queries = {}
    for q, members in ds.queries.items():
        kept = tuple(s for s in members if s in keep)
        if len(kept) >= 2:
            queries[q] = kept
    return RatingDataset(
        queries,
        {s: rec for s, rec in ds.sessions.items() if s in keep},
        {k: v for k, v in ds.scores.items() if k[1] in keep},
    )


def split_dataset(ds: RatingDataset, train_fraction: float, seed: int
                  ) -> tuple[RatingDataset, RatingDataset]:
    """Session-level random split; every score of a session lands on one side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    ids = sorted(ds.sessions)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    if n_train == 0 or n_train == len(ids):
        raise DegenerateSplit(f"{len(ids)} sessions at fraction {train_fraction} leaves a side empty")
    train_ids = [ids[i] for i in order[:n_train]]
    test_ids = [ids[i] for i in order[n_train:]]
    return subset(ds, train_ids), subset(ds, test_ids)


def count_pairs(ds: RatingDataset) -> int:
    """Number of unordered same-query, same-user session pairs."""
    by_user = ds.user_scores()
    total = 0
    for members in ds.queries.values():
        for rated in by_user.values():
            n = sum(1 for s in members if s in rated)
            total += n * (n - 1) // 2
    return total
