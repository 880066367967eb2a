"""Synthetic stand-ins for the external corpora: traces, manifests and raters.

The rater model is the ground truth for rank-recovery experiments. Every
user applies their own strictly increasing transform to one shared latent
QoE, so within-user orderings are exact while absolute scales disagree.
Users also rate only part of each query, which biases per-session means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import REFERENCE_LADDER_MBPS, NetworkTrace, RatingDataset, SessionRecord, VideoManifest
from .qoe import WINDOW, LinWeights, qoe_lin

TRUE_WEIGHTS = LinWeights(1.0, 25.0, 1.0, 2.0)


def vmaf_curve(bitrate_mbps: np.ndarray, complexity: float) -> np.ndarray:
    """Concave quality-vs-rate curve; harder content (larger complexity) scores lower."""
    return 100.0 * (1.0 - np.exp(-np.asarray(bitrate_mbps) / (1.1 * complexity)))


# ---------------------------------------------------------------------------
# Traces


def synth_trace(trace_id: str, rng: np.random.Generator, mean_mbps: float,
                duration_s: int = 600, hold_s: float = 20.0, spread: float = 0.6,
                jitter: float = 0.15) -> NetworkTrace:
    """Regime-switching bandwidth around ``mean_mbps`` with per-second log-normal jitter."""
    bw = np.empty(duration_s)
    t = 0
    while t < duration_s:
        hold = max(1, int(rng.geometric(1.0 / hold_s)))
        level = mean_mbps * np.exp(rng.uniform(-spread, spread))
        bw[t:t + hold] = level
        t += hold
    bw *= np.exp(rng.normal(0.0, jitter, duration_s))
    return NetworkTrace(trace_id, np.arange(duration_s, dtype=np.float64), np.clip(bw, 0.05, 100.0))


def synth_trace_pool(n: int, seed: int, low_mbps: float = 0.6, high_mbps: float = 5.0,
                     prefix: str = "trace", duration_s: int = 600) -> list[NetworkTrace]:
    """``n`` traces whose mean rates are log-spaced over [low, high] with random jitter."""
    rng = np.random.default_rng(seed)
    means = np.exp(np.linspace(np.log(low_mbps), np.log(high_mbps), n))
    means *= np.exp(rng.uniform(-0.1, 0.1, n))
    return [synth_trace(f"{prefix}_{i:03d}", rng, float(m), duration_s) for i, m in enumerate(means)]


def cliff_trace(trace_id: str, high_mbps: float = 4.5, low_mbps: float = 0.35,
                high_s: int = 60, duration_s: int = 400) -> NetworkTrace:
    """Steady high rate that collapses at ``high_s``: throughput history stops predicting."""
    bw = np.where(np.arange(duration_s) < high_s, high_mbps, low_mbps).astype(np.float64)
    return NetworkTrace(trace_id, np.arange(duration_s, dtype=np.float64), bw)


# ---------------------------------------------------------------------------
# Manifests


def synth_manifest(seed: int, n_chunks: int = 48, ladder=REFERENCE_LADDER_MBPS,
                   chunk_duration: float = 4.0) -> VideoManifest:
    rng = np.random.default_rng(seed)
    ladder = np.asarray(ladder, dtype=np.float64)
    complexity = rng.uniform(0.6, 1.4) * np.exp(rng.normal(0.0, 0.15, n_chunks))
    size_factor = np.exp(rng.normal(0.0, 0.1, n_chunks))
    sizes = np.round(np.outer(size_factor, ladder) * chunk_duration * 1e6 / 8)
    vmaf = np.stack([vmaf_curve(ladder, c) for c in complexity])
    return VideoManifest(chunk_duration, ladder, sizes, np.round(vmaf, 3))


# ---------------------------------------------------------------------------
# Ratings


@dataclass(frozen=True)
class SyntheticRatings:
    dataset: RatingDataset
    latent: dict[str, float]  # session_id -> shared latent QoE
    weights: LinWeights


def synth_session(session_id: str, rng: np.random.Generator, complexity: float,
                  length: int = WINDOW, ladder=REFERENCE_LADDER_MBPS) -> SessionRecord:
    ladder = np.asarray(ladder)
    levels = np.empty(length, dtype=np.int64)
    levels[0] = rng.integers(len(ladder))
    for t in range(1, length):
        step = rng.choice([-2, -1, 0, 0, 0, 1, 2]) if rng.random() < 0.6 else 0
        levels[t] = np.clip(levels[t - 1] + step, 0, len(ladder) - 1)
    bitrate = ladder[levels]
    vmaf = np.clip(vmaf_curve(bitrate, complexity) + rng.normal(0.0, 2.0, length), 0.0, 100.0)
    stall_p = rng.uniform(0.0, 0.35)
    stalls = rng.random(length) < stall_p
    rebuffer = np.where(stalls, np.minimum(rng.exponential(2.0, length), 8.0), 0.0)
    return SessionRecord(session_id, np.round(vmaf, 3), bitrate, np.round(rebuffer, 3))


def _transform(kind: int, params: tuple[float, float], z: np.ndarray) -> np.ndarray:
    """Strictly increasing maps of a standardized latent into (0, 100)."""
    c, s = params
    if kind == 0:  # logistic with personal midpoint and slope
        return 100.0 / (1.0 + np.exp(-np.clip((z - c) / s, -30, 30)))
    if kind == 1:  # compressed band: a harsh or lenient rater using a narrow range
        mid = 50.0 + 29.0 * np.tanh(c)
        return mid + (20.0 * s / 1.2) * np.tanh(z / 1.5)
    # convex/concave power curve on the latent's rank-preserving squash
    u = 1.0 / (1.0 + np.exp(-z))
    return 100.0 * u ** np.exp(c)


def synth_ratings(seed: int, n_queries: int = 12, sessions_per_query: int = 50,
                  n_users: int = 16, coverage: float = 0.6, length: int = WINDOW,
                  weights: LinWeights = TRUE_WEIGHTS) -> SyntheticRatings:
    """Queries of sessions rated by heterogeneous users through private monotone transforms."""
    rng = np.random.default_rng(seed)
    sessions: dict[str, SessionRecord] = {}
    queries: dict[str, list[str]] = {}
    for q in range(n_queries):
        complexity = rng.uniform(0.6, 1.4)
        qid = f"q{q:03d}"
        queries[qid] = []
        for i in range(sessions_per_query):
            sid = f"{qid}_s{i:03d}"
            sessions[sid] = synth_session(sid, rng, complexity, length)
            queries[qid].append(sid)
    latent = {sid: qoe_lin(s, weights) for sid, s in sessions.items()}
    vals = np.array(list(latent.values()))
    mu, sd = vals.mean(), vals.std() or 1.0
    users = []
    for u in range(n_users):
        kind = u % 3
        params = (float(rng.normal(0.0, 0.8)), float(rng.uniform(0.3, 1.2)))
        users.append((f"u{u:02d}", kind, params))
    scores: dict[tuple[str, str], float] = {}
    for qid, members in queries.items():
        for uid, kind, params in users:
            rated = [s for s in members if rng.random() < coverage]
            if len(rated) < 2:
                rated = list(rng.choice(members, size=2, replace=False))
            z = (np.array([latent[s] for s in rated]) - mu) / sd
            for s, y in zip(rated, _transform(kind, params, z).tolist()):
                scores[(uid, s)] = float(y)
    ds = RatingDataset({q: tuple(m) for q, m in queries.items()}, sessions, scores)
    return SyntheticRatings(ds, latent, weights)
