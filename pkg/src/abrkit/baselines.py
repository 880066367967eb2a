"""Classical bitrate selectors: harmonic-mean rate rule, buffer map, and RobustMPC."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import VideoManifest
from .qoe import LinWeights
from .sim import BITS_PER_BYTE, MEGA, PlayerView, SimConfig, StepOutcome


def harmonic_mean(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(len(v) / np.sum(1.0 / v))


def rate_based_select(throughput_hist: Sequence[float], manifest: VideoManifest,
                      chunk: int | None = None, window: int = 5) -> int:
    """Highest level whose ladder rate fits under the harmonic mean of recent throughput."""
    recent = [t for t in throughput_hist[-window:] if t > 0]
    if not recent:
        return 0
    predicted = harmonic_mean(recent)
    fits = np.nonzero(manifest.ladder <= predicted)[0]
    return int(fits[-1]) if fits.size else 0


@dataclass(frozen=True)
class BbaConfig:
    reservoir: float = 5.0
    cushion: float = 30.0

    def __post_init__(self) -> None:
        if self.cushion <= 0 or self.reservoir < 0:
            raise ValueError("need cushion > 0 and reservoir >= 0")


def bba_select(buffer: float, cfg: BbaConfig, manifest: VideoManifest) -> int:
    top = manifest.n_levels - 1
    if buffer < cfg.reservoir:
        return 0
    if buffer >= cfg.reservoir + cfg.cushion:
        return top
    frac = (buffer - cfg.reservoir) / cfg.cushion
    return int(np.floor(frac * top))


@dataclass(frozen=True)
class MpcConfig:
    weights: LinWeights
    horizon: int = 5
    throughput_window: int = 5
    error_window: int = 5

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.throughput_window < 1 or self.error_window < 1:
            raise ValueError("horizon and windows must be >= 1")


_SEQUENCES: dict[tuple[int, int], np.ndarray] = {}


def all_sequences(n_levels: int, horizon: int) -> np.ndarray:
    key = (n_levels, horizon)
    if key not in _SEQUENCES:
        _SEQUENCES[key] = np.array(list(itertools.product(range(n_levels), repeat=horizon)),
                                   dtype=np.int64).reshape(-1, horizon)
    return _SEQUENCES[key]


def plan_scores(manifest: VideoManifest, chunk: int, buffer: float, last_vmaf: float | None,
                throughput: float, weights: LinWeights, horizon: int, sim: SimConfig
                ) -> tuple[np.ndarray, np.ndarray]:
    """Linear QoE of every level sequence over the next ``horizon`` chunks.

    The buffer follows the simulator's arithmetic at a constant predicted
    ``throughput`` (Mbps). Returns (sequences, scores).
    """
    h = min(horizon, manifest.n_chunks - chunk)
    seqs = all_sequences(manifest.n_levels, h)
    buf = np.full(len(seqs), float(buffer))
    score = np.zeros(len(seqs))
    prev = None if last_vmaf is None else np.full(len(seqs), float(last_vmaf))
    for step in range(h):
        a = seqs[:, step]
        size = manifest.sizes[chunk + step, a]
        q = manifest.vmaf[chunk + step, a]
        download = sim.per_chunk_rtt + size * BITS_PER_BYTE / MEGA / throughput
        rebuf = np.maximum(download - buf, 0.0)
        buf = np.minimum(np.maximum(buf - download, 0.0) + manifest.chunk_duration, sim.buffer_cap)
        score += weights.alpha_v * q - weights.beta_v * rebuf
        if prev is not None:
            dq = q - prev
            score -= weights.gamma_v * np.maximum(dq, 0.0) + weights.delta_v * np.maximum(-dq, 0.0)
        prev = q
    return seqs, score


class RateBased:
    name = "rate"

    def __init__(self, window: int = 5) -> None:
        self.window = window

    def __call__(self, view: PlayerView) -> int:
        return rate_based_select([o.throughput for o in view.history], view.manifest,
                                 view.state.chunk_index, self.window)


class BufferBased:
    name = "bba"

    def __init__(self, cfg: BbaConfig = BbaConfig()) -> None:
        self.cfg = cfg

    def __call__(self, view: PlayerView) -> int:
        return bba_select(view.state.buffer, self.cfg, view.manifest)


class RobustMpc:
    """Keeps the per-session prediction-error history; the rollout calls ``observe``."""

    name = "mpc"

    def __init__(self, cfg: MpcConfig) -> None:
        self.cfg = cfg
        self.errors: list[float] = []
        self._pending: float | None = None

    def reset(self) -> None:
        self.errors = []
        self._pending = None

    def robust_throughput(self, throughput_hist: Sequence[float]) -> float | None:
        recent = [t for t in throughput_hist[-self.cfg.throughput_window:] if t > 0]
        if not recent:
            return None
        max_err = max(self.errors[-self.cfg.error_window:], default=0.0)
        return harmonic_mean(recent) / (1.0 + max_err)

    def decide(self, manifest: VideoManifest, sim: SimConfig, chunk: int, buffer: float,
               last_vmaf: float | None, throughput_hist: Sequence[float]) -> int:
        predicted = self.robust_throughput(throughput_hist)
        if predicted is None:
            self._pending = None
            return 0
        recent = [t for t in throughput_hist[-self.cfg.throughput_window:] if t > 0]
        self._pending = harmonic_mean(recent)
        seqs, score = plan_scores(manifest, chunk, buffer, last_vmaf, predicted, self.cfg.weights,
                                  self.cfg.horizon, sim)
        # first maximum in enumeration order, i.e. lexicographically smallest sequence
        return int(seqs[int(np.argmax(score)), 0])

    def __call__(self, view: PlayerView) -> int:
        hist = view.history
        last_vmaf = hist[-1].chunk_vmaf if hist else None
        return self.decide(view.manifest, view.cfg, view.state.chunk_index, view.state.buffer,
                           last_vmaf, [o.throughput for o in hist])

    def observe(self, outcome: StepOutcome) -> None:
        if self._pending is not None and outcome.throughput > 0:
            self.errors.append(abs(self._pending - outcome.throughput) / outcome.throughput)
        self._pending = None


class FixedLevel:
    name = "fixed"

    def __init__(self, level: int) -> None:
        self.level = level

    def __call__(self, view: PlayerView) -> int:
        return self.level
