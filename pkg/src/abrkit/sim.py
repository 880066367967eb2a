"""Chunk-level virtual player driven by a bandwidth trace.

The trace is piecewise constant: sample ``i`` holds its bandwidth from its own
timestamp until the next one, and the final sample lasts as long as the gap
before it. Time spent on RTT, transfers and idling all advance the trace
cursor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import NetworkTrace, SessionRecord, VideoManifest
from .errors import EpisodeFinished, OffsetOutOfRange, PolicyError

BITS_PER_BYTE = 8
MEGA = 1e6


@dataclass(frozen=True)
class SimConfig:
    buffer_cap: float = 60.0
    per_chunk_rtt: float = 0.08
    drain_granularity: float = 0.5
    trace_wraps: bool = True

    def __post_init__(self) -> None:
        if self.per_chunk_rtt < 0:
            raise ValueError("per_chunk_rtt must be >= 0")
        if self.drain_granularity <= 0:
            raise ValueError("drain_granularity must be > 0")
        if self.buffer_cap <= 0:
            raise ValueError("buffer_cap must be > 0")


@dataclass(frozen=True)
class SimState:
    buffer: float
    chunk_index: int
    cursor: tuple[int, float]  # (sample index, seconds into that sample)
    wall_clock: float
    last_action: int | None = None


@dataclass(frozen=True)
class StepOutcome:
    download_time: float
    rebuffer: float
    sleep_time: float
    chunk_vmaf: float
    chunk_bitrate: float
    vmaf_change: float
    done: bool
    chunk_index: int = 0
    action: int = 0
    chunk_size: float = 0.0  # bytes
    buffer_before: float = 0.0
    buffer: float = 0.0  # after the step, including idling

    @property
    def throughput(self) -> float:
        """Delivered rate in Mbps (size over the whole download time)."""
        if self.download_time <= 0:
            return 0.0
        return self.chunk_size * BITS_PER_BYTE / MEGA / self.download_time


class Simulator:
    """Holds read-only content, channel and config; ``step`` never mutates."""

    def __init__(self, manifest: VideoManifest, trace: NetworkTrace, cfg: SimConfig | None = None
                 ) -> None:
        self.manifest = manifest
        self.trace = trace
        self.cfg = cfg or SimConfig()
        if self.cfg.buffer_cap <= manifest.chunk_duration:
            raise ValueError("buffer_cap must exceed the chunk duration")
        self._bw = trace.bandwidth.tolist()
        self._dur = trace.durations.tolist()
        self._n = len(self._bw)
        self._span = float(sum(self._dur))

    # -- trace cursor arithmetic -------------------------------------------------

    def _next_segment(self, idx: int) -> int:
        idx += 1
        if idx == self._n:
            return 0 if self.cfg.trace_wraps else self._n - 1
        return idx

    def _seg_len(self, idx: int) -> float:
        if not self.cfg.trace_wraps and idx == self._n - 1:
            return float("inf")  # the last rate persists once the trace is exhausted
        return self._dur[idx]

    def advance(self, cursor: tuple[int, float], seconds: float) -> tuple[int, float]:
        idx, off = cursor
        if self.cfg.trace_wraps and seconds >= self._span:
            seconds %= self._span
        while True:
            left = self._seg_len(idx) - off
            if seconds < left:
                return idx, off + seconds
            seconds -= left
            idx, off = self._next_segment(idx), 0.0

    def transfer(self, cursor: tuple[int, float], megabits: float) -> tuple[tuple[int, float], float]:
        """Move ``megabits`` through the channel; returns (new cursor, elapsed seconds)."""
        idx, off = cursor
        elapsed = 0.0
        while True:
            bw = self._bw[idx]
            left = self._seg_len(idx) - off
            capacity = bw * left
            if megabits <= capacity:
                dt = megabits / bw
                return (idx, off + dt), elapsed + dt
            megabits -= capacity
            elapsed += left
            idx, off = self._next_segment(idx), 0.0

    # -- episode -----------------------------------------------------------------

    def reset(self, start_offset: float = 0.0) -> SimState:
        if not self.cfg.trace_wraps and not (0.0 <= start_offset <= self._span):
            raise OffsetOutOfRange(f"offset {start_offset} outside trace span [0, {self._span}]")
        if self.cfg.trace_wraps:
            start_offset %= self._span
        cursor = self.advance((0, 0.0), start_offset)
        return SimState(buffer=0.0, chunk_index=0, cursor=cursor, wall_clock=0.0)

    def step(self, state: SimState, action: int) -> tuple[SimState, StepOutcome]:
        m = self.manifest
        if state.chunk_index >= m.n_chunks:
            raise EpisodeFinished(f"all {m.n_chunks} chunks already delivered")
        if not 0 <= action < m.n_levels:
            raise ValueError(f"action {action} outside [0, {m.n_levels})")
        cfg = self.cfg
        size = float(m.sizes[state.chunk_index, action])
        cursor = self.advance(state.cursor, cfg.per_chunk_rtt)
        cursor, transfer_time = self.transfer(cursor, size * BITS_PER_BYTE / MEGA)
        download = cfg.per_chunk_rtt + transfer_time
        rebuffer = max(0.0, download - state.buffer)
        buffer = max(state.buffer - download, 0.0) + m.chunk_duration
        sleep = 0.0
        if buffer > cfg.buffer_cap:
            sleep = buffer - cfg.buffer_cap
            buffer = cfg.buffer_cap
            cursor = self.advance(cursor, sleep)
        vmaf = float(m.vmaf[state.chunk_index, action])
        if state.last_action is None:
            change = 0.0
        else:
            change = vmaf - float(m.vmaf[state.chunk_index - 1, state.last_action])
        nxt = SimState(
            buffer=buffer,
            chunk_index=state.chunk_index + 1,
            cursor=cursor,
            wall_clock=state.wall_clock + download + sleep,
            last_action=action,
        )
        out = StepOutcome(
            download_time=download,
            rebuffer=rebuffer,
            sleep_time=sleep,
            chunk_vmaf=vmaf,
            chunk_bitrate=float(m.ladder[action]),
            vmaf_change=change,
            done=nxt.chunk_index == m.n_chunks,
            chunk_index=state.chunk_index,
            action=action,
            chunk_size=size,
            buffer_before=state.buffer,
            buffer=buffer,
        )
        return nxt, out


def reset(manifest: VideoManifest, trace: NetworkTrace, cfg: SimConfig,
          start_offset: float = 0.0) -> tuple[Simulator, SimState]:
    sim = Simulator(manifest, trace, cfg)
    return sim, sim.reset(start_offset)


# ---------------------------------------------------------------------------
# Rollouts


@dataclass(frozen=True)
class PlayerView:
    """What a bitrate selector sees before choosing the next chunk's level."""

    manifest: VideoManifest
    cfg: SimConfig
    state: SimState
    history: Sequence[StepOutcome]


class Policy(Protocol):
    def __call__(self, view: PlayerView) -> int: ...


@dataclass
class Rollout:
    session: SessionRecord
    outcomes: list[StepOutcome]
    final_state: SimState
    trace_id: str = ""

    @property
    def total_rebuffer(self) -> float:
        return float(sum(o.rebuffer for o in self.outcomes))

    @property
    def wall_clock(self) -> float:
        return self.final_state.wall_clock


def session_from_outcomes(session_id: str, outcomes: Sequence[StepOutcome]) -> SessionRecord:
    return SessionRecord(
        session_id,
        np.array([o.chunk_vmaf for o in outcomes]),
        np.array([o.chunk_bitrate for o in outcomes]),
        np.array([o.rebuffer for o in outcomes]),
    )


def rollout(policy: Callable[[PlayerView], int], manifest: VideoManifest, trace: NetworkTrace,
            cfg: SimConfig | None = None, start_offset: float = 0.0,
            session_id: str | None = None) -> Rollout:
    sim = Simulator(manifest, trace, cfg)
    state = sim.reset(start_offset)
    if hasattr(policy, "reset"):
        policy.reset()
    outcomes: list[StepOutcome] = []
    while state.chunk_index < manifest.n_chunks:
        view = PlayerView(manifest, sim.cfg, state, outcomes)
        try:
            action = int(policy(view))
        except Exception as exc:  # surfaced with the chunk it broke on
            raise PolicyError(state.chunk_index, exc) from exc
        if not 0 <= action < manifest.n_levels:
            raise PolicyError(state.chunk_index, ValueError(f"action {action} outside ladder"))
        state, out = sim.step(state, action)
        outcomes.append(out)
        if hasattr(policy, "observe"):
            policy.observe(out)
    sid = session_id or trace.id
    return Rollout(session_from_outcomes(sid, outcomes), outcomes, state, trace.id)


def buffer_samples(outcomes: Sequence[StepOutcome], chunk_duration: float, granularity: float
                   ) -> np.ndarray:
    """Buffer level sampled every ``granularity`` seconds of wall clock.

    Within a download the buffer drains at playback speed (floored at zero),
    jumps by one chunk on arrival, then drains to the cap while idling.
    """
    pieces: list[tuple[float, float, float, float]] = []  # (t0, t1, level at t0, slope)
    t = 0.0
    for o in outcomes:
        b0 = o.buffer_before
        empty_at = min(b0, o.download_time)
        pieces.append((t, t + empty_at, b0, -1.0))
        if o.download_time > empty_at:
            pieces.append((t + empty_at, t + o.download_time, 0.0, 0.0))
        t += o.download_time
        if o.sleep_time > 0:
            pieces.append((t, t + o.sleep_time, o.buffer + o.sleep_time, -1.0))
            t += o.sleep_time
    if not pieces or t <= 0:
        return np.zeros(0)
    grid = np.arange(0.0, t, granularity)
    starts = np.array([p[0] for p in pieces])
    which = np.searchsorted(starts, grid, side="right") - 1
    out = np.empty_like(grid)
    for k, (g, w) in enumerate(zip(grid, which)):
        t0, _, level, slope = pieces[w]
        out[k] = level + slope * (g - t0)
    return np.maximum(out, 0.0)


def dump_outcomes_jsonl(outcomes: Sequence[StepOutcome], **tags) -> str:
    lines = []
    for o in outcomes:
        row = dict(tags)
        row.update(asdict(o))
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def load_outcomes_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
