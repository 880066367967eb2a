import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abrkit.data import NetworkTrace, VideoManifest
from abrkit.errors import EpisodeFinished, OffsetOutOfRange, PolicyError
from abrkit.sim import (SimConfig, Simulator, buffer_samples, dump_outcomes_jsonl,
                        load_outcomes_jsonl, reset, rollout)

from conftest import constant_trace, flat_manifest
from oracles import player_steps

NO_RTT = SimConfig(per_chunk_rtt=0.0)


def test_reset_is_empty_and_deterministic():
    m, tr = flat_manifest(), constant_trace(1.0)
    _, s1 = reset(m, tr, SimConfig(), 0.0)
    _, s2 = reset(m, tr, SimConfig(), 0.0)
    assert s1 == s2
    assert (s1.buffer, s1.chunk_index, s1.wall_clock) == (0.0, 0, 0.0)


def test_reset_mid_sample_interpolates_cursor():
    tr = NetworkTrace("t", np.array([0.0, 2.0, 5.0]), np.array([1.0, 2.0, 3.0]))
    _, s = reset(flat_manifest(), tr, SimConfig(), 3.5)
    assert s.cursor == (1, 1.5)


def test_offset_outside_span_without_wrap():
    with pytest.raises(OffsetOutOfRange):
        reset(flat_manifest(), constant_trace(1.0, 10), SimConfig(trace_wraps=False), 25.0)


def test_four_megabit_chunk_on_one_mbps():
    m = flat_manifest(megabits=(4.0, 8.0, 16.0))
    sim = Simulator(m, constant_trace(1.0), NO_RTT)
    s = sim.reset()
    s = type(s)(10.0, 0, s.cursor, 0.0)
    s2, out = sim.step(s, 0)
    assert out.download_time == pytest.approx(4.0)
    assert out.rebuffer == 0.0
    assert s2.buffer == pytest.approx(10.0)


def test_four_megabit_chunk_with_two_second_buffer():
    m = flat_manifest(megabits=(4.0, 8.0, 16.0))
    sim = Simulator(m, constant_trace(1.0), NO_RTT)
    s = type(sim.reset())(2.0, 0, (0, 0.0), 0.0)
    s2, out = sim.step(s, 0)
    assert out.rebuffer == pytest.approx(2.0)
    assert s2.buffer == pytest.approx(4.0)


def test_tiny_chunk_downloads_instantly():
    m = flat_manifest(megabits=(1e-12, 1.0, 2.0))
    _, out = Simulator(m, constant_trace(5.0), NO_RTT).step(reset(m, constant_trace(5.0), NO_RTT)[1], 0)
    assert out.download_time == pytest.approx(0.0, abs=1e-12)
    assert out.rebuffer == pytest.approx(0.0, abs=1e-12)


def test_first_chunk_has_zero_vmaf_change_then_differences():
    m = flat_manifest()
    sim = Simulator(m, constant_trace(50.0))
    s = sim.reset()
    s, o1 = sim.step(s, 0)
    s, o2 = sim.step(s, 2)
    assert o1.vmaf_change == 0.0
    assert o2.vmaf_change == pytest.approx(m.vmaf[1, 2] - m.vmaf[0, 0])


def test_step_after_last_chunk():
    m = flat_manifest(n_chunks=1)
    sim = Simulator(m, constant_trace(5.0))
    s, out = sim.step(sim.reset(), 0)
    assert out.done
    with pytest.raises(EpisodeFinished):
        sim.step(s, 0)


def test_sleep_advances_trace_time():
    # a fast first segment fills the buffer; the idle time must be spent on the channel
    m = flat_manifest(n_chunks=20, megabits=(1.0, 2.0, 4.0))
    tr = NetworkTrace("t", np.array([0.0, 30.0, 1000.0]), np.array([100.0, 0.5, 0.5]))
    cfg = SimConfig(buffer_cap=10.0, per_chunk_rtt=0.0, trace_wraps=False)
    r = rollout(lambda v: 0, m, tr, cfg)
    ref, end = player_steps([0.0, 30.0, 1000.0], [100.0, 0.5, 0.5], [1.0] * 20, 0.0, 4.0, 10.0)
    assert any(o.sleep_time > 0 for o in r.outcomes)
    for o, (dl, reb, sl, buf) in zip(r.outcomes, ref):
        assert o.download_time == pytest.approx(dl, abs=1e-9)
        assert o.sleep_time == pytest.approx(sl, abs=1e-9)
        assert o.buffer == pytest.approx(buf, abs=1e-9)
    assert r.wall_clock == pytest.approx(end, abs=1e-9)


def test_exhausted_trace_keeps_last_rate_without_wrap():
    m = flat_manifest(n_chunks=3, megabits=(8.0, 8.0, 8.0))
    tr = NetworkTrace("t", np.array([0.0, 1.0]), np.array([4.0, 2.0]))
    r = rollout(lambda v: 0, m, tr, SimConfig(per_chunk_rtt=0.0, trace_wraps=False))
    # first chunk: 4 Mbit in the first second, 2 Mbit/s in the persisting tail afterwards
    assert r.outcomes[0].download_time == pytest.approx(1.0 + 4.0 / 2.0)
    assert r.outcomes[1].download_time == pytest.approx(4.0)


def test_trace_wraps_by_default():
    m = flat_manifest(n_chunks=2, megabits=(6.0, 6.0, 6.0))
    tr = NetworkTrace("t", np.array([0.0, 1.0]), np.array([4.0, 1.0]))  # span 2 s, 5 Mbit per lap
    r = rollout(lambda v: 0, m, tr, SimConfig(per_chunk_rtt=0.0))
    assert r.outcomes[0].download_time == pytest.approx(2.0 + 1.0 / 4.0)


def test_lowest_level_on_fast_trace_never_stalls_after_start(manifest48):
    r = rollout(lambda v: 0, manifest48, constant_trace(20.0))
    assert r.total_rebuffer == pytest.approx(r.outcomes[0].download_time)
    assert all(o.rebuffer == 0 for o in r.outcomes[1:])
    assert len(r.session) == manifest48.n_chunks
    assert r.session.vmaf.tolist() == [o.chunk_vmaf for o in r.outcomes]


def test_policy_error_carries_chunk_index(manifest48):
    def bad(view):
        if view.state.chunk_index == 5:
            raise RuntimeError("boom")
        return 0

    with pytest.raises(PolicyError) as exc:
        rollout(bad, manifest48, constant_trace(3.0))
    assert exc.value.chunk_index == 5


def test_invalid_action(manifest48):
    with pytest.raises(PolicyError):
        rollout(lambda v: 99, manifest48, constant_trace(3.0))


def test_outcomes_jsonl_round_trip(manifest48):
    r = rollout(lambda v: 1, manifest48, constant_trace(3.0))
    rows = load_outcomes_jsonl(dump_outcomes_jsonl(r.outcomes, abr="fixed"))
    assert len(rows) == 48 and rows[0]["abr"] == "fixed"
    assert rows[3]["download_time"] == r.outcomes[3].download_time


def test_buffer_samples_follow_drain():
    m = flat_manifest(n_chunks=2, megabits=(4.0, 4.0, 4.0))
    r = rollout(lambda v: 0, m, constant_trace(2.0), NO_RTT)
    # chunk 1: 2 s download from empty (stall), buffer 4; chunk 2: 2 s download, drains 4 -> 2, then 6
    s = buffer_samples(r.outcomes, 4.0, 0.5)
    assert s.tolist() == [0.0, 0.0, 0.0, 0.0, 4.0, 3.5, 3.0, 2.5]


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 3.0))
def test_larger_chunk_never_downloads_faster(seed, scale):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    tr = NetworkTrace("r", np.cumsum(np.r_[0, rng.uniform(0.5, 5, n - 1)]), rng.uniform(0.2, 6, n))
    small = flat_manifest(n_chunks=1, megabits=(scale, 2 * scale, 3 * scale))
    big = flat_manifest(n_chunks=1, megabits=(1.5 * scale, 2 * scale, 3 * scale))
    off = float(rng.uniform(0, tr.span))
    o_small = rollout(lambda v: 0, small, tr, SimConfig(), off).outcomes[0]
    o_big = rollout(lambda v: 0, big, tr, SimConfig(), off).outcomes[0]
    assert o_big.download_time >= o_small.download_time
