import numpy as np
import pytest

from abrkit import baselines, synthetic
from abrkit.baselines import BbaConfig, MpcConfig, RobustMpc
from abrkit.data import VideoManifest
from abrkit.qoe import LinWeights
from abrkit.sim import SimConfig, rollout

from conftest import constant_trace, flat_manifest
from oracles import mpc_brute_force


@pytest.fixture
def ref_manifest(ladder):
    return flat_manifest(ladder=ladder)


def test_harmonic_mean():
    assert baselines.harmonic_mean([2, 2, 2]) == 2.0
    assert baselines.harmonic_mean([1, 100]) == pytest.approx(2 / 1.01)


def test_rate_based_examples(ref_manifest):
    assert baselines.rate_based_select([2, 2, 2, 2, 2], ref_manifest) == 3
    assert baselines.rate_based_select([], ref_manifest) == 0
    assert baselines.rate_based_select([1, 100], ref_manifest) == 3
    assert baselines.rate_based_select([0.1], ref_manifest) == 0
    assert baselines.rate_based_select([50] * 5, ref_manifest) == 5


def test_rate_based_uses_recent_window(ref_manifest):
    assert baselines.rate_based_select([0.1] * 10 + [5] * 5, ref_manifest) == 5


def test_bba_examples(ref_manifest):
    assert baselines.bba_select(0.0, BbaConfig(), ref_manifest) == 0
    assert baselines.bba_select(35.0, BbaConfig(), ref_manifest) == 5
    assert baselines.bba_select(10.0, BbaConfig(5, 10), ref_manifest) == 2


def test_bba_monotone_in_buffer(ref_manifest):
    levels = [baselines.bba_select(b, BbaConfig(), ref_manifest) for b in np.linspace(0, 40, 200)]
    assert levels == sorted(levels)


def test_robust_throughput_without_error_is_harmonic():
    mpc = RobustMpc(MpcConfig(LinWeights(1, 4, 1, 1)))
    assert mpc.robust_throughput([1, 2, 4]) == pytest.approx(baselines.harmonic_mean([1, 2, 4]))
    mpc.errors = [0.25]
    assert mpc.robust_throughput([2, 2]) == pytest.approx(2 / 1.25)


def test_mpc_records_relative_error():
    m = flat_manifest(n_chunks=6)
    mpc = RobustMpc(MpcConfig(LinWeights(1, 4, 1, 1)))
    rollout(mpc, m, constant_trace(2.0), SimConfig(per_chunk_rtt=0.0))
    assert len(mpc.errors) == 5
    assert max(mpc.errors) < 1e-9


def test_horizon_one_is_myopic():
    # plenty of buffer and bandwidth: no level risks a stall
    m = flat_manifest(n_chunks=3, ladder=(1.0, 2.0, 4.0))
    w = LinWeights(1.0, 4.0, 0.5, 2.0)
    mpc = RobustMpc(MpcConfig(w, horizon=1))
    vmaf = m.vmaf[1]
    last = vmaf[0]
    expect = int(np.argmax([w.alpha_v * q - w.gamma_v * max(q - last, 0) - w.delta_v * max(last - q, 0)
                            for q in vmaf]))
    assert mpc.decide(m, SimConfig(), 1, 50.0, last, [100.0]) == expect == 2


def random_instance(rng):
    n_levels = int(rng.integers(2, 5))
    n_chunks = int(rng.integers(2, 6))
    mbit = np.sort(rng.uniform(0.5, 12.0, (n_chunks, n_levels)), axis=1)
    vmaf = np.sort(rng.uniform(10, 100, (n_chunks, n_levels)), axis=1)
    m = VideoManifest(4.0, np.sort(rng.uniform(0.3, 5, n_levels)), mbit * 1e6 / 8, vmaf)
    return m, mbit, vmaf


def test_mpc_horizon_two_matches_enumeration():
    rng = np.random.default_rng(42)
    sim = SimConfig(buffer_cap=20.0, per_chunk_rtt=0.08)
    for _ in range(100):
        m, mbit, vmaf = random_instance(rng)
        w = LinWeights(*rng.uniform(0.1, 5, 4))
        chunk = int(rng.integers(0, m.n_chunks))
        buffer = float(rng.uniform(0, 20))
        last = None if chunk == 0 else float(vmaf[chunk - 1][rng.integers(m.n_levels)])
        hist = list(rng.uniform(0.3, 6, int(rng.integers(1, 6))))
        mpc = RobustMpc(MpcConfig(w, horizon=2))
        got = mpc.decide(m, sim, chunk, buffer, last, hist)
        want = mpc_brute_force(mbit.tolist(), vmaf.tolist(), chunk, buffer, last,
                               baselines.harmonic_mean(hist), w.as_tuple(), 2, 0.08, 4.0, 20.0)
        assert got == want


def test_mpc_cold_start_picks_lowest():
    m = flat_manifest()
    assert RobustMpc(MpcConfig(LinWeights(1, 4, 1, 1))).decide(m, SimConfig(), 0, 0.0, None, []) == 0


def test_buffer_map_survives_a_bandwidth_cliff():
    m = synthetic.synth_manifest(0)
    trace = synthetic.cliff_trace("cliff")
    rate = rollout(baselines.RateBased(), m, trace)
    bba = rollout(baselines.BufferBased(), m, trace)
    assert bba.total_rebuffer < rate.total_rebuffer


def test_fixed_lowest_level_on_fast_trace_stalls_only_at_startup(manifest48):
    r = rollout(baselines.FixedLevel(0), manifest48, constant_trace(50.0))
    assert r.outcomes[0].rebuffer == r.outcomes[0].download_time
    assert sum(o.rebuffer for o in r.outcomes[1:]) == 0.0
