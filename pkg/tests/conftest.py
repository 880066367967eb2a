import numpy as np
import pytest

from abrkit.data import REFERENCE_LADDER_MBPS, NetworkTrace, VideoManifest
from abrkit.synthetic import synth_manifest


def flat_manifest(n_chunks=4, chunk_duration=4.0, ladder=(1.0, 2.0, 4.0), megabits=None):
    """Every chunk at level i is ``megabits[i]`` Mbit (default: ladder rate x duration)."""
    ladder = np.asarray(ladder, dtype=float)
    mbit = np.asarray(megabits if megabits is not None else ladder * chunk_duration, dtype=float)
    sizes = np.tile(mbit * 1e6 / 8, (n_chunks, 1))
    vmaf = np.tile(np.linspace(40, 95, len(ladder)), (n_chunks, 1))
    return VideoManifest(chunk_duration, ladder, sizes, vmaf)


def constant_trace(mbps, seconds=1000, trace_id="const"):
    return NetworkTrace(trace_id, np.array([0.0, float(seconds)]), np.array([mbps, mbps], dtype=float))


@pytest.fixture
def manifest48():
    return synth_manifest(0)


@pytest.fixture
def ladder():
    return np.array(REFERENCE_LADDER_MBPS)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
