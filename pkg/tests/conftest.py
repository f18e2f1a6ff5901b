import numpy as np
import pytest

from mscmhmst import dataio, synth

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    """Two sensors, three synthetic days, h=12, t=12 windows."""
    series = synth.generate(2, 3, seed=3)
    tr, va, te = dataio.split_series(series, *dataio.proportional_split(series.n_steps))
    stats = dataio.normalize_stats(tr)
    return tuple(dataio.make_windows(seg, 12, 12, stats) for seg in (tr, va, te))
