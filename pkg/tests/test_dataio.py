import numpy as np
import pytest
from hypothesis import given, strategies as st

from mscmhmst import dataio
from mscmhmst.dataio import FlowSeries
from mscmhmst.errors import ConfigurationError, DataError


def write(tmp_path, text, name="flows.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_zero_file(tmp_path):
    p = write(tmp_path, "a,b\n" + "0,0\n" * 4)
    s = dataio.load_series(p)
    assert s.values.shape == (2, 4)
    assert np.all(s.values == 0)


def test_load_transposes_rows_to_sensors(tmp_path):
    s = dataio.load_series(write(tmp_path, "s1,s2\n1,2\n3,4\n"))
    np.testing.assert_array_equal(s.values, [[1, 3], [2, 4]])
    assert s.sensor_ids == ("s1", "s2")


def test_load_names_bad_cell(tmp_path):
    with pytest.raises(DataError, match="row 1, column 2"):
        dataio.load_series(write(tmp_path, "s1,s2\n1,x\n"))


def test_load_ragged_and_missing(tmp_path):
    with pytest.raises(DataError, match="row 2"):
        dataio.load_series(write(tmp_path, "s1,s2\n1,2\n3\n"))
    with pytest.raises(FileNotFoundError):
        dataio.load_series(tmp_path / "nope.csv")


def test_load_skips_comments(tmp_path):
    s = dataio.load_series(write(tmp_path, "# made by hand\ns1\n5\n6\n"))
    np.testing.assert_array_equal(s.values, [[5, 6]])


def test_write_load_roundtrip(tmp_path, rng):
    s = FlowSeries(rng.uniform(0, 100, size=(3, 20)), ("a", "b", "c"))
    dataio.write_series(tmp_path / "x.csv", s, ["comment"])
    back = dataio.load_series(tmp_path / "x.csv")
    np.testing.assert_array_equal(back.values, s.values)
    assert back.sensor_ids == s.sensor_ids


def test_series_rejects_negative():
    with pytest.raises(DataError):
        FlowSeries(np.array([[1.0, -1.0]]))


def test_split_series():
    s = FlowSeries(np.arange(10.0)[None])
    a, b, c = dataio.split_series(s, 6, 2, 2)
    assert (a.n_steps, b.n_steps, c.n_steps) == (6, 2, 2)
    np.testing.assert_array_equal(c.values, [[8, 9]])
    with pytest.raises(ConfigurationError):
        dataio.split_series(s, 8, 2, 2)


def test_pems_split_constants():
    # 44 + 5 + 10 days at 288 steps per day
    assert dataio.PEMS04_SPLIT == (44 * 288, 5 * 288, 10 * 288)
    s = FlowSeries(np.zeros((1, sum(dataio.PEMS04_SPLIT))))
    parts = dataio.split_series(s, *dataio.proportional_split(s.n_steps))
    assert tuple(p.n_steps for p in parts) == (12672, 1440, 2880)
    assert dataio.PEMS08_SPLIT == (47 * 288, 1440, 2880)


@given(st.integers(3, 100_000))
def test_proportional_split_covers_series(n):
    tr, va, te = dataio.proportional_split(n)
    assert tr + va + te == n and min(tr, va, te) >= 1


def test_make_windows_counts_and_errors():
    s = FlowSeries(np.arange(10.0)[None])
    stats = dataio.normalize_stats(s)
    assert len(dataio.make_windows(s, 3, 2, stats)) == 6
    assert len(dataio.make_windows(s, 6, 4, stats)) == 1
    with pytest.raises(ConfigurationError):
        dataio.make_windows(s, 6, 5, stats)


def test_window_counts_exhaustive():
    for n in range(1, 51):
        s = FlowSeries(np.arange(float(n))[None])
        stats = dataio.NormStats(np.zeros(1), np.ones(1))
        for h in range(1, 9):
            for t in range(1, 9):
                if h + t > n:
                    with pytest.raises(ConfigurationError):
                        dataio.make_windows(s, h, t, stats)
                    continue
                ds = dataio.make_windows(s, h, t, stats)
                assert len(ds) == n - h - t + 1
                # values equal step indices, so adjacency is directly visible
                assert np.all(ds.inputs[:, 0, -1] + 1 == ds.targets[:, 0, 0])
                assert np.all(ds.inputs[:, 0, 0] == np.arange(len(ds)))


def test_window_targets_raw_and_normalised():
    s = FlowSeries(np.array([[0.0, 2.0, 4.0, 6.0, 8.0]]))
    stats = dataio.NormStats(np.array([4.0]), np.array([2.0]))
    ds = dataio.make_windows(s, 2, 1, stats)
    np.testing.assert_array_equal(ds.targets[:, 0, 0], [4, 6, 8])
    np.testing.assert_array_equal(ds.targets_norm[:, 0, 0], [0, 1, 2])
    np.testing.assert_array_equal(ds.inputs[0, 0], [-2, -1])
    np.testing.assert_array_equal(ds.raw_inputs[0, 0], [0, 2])


def test_normalize_stats():
    st_ = dataio.normalize_stats(FlowSeries(np.array([[5.0, 5.0, 5.0], [1.0, 3.0, 2.0], [0.0, 0.0, 0.0]])))
    np.testing.assert_allclose(st_.mean, [5, 2, 0])
    np.testing.assert_allclose(st_.std, [1, np.sqrt(2 / 3), 1])
    two = dataio.normalize_stats(FlowSeries(np.array([[1.0, 3.0]])))
    assert two.mean[0] == 2 and two.std[0] == 1


def test_normalisation_uses_training_segment_only():
    values = np.concatenate([np.full(10, 1.0), np.full(10, 100.0)])[None]
    tr, va, te = dataio.split_series(FlowSeries(values), 10, 5, 5)
    stats = dataio.normalize_stats(tr)
    assert stats.mean[0] == 1.0 and stats.std[0] == 1.0


def test_denormalize():
    stats = dataio.NormStats(np.array([2.0]), np.array([3.0]))
    assert dataio.denormalize(np.array([[1.0]]), stats)[0, 0] == 5
    assert dataio.denormalize(np.array([[0.0]]), stats)[0, 0] == 2


@given(st.integers(0, 10_000))
def test_normalize_roundtrip(seed):
    r = np.random.default_rng(seed)
    x = r.uniform(0, 500, size=(4, 3, 7))
    stats = dataio.NormStats(r.uniform(0, 100, 3), r.uniform(0.1, 50, 3))
    np.testing.assert_allclose(stats.denormalize(stats.normalize(x)), x, rtol=0, atol=1e-10)


def test_select_sensors():
    s = FlowSeries(np.array([[1.0], [2.0], [3.0]]), ("a", "b", "c"))
    sub = s.select(["c", "a"])
    np.testing.assert_array_equal(sub.values, [[3], [1]])
    with pytest.raises(ConfigurationError):
        s.select(["z"])
