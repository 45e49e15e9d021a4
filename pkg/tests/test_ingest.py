import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latentwarn.ingest import (
    ParseError,
    RawRecording,
    TimeSeriesMatrix,
    block_means,
    block_subsample,
    load_csv,
    load_series,
    preprocess,
    read_matrix,
    rescale_channels,
    save_csv,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def rec(x, rate=1.0, names=None):
    return RawRecording(np.asarray(x, dtype=float), rate, names)


# --- types ---------------------------------------------------------------------


def test_raw_recording_rejects_nan_and_names_channel():
    x = np.zeros((4, 2))
    x[2, 1] = np.nan
    with pytest.raises(ValueError, match="Fz"):
        rec(x, names=("Cz", "Fz"))


def test_raw_recording_needs_two_rows():
    with pytest.raises(ValueError):
        rec(np.zeros((1, 3)))


def test_raw_recording_is_read_only():
    r = rec(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        r.samples[0, 0] = 1.0


def test_time_series_matrix_invariants():
    with pytest.raises(ValueError):
        TimeSeriesMatrix(np.zeros((2, 1)), 1.0)
    with pytest.raises(ValueError):
        TimeSeriesMatrix(np.zeros((3, 1)), 0.0)
    with pytest.raises(ValueError):
        TimeSeriesMatrix(np.zeros((3, 1)), 1.0, origin="eeg")
    ts = TimeSeriesMatrix(np.arange(6.0).reshape(3, 2), 0.5, "synthetic")
    assert (ts.n_points, ts.n_dims) == (3, 2)


# --- rescale -------------------------------------------------------------------


@pytest.mark.parametrize(
    "col, lo, hi, expected",
    [
        ([0, 2, 4], -0.5, 0.5, [-0.5, 0.0, 0.5]),
        ([7, 7, 7], -0.5, 0.5, [0.0, 0.0, 0.0]),
        ([-1, 0, 3], -1.0, 1.0, [-1.0, -0.5, 1.0]),
    ],
)
def test_rescale_examples(col, lo, hi, expected):
    out = rescale_channels(rec(np.array(col, float)[:, None]), lo, hi)
    np.testing.assert_allclose(out.samples[:, 0], expected, atol=1e-15)


def test_rescale_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        rescale_channels(rec(np.eye(3)), 1.0, -1.0)


@settings(max_examples=200, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 12), st.integers(1, 4)), elements=finite))
def test_rescale_is_idempotent(x):
    once = rescale_channels(rec(x))
    twice = rescale_channels(once)
    np.testing.assert_array_equal(once.samples, twice.samples)


@settings(max_examples=200, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 12), st.integers(1, 4)), elements=finite))
def test_rescale_hits_bounds(x):
    out = rescale_channels(rec(x), -0.5, 0.5).samples
    for j in range(x.shape[1]):
        if np.ptp(x[:, j]) > 0:
            assert out[:, j].min() == -0.5 and out[:, j].max() == 0.5
        else:
            assert np.all(out[:, j] == 0.0)


# --- block subsample -----------------------------------------------------------


def test_block_sixteen_at_256_hz_gives_sixteenth_second():
    ts = block_subsample(rec(np.random.default_rng(0).normal(size=(256, 3)), 256.0), 16)
    assert ts.dt == 0.0625
    assert ts.n_points == 16


def test_block_mean_example():
    ts = block_subsample(rec([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 2)
    np.testing.assert_array_equal(ts.data[:, 0], [1.5, 3.5, 5.5])
    np.testing.assert_array_equal(block_means(np.arange(1.0, 5.0), 2)[:, 0], [1.5, 3.5])
    # two output rows are too few for a TimeSeriesMatrix
    with pytest.raises(ValueError, match="at least 3"):
        block_subsample(rec(np.arange(1.0, 5.0)), 2)


def test_partial_block_dropped():
    assert block_subsample(rec(np.arange(10.0)), 3).n_points == 3


def test_block_larger_than_rows():
    with pytest.raises(ValueError, match="exceeds"):
        block_subsample(rec(np.arange(4.0)), 5)


@settings(max_examples=100, deadline=None)
@given(
    arrays(float, st.tuples(st.integers(3, 30), st.integers(1, 3)), elements=finite),
    st.floats(0.5, 1000),
)
def test_block_one_is_identity(x, rate):
    ts = block_subsample(rec(x, rate), 1)
    np.testing.assert_array_equal(ts.data, x)
    assert ts.dt == pytest.approx(1.0 / rate)


@settings(max_examples=100, deadline=None)
@given(
    arrays(float, st.tuples(st.integers(6, 40), st.integers(1, 3)), elements=finite),
    st.integers(1, 5),
)
def test_block_means_preserve_prefix_mean(x, block):
    n_out = x.shape[0] // block
    if n_out < 3:
        return
    ts = block_subsample(rec(x), block)
    np.testing.assert_allclose(
        ts.data.mean(axis=0), x[: n_out * block].mean(axis=0), rtol=1e-9, atol=1e-6
    )


def test_preprocess_rescales_before_subsampling():
    x = np.array([0.0, 10.0, 2.0, 4.0, 6.0, 8.0])[:, None]
    ts = preprocess(rec(x, 2.0), block=2)
    # rescaled raw: [-0.5, 0.5, -0.3, -0.1, 0.1, 0.3]
    np.testing.assert_allclose(ts.data[:, 0], [0.0, -0.2, 0.2], atol=1e-15)
    assert ts.dt == 1.0


# --- csv -----------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    x = np.array([[1.0, -2.5], [1e-7, 3.14159265358979], [123456.789, 0.0]])
    ts = TimeSeriesMatrix(x, 0.25, channel_names=("ch1", "ch2"))
    path = tmp_path / "m.csv"
    save_csv(ts, path)
    back = load_series(path, 0.25)
    np.testing.assert_allclose(back.data, x, rtol=1e-12)
    assert back.channel_names == ("ch1", "ch2")


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(3, 8), st.integers(1, 4)), elements=finite))
def test_csv_round_trip_twelve_digits(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("rt") / "x.csv"
    save_csv(TimeSeriesMatrix(x, 1.0), path)
    back, header = read_matrix(path)
    assert header is None
    np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-300)


def test_header_detected(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("ch1,ch2\n1,2\n3,4\n")
    r = load_csv(path, 256.0)
    assert r.channel_names == ("ch1", "ch2")
    np.testing.assert_array_equal(r.samples, [[1, 2], [3, 4]])


def test_non_numeric_cell_names_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2\n3,abc\n5,6\n")
    with pytest.raises(ParseError, match=r"row 1, column 1"):
        read_matrix(path)


def test_ragged_row(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("1,2\n3\n")
    with pytest.raises(ParseError, match="row 1"):
        read_matrix(path)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nothere.csv"):
        read_matrix(tmp_path / "nothere.csv")


def test_transpose(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("1,2,3\n4,5,6\n")
    r = load_csv(path, transpose=True)
    assert r.samples.shape == (3, 2)
    np.testing.assert_array_equal(r.samples[:, 1], [4, 5, 6])
