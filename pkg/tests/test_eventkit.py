"""
Tests for the event pipeline:
- EventStream validation, merge and polarity flip
- Voxel grid temporal splatting, mass conservation and normalization
- Simulator crossing counts, polarity and threshold noise
"""
import numpy as np
import pytest

from rpeflow.errors import ConfigError, DataError, ShapeError
from rpeflow.eventkit import EVENT_DTYPE, LOG_EPS, Event, EventStream, simulate_events, voxelize


def make_stream(events, width=4, height=3):
    return EventStream.from_events([Event(*e) for e in events], width, height)


def test_event_record_is_thirteen_bytes():
    assert EVENT_DTYPE.itemsize == 13


def test_stream_validation():
    with pytest.raises(DataError):
        make_stream([(9, 0, 0.5, 1)])
    with pytest.raises(DataError):
        make_stream([(0, 0, 0.5, 0)])
    with pytest.raises(ConfigError):
        EventStream.empty(4, 3, t0=1.0, t1=1.0)


def test_from_events_sorts_by_time():
    s = make_stream([(0, 0, 0.9, 1), (1, 1, 0.1, -1)])
    assert [e.t for e in s] == [0.1, 0.9]


def test_merge_and_flip():
    a = make_stream([(0, 0, 0.2, 1)])
    b = make_stream([(1, 0, 0.1, -1)])
    merged = a.merge(b)
    assert len(merged) == 2
    assert merged.events["t"][0] == 0.1
    assert list(merged.with_flipped_polarity().events["p"]) == [1, -1]
    with pytest.raises(ShapeError):
        a.merge(EventStream.empty(5, 3))


def test_voxelize_conserves_unit_mass_per_event():
    rng = np.random.default_rng(0)
    n = 200
    events = [(int(rng.integers(0, 4)), int(rng.integers(0, 3)), float(rng.uniform()), 1) for _ in range(n)]
    grid = voxelize(make_stream(events), 5, 3, 4, normalize=False).grid
    assert abs(grid.sum() - n) < 1e-9


def test_voxelize_splits_between_bins():
    # t* = 0.375·(3 − 1) = 0.75 -> 0.25 in bin 0, 0.75 in bin 1
    grid = voxelize(make_stream([(2, 1, 0.375, -1)]), 3, 3, 4, normalize=False).grid
    np.testing.assert_allclose(grid[1, 2], [-0.25, -0.75, 0.0])
    assert np.count_nonzero(grid) == 2


def test_voxelize_endpoint_goes_to_last_bin():
    grid = voxelize(make_stream([(0, 0, 1.0, 1)]), 4, 3, 4, normalize=False).grid
    np.testing.assert_allclose(grid[0, 0], [0.0, 0.0, 0.0, 1.0])


def test_voxelize_normalization_scale():
    events = [(0, 0, 0.0, 1)] * 3 + [(1, 1, 0.0, 1)]
    vg = voxelize(make_stream(events), 1, 3, 4)
    assert vg.scale > 0
    np.testing.assert_allclose(vg.grid * vg.scale, voxelize(make_stream(events), 1, 3, 4, normalize=False).grid)


def test_voxelize_empty_stream_is_zero():
    vg = voxelize(EventStream.empty(4, 3), 2, 3, 4)
    assert not vg.grid.any()
    assert vg.scale == 1.0


def test_voxelize_rejects_sensor_mismatch():
    with pytest.raises(ShapeError):
        voxelize(EventStream.empty(4, 3), 2, 4, 4)


def test_simulator_counts_crossings_of_monotone_ramp():
    c = 0.2
    start, end = 0.1, 0.9
    ramp = np.linspace(start, end, 9)[:, None, None]
    stream = simulate_events(ramp, threshold=c)
    expected = int(np.floor((np.log(end + LOG_EPS) - np.log(start + LOG_EPS)) / c))
    assert len(stream) == expected
    assert np.all(stream.events["p"] == 1)
    assert np.all(np.diff(stream.events["t"]) >= 0)


def test_simulator_negative_ramp_gives_negative_polarity():
    ramp = np.linspace(0.8, 0.2, 5)[:, None, None]
    stream = simulate_events(ramp, threshold=0.15)
    assert len(stream) > 0
    assert np.all(stream.events["p"] == -1)


def test_simulator_static_frames_emit_nothing():
    frames = np.full((4, 3, 4), 0.5)
    assert len(simulate_events(frames)) == 0


def test_simulator_threshold_noise_is_seeded():
    rng_frames = np.random.default_rng(1).uniform(0.1, 0.9, (5, 3, 4))
    a = simulate_events(rng_frames, sigma=0.3, rng=np.random.default_rng(7))
    b = simulate_events(rng_frames, sigma=0.3, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(a.events, b.events)


def test_simulator_rejects_bad_input():
    with pytest.raises(ConfigError):
        simulate_events(np.zeros((1, 2, 2)))
    with pytest.raises(ConfigError):
        simulate_events(np.zeros((2, 2, 2)), threshold=0.0)
