"""Backward/forward window reads on mesh paths, and the two segment norms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memsfde.segments import (
    GridPath,
    Segment,
    backward_segment,
    forward_segment,
    l2_norm_sq,
    sup_norm,
)


def linear_path(dt=0.1, t0=-1.0, t_end=2.0, delta_steps=5):
    n = int(round((t_end - t0) / dt))
    vals = t0 + dt * np.arange(n + 1)
    return GridPath(values=vals, dt=dt, t0=t0, delta_steps=delta_steps)


class TestBackward:
    def test_identity_path_reads_lag(self):
        # path(t) = t with a half-unit window: segment at t=1 is s -> 1 - s
        path = linear_path()
        seg = backward_segment(path, 1.0)
        np.testing.assert_allclose(seg.values, [1.0, 0.9, 0.8, 0.7, 0.6, 0.5])
        assert seg.delta == pytest.approx(0.5)

    def test_constant_path(self):
        path = GridPath(np.full(11, 3.0), dt=0.1, t0=-0.5, delta_steps=5)
        np.testing.assert_allclose(backward_segment(path, 0.0).values, 3.0)

    def test_initial_data_reversed_at_time_zero(self):
        # before 0 the path is the initial history; the window at t=0 reads it
        # mirrored: entry k is history(-k dt)
        hist = np.array([5.0, 6.0, 7.0])  # values at t = -0.2, -0.1, 0.0
        path = GridPath(hist, dt=0.1, t0=-0.2, delta_steps=2)
        np.testing.assert_allclose(backward_segment(path, 0.0).values, [7.0, 6.0, 5.0])

    def test_round_trip_indexing(self):
        path = linear_path()
        for t in (0.5, 1.0, 1.5):
            seg = backward_segment(path, t)
            for k in range(path.delta_steps + 1):
                assert seg.values[k] == pytest.approx(path.value_at(t - k * path.dt))

    def test_window_before_start_rejected(self):
        path = linear_path()
        with pytest.raises(ValueError):
            backward_segment(path, -0.6)


class TestForward:
    def test_identity_path_reads_ahead(self):
        path = linear_path()
        seg = forward_segment(path, 1.0)
        np.testing.assert_allclose(seg.values, [1.0, 1.1, 1.2, 1.3, 1.4, 1.5])

    def test_zero_extended_path_at_horizon(self):
        # adjoint-style paths carry an explicit zero tail past the horizon;
        # the forward window at T then reads [p(T), 0, ..., 0]
        core = np.array([0.4, 0.6, 0.8])  # p on t = 0, 0.1, 0.2
        extended = GridPath(np.concatenate([core, np.zeros(2)]), dt=0.1, t0=0.0, delta_steps=2)
        np.testing.assert_allclose(forward_segment(extended, 0.2).values, [0.8, 0.0, 0.0])

    def test_window_past_end_rejected(self):
        path = linear_path()
        with pytest.raises(ValueError):
            forward_segment(path, 1.6)

    def test_mirror_identity(self):
        # reading forward from t - delta and flipping equals reading back from t
        rng = np.random.Generator(np.random.Philox(key=3))
        path = GridPath(rng.standard_normal(31), dt=0.05, t0=-0.5, delta_steps=7)
        for t in (0.0, 0.4, 0.9):
            fwd = forward_segment(path, t - path.delta_steps * path.dt)
            back = backward_segment(path, t)
            np.testing.assert_allclose(fwd.reversed().values, back.values)


class TestNorms:
    def test_linear_segment_oracle(self):
        # s -> 1 - s on [0, 1/2]: sup is 1, integral of (1-s)^2 is 7/24
        dt = 0.005
        seg = Segment(1.0 - dt * np.arange(101), dt=dt)
        assert sup_norm(seg) == pytest.approx(1.0)
        assert l2_norm_sq(seg) == pytest.approx(7.0 / 24.0, abs=dt**2)

    def test_l2_second_order_in_dt(self):
        exact = 7.0 / 24.0
        errs = []
        for n in (10, 20, 40):
            dt = 0.5 / n
            seg = Segment(1.0 - dt * np.arange(n + 1), dt=dt)
            errs.append(abs(l2_norm_sq(seg) - exact))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
        assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)

    def test_degenerate_cases(self):
        zero = Segment(np.zeros(6), dt=0.1)
        assert (sup_norm(zero), l2_norm_sq(zero)) == (0.0, 0.0)
        const = Segment(np.full(5, 2.0), dt=0.25)  # delta = 1
        assert sup_norm(const) == pytest.approx(2.0)
        assert l2_norm_sq(const) == pytest.approx(4.0)

    @given(
        scale=st.floats(min_value=-10.0, max_value=10.0, allow_nan=False),
        vals=st.lists(st.floats(-3.0, 3.0), min_size=2, max_size=20),
    )
    @settings(max_examples=60, deadline=None)
    def test_homogeneity(self, scale, vals):
        seg = Segment(np.asarray(vals), dt=0.1)
        scaled = Segment(scale * seg.values, dt=0.1)
        assert sup_norm(scaled) == pytest.approx(abs(scale) * sup_norm(seg), abs=1e-9)
        assert l2_norm_sq(scaled) == pytest.approx(scale**2 * l2_norm_sq(seg), rel=1e-9, abs=1e-9)


class TestPathLookup:
    def test_off_mesh_time_rejected(self):
        path = linear_path()
        for bad in (0.33, 1.0001):
            with pytest.raises(ValueError):
                path.index_of(bad)
        with pytest.raises(ValueError):
            backward_segment(path, 0.77)

    def test_single_point_segment(self):
        path = GridPath(np.array([1.0, 2.0, 3.0]), dt=0.1, t0=0.0, delta_steps=0)
        seg = backward_segment(path, 0.1)
        np.testing.assert_allclose(seg.values, [2.0])
        assert l2_norm_sq(seg) == 0.0
