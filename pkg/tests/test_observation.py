import math

import numpy as np
import pytest

from rangepilot.observation import (FRAME_SIZE, OBS_LAYOUT, OBS_SIZE, SLOTS, FrameStack, RewardParams,
                                    alignment, alignment_term, arrival_term, compute_reward,
                                    encode_observation, line_term, point_line_distance, progress_term,
                                    stability_term)
from rangepilot.physics import Mode, World, make_state, quat_from_axis_angle, yaw_quat
from rangepilot.tasks import PathMode, PathProgress, WaypointPath, advance_waypoint, start_progress

WORLD = World.cube(60.0)
PARAMS = RewardParams()


def dense_line_distance(p, a, b, samples=1_000_001):
    """Oracle: brute-force minimum over t in [-10, 10] of |p - (a + t (b - a))|."""
    t = np.linspace(-10.0, 10.0, samples)[:, None]
    return float(np.min(np.linalg.norm(p - (a + t * (b - a)), axis=1)))


class TestPointLineDistance:
    def test_point_on_line(self):
        a, b = np.array([1.0, 2, 3]), np.array([4.0, -1, 7])
        assert point_line_distance(a + 0.37 * (b - a), a, b) == pytest.approx(0.0, abs=1e-12)

    def test_pythagoras(self):
        assert point_line_distance([3.0, 4, 0], [0.0, 0, 0], [0.0, 0, 1]) == pytest.approx(5.0)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p, a, b = rng.uniform(-5, 5, (3, 3))
            assert point_line_distance(p, a, b) == pytest.approx(dense_line_distance(p, a, b), abs=1e-4)

    def test_degenerate_segment_falls_back(self):
        assert point_line_distance([3.0, 4, 0], [1.0, 1, 1], [1.0, 1, 1]) == pytest.approx(
            math.sqrt(4 + 9 + 1))

    def test_batched(self):
        rng = np.random.default_rng(1)
        p, a, b = rng.normal(size=(3, 50, 3))
        out = point_line_distance(p, a, b)
        for k in range(50):
            assert out[k] == pytest.approx(point_line_distance(p[k], a[k], b[k]), rel=1e-12)


class TestAlignment:
    def test_facing_waypoint(self):
        s = make_state([0.0, 0, 10], Mode.HELICOPTER)
        assert alignment(s, [10.0, 0, 3]) == pytest.approx(1.0)

    def test_facing_away(self):
        s = make_state([0.0, 0, 10], Mode.HELICOPTER)
        assert alignment(s, [-10.0, 0, 10]) == pytest.approx(-1.0)

    def test_waypoint_overhead(self):
        s = make_state([0.0, 0, 10], Mode.HELICOPTER)
        assert alignment(s, [0.0, 0, 30]) == 0.0

    def test_nose_vertical(self):
        q = quat_from_axis_angle([0.0, 1.0, 0.0], -math.pi / 2)  # nose straight up
        s = make_state([0.0, 0, 10], Mode.ZERO_G, orientation=q)
        assert alignment(s, [10.0, 0, 10]) == 0.0

    def test_perpendicular(self):
        s = make_state([0.0, 0, 10], Mode.ZERO_G, orientation=yaw_quat(math.pi / 2))
        assert alignment(s, [10.0, 0, 10]) == pytest.approx(0.0, abs=1e-12)


def _path():
    wp = np.array([[-10.0, 0, 10], [10.0, 0, 10], [10.0, 15, 20]])
    return WaypointPath(wp, PathMode.FREE_SPACE)


class TestEncode:
    def test_layout_size(self):
        assert FRAME_SIZE == 24 and OBS_SIZE == 72
        assert [n for _, n in OBS_LAYOUT] == [3, 3, 1, 1, 1, 3, 3, 4, 4, 1]

    def test_at_waypoint_first_frame(self):
        path = _path()
        s = make_state(path.waypoints[1], Mode.HELICOPTER)
        prog = start_progress(path, s.position)
        f = encode_observation(s, path, prog, WORLD)
        np.testing.assert_array_equal(f[SLOTS["waypoint_rel"]], 0.0)
        assert f[SLOTS["waypoint_distance"]][0] == 0.0
        np.testing.assert_array_equal(f[SLOTS["velocity"]], 0.0)
        np.testing.assert_array_equal(f[SLOTS["acceleration"]], 0.0)
        np.testing.assert_array_equal(f[SLOTS["orientation_delta"]], 0.0)
        np.testing.assert_array_equal(f[SLOTS["orientation"]], [1.0, 0, 0, 0])

    def test_zero_g_has_no_ground_distance(self):
        path = _path()
        for z in (0.0, 17.0, 55.0):
            s = make_state([0.0, 0, z], Mode.ZERO_G)
            f = encode_observation(s, path, start_progress(path, s.position), WORLD)
            assert f[SLOTS["ground_distance"]][0] == 0.0
        s = make_state([0.0, 0, 30.0], Mode.HELICOPTER)
        f = encode_observation(s, path, start_progress(path, s.position), WORLD)
        assert f[SLOTS["ground_distance"]][0] == pytest.approx(0.5)

    def test_corner_is_normalized(self):
        wp = np.array([WORLD.bounds_max, WORLD.bounds_min, WORLD.bounds_max])
        path = WaypointPath(wp, PathMode.FREE_SPACE)
        s = make_state(WORLD.bounds_max, Mode.HELICOPTER, velocity=[500.0, -500, 0])
        f = encode_observation(s, path, start_progress(path, s.position), WORLD)
        assert np.all(np.abs(f) <= 1.0)
        assert np.all(np.isfinite(f))

    def test_next_waypoint_repeats_at_end(self):
        path = _path()
        s = make_state([0.0, 0, 10], Mode.ZERO_G)
        prog = PathProgress(np.int64(2), np.int64(1), np.float64(1.0))
        f = encode_observation(s, path, prog, WORLD)
        np.testing.assert_array_equal(f[SLOTS["waypoint_rel"]], f[SLOTS["next_waypoint_rel"]])

    def test_orientation_delta_is_componentwise(self):
        path = _path()
        q0 = yaw_quat(0.1)
        q1 = yaw_quat(0.2)
        s = make_state([0.0, 0, 10], Mode.ZERO_G, orientation=q1)
        f = encode_observation(s, path, start_progress(path, s.position), WORLD, prev_q=q0)
        np.testing.assert_array_equal(f[SLOTS["orientation_delta"]], q1 - q0)

    def test_translation_covariant(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            shift = rng.uniform(-100, 100, 3)
            moved = World(WORLD.bounds_min + shift, WORLD.bounds_max + shift, WORLD.ground_height + shift[2])
            path = _path()
            p = rng.uniform(-20, 20, 3) + [0, 0, 30]
            v = rng.normal(size=3)
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            for mode in (Mode.HELICOPTER, Mode.ZERO_G):
                s = make_state(p, mode, orientation=q, velocity=v)
                s2 = make_state(p + shift, mode, orientation=q, velocity=v)
                path2 = WaypointPath(path.waypoints + shift, path.mode)
                f1 = encode_observation(s, path, start_progress(path, s.position), WORLD)
                f2 = encode_observation(s2, path2, start_progress(path2, s2.position), moved)
                np.testing.assert_allclose(f1, f2, atol=1e-12)

    def test_rejects_non_finite(self):
        path = _path()
        s = make_state([np.nan, 0, 10], Mode.ZERO_G)
        with pytest.raises(ValueError):
            encode_observation(s, path, start_progress(path, np.zeros(3)), WORLD)


class TestFrameStack:
    def test_replicates_first_frame(self):
        st = FrameStack(2)
        first = np.arange(48, dtype=float).reshape(2, 24)
        st.reset(first)
        obs = st.observation()
        assert obs.shape == (2, 72)
        np.testing.assert_array_equal(obs[0], np.tile(first[0], 3))

    def test_window_slides(self):
        st = FrameStack(1)
        frames = [np.full((1, 24), float(k)) for k in range(6)]
        st.reset(frames[0])
        for k in range(1, 6):
            st.push(frames[k])
            if k >= 2:
                obs = st.observation()[0]
                np.testing.assert_array_equal(obs, np.concatenate([frames[k - 2][0], frames[k - 1][0], frames[k][0]]))

    def test_masked_reset(self):
        st = FrameStack(2)
        st.reset(np.zeros((2, 24)))
        st.push(np.ones((2, 24)))
        st.reset(np.full((2, 24), 5.0), mask=np.array([False, True]))
        obs = st.observation()
        assert obs[0, -1] == 1.0 and obs[0, 0] == 0.0
        np.testing.assert_array_equal(obs[1], 5.0)


def _pair(p_prev, p_cur, q=None, mode=Mode.HELICOPTER, path=None):
    path = path or _path()
    s0 = make_state(p_prev, mode, orientation=q)
    s1 = make_state(p_cur, mode, orientation=q)
    prog0 = start_progress(path, s0.position)
    prog1, arrived = advance_waypoint(prog0, s1.position, path, PARAMS.eps)
    return path, (s0, prog0), (s1, prog1), arrived


class TestReward:
    def test_stationary_on_line_facing(self):
        path, prev, cur, arrived = _pair([0.0, 0, 10], [0.0, 0, 10])
        assert not arrived
        r = compute_reward(prev, cur, arrived, PARAMS, Mode.HELICOPTER, path, WORLD)
        assert r == pytest.approx(PARAMS.alpha / PARAMS.d_l_floor + PARAMS.beta, abs=1e-12)

    def test_arrival_adds_bonus(self):
        path, prev, cur, arrived = _pair([8.5, 0, 10], [8.5, 0, 10])
        assert arrived
        r = compute_reward(prev, cur, arrived, PARAMS, Mode.HELICOPTER, path, WORLD)
        assert r == pytest.approx(PARAMS.alpha / PARAMS.d_l_floor + PARAMS.beta + PARAMS.psi, abs=1e-12)

    def test_inverted_helicopter_penalized(self):
        q = quat_from_axis_angle([1.0, 0, 0], math.pi)
        path, prev, cur, arrived = _pair([0.0, 0, 10], [0.0, 0, 10], q=q)
        r = compute_reward(prev, cur, arrived, PARAMS, Mode.HELICOPTER, path, WORLD)
        _, prev_up, cur_up, _ = _pair([0.0, 0, 10], [0.0, 0, 10])
        upright = compute_reward(prev_up, cur_up, False, PARAMS, Mode.HELICOPTER, path, WORLD)
        assert r == pytest.approx(upright - PARAMS.stability_penalty, abs=1e-12)
        zg = compute_reward(prev, cur, arrived, PARAMS, Mode.ZERO_G, path, WORLD)
        assert zg == pytest.approx(upright, abs=1e-12)

    def test_moving_away_one_metre(self):
        path, prev, cur, arrived = _pair([0.0, 0, 10], [-1.0, 0, 10])
        term = progress_term(prev[1].prev_distance, cur[0], path, prev[1].current_index, WORLD, PARAMS)
        # by hand: distance goes 10 -> 11
        assert term == pytest.approx(-PARAMS.gamma * 1.0 / WORLD.diagonal, rel=1e-12)

    def test_line_term_is_bounded(self):
        path, prev, cur, arrived = _pair([0.0, 0, 10], [0.0, 0, 10])
        assert line_term(cur[0], path, 1, PARAMS) <= PARAMS.alpha / PARAMS.d_l_floor

    def test_decomposition(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p0 = rng.uniform(-25, 25, 3) + [0, 0, 30]
            p1 = p0 + rng.normal(size=3)
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            path, prev, cur, arrived = _pair(p0, p1, q=q)
            idx = prev[1].current_index
            parts = [line_term(cur[0], path, idx, PARAMS), alignment_term(cur[0], path, idx, PARAMS),
                     progress_term(prev[1].prev_distance, cur[0], path, idx, WORLD, PARAMS),
                     arrival_term(arrived, PARAMS), stability_term(cur[0], Mode.HELICOPTER, PARAMS)]
            total = parts[0] + parts[1] + parts[2] + parts[3] + parts[4]
            assert compute_reward(prev, cur, arrived, PARAMS, Mode.HELICOPTER, path, WORLD) == total

    def test_params_validation(self):
        with pytest.raises(ValueError):
            RewardParams(d_l_floor=0.0)
        with pytest.raises(ValueError):
            RewardParams(eps=-1.0)
