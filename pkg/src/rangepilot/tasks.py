"""Waypoint navigation tasks: path generation, arrival bookkeeping, termination.

A path ``w[0..N]`` starts at the agent's spawn point ``w[0]``; the agent
targets ``w[1]`` first and the episode is complete once ``w[N]`` has been
reached (``current_index == N + 1``). ``w[0]`` only serves as the previous
waypoint for the line-distance term of the first leg.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .physics import AgentState, World

MIN_AIR_HEIGHT = 5.0
MAX_ATTEMPTS = 1000
PATH_RETRIES = 20


class PathMode(enum.IntEnum):
    GROUND_TO_GROUND = 0
    FREE_SPACE = 1


class Status(enum.IntEnum):
    RUNNING = 0
    SUCCESS = 1
    CRASHED = 2
    TIMED_OUT = 3


class PathError(RuntimeError):
    """Raised when rejection sampling cannot place a waypoint."""


@dataclass(frozen=True)
class WaypointPath:
    waypoints: np.ndarray  # (..., N + 1, 3)
    mode: PathMode

    @property
    def n(self) -> int:
        return self.waypoints.shape[-2] - 1


@dataclass(frozen=True)
class PathProgress:
    current_index: np.ndarray
    arrived_count: np.ndarray
    prev_distance: np.ndarray


def _in_bounds(p, world: World) -> bool:
    return bool(np.all(p >= world.bounds_min) and np.all(p <= world.bounds_max))


def _unit_vector(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def generate_path(rng: np.random.Generator, world: World, mode: PathMode, n_waypoints: int,
                  segment_range: tuple[float, float], start=None) -> WaypointPath:
    """Build a path step by step from ``start``.

    Free-space segment lengths are drawn uniformly from ``segment_range``
    once and only the direction is rejection-sampled, so lengths stay exactly
    uniform. Ground-to-ground paths lift off vertically above the start, keep
    intermediate waypoints more than 5 m above ground (and low enough to
    still land in the remaining legs), and end on the ground; there length
    and direction are rejection-sampled together.
    """
    lo, hi = float(segment_range[0]), float(segment_range[1])
    if n_waypoints < 1:
        raise ValueError("n_waypoints must be >= 1")
    if not 0 < lo <= hi:
        raise ValueError("segment_range must satisfy 0 < min <= max")
    if hi > world.diagonal:
        raise ValueError("segment_range exceeds the world diagonal")

    if mode == PathMode.FREE_SPACE:
        w0 = rng.uniform(world.bounds_min, world.bounds_max) if start is None else np.asarray(start, float)
        pts = [w0]
        for _ in range(n_waypoints):
            length = rng.uniform(lo, hi)
            pts.append(_sample_direction(rng, pts[-1], length, lambda p: _in_bounds(p, world)))
        return WaypointPath(np.array(pts), mode)

    if n_waypoints < 2:
        raise ValueError("ground-to-ground paths need at least 2 waypoints")
    for _ in range(PATH_RETRIES - 1):
        try:
            return _ground_path(rng, world, n_waypoints, lo, hi, start)
        except PathError:
            pass
    return _ground_path(rng, world, n_waypoints, lo, hi, start)


def _ground_path(rng, world: World, n_waypoints: int, lo: float, hi: float, start) -> WaypointPath:
    g = world.ground_height
    if start is None:
        xy = rng.uniform(world.bounds_min[:2], world.bounds_max[:2])
        w0 = np.array([xy[0], xy[1], g])
    else:
        w0 = np.array(start, dtype=float)
        w0[2] = g
    pts = [w0]

    for _ in range(MAX_ATTEMPTS):
        h = rng.uniform(lo, hi)
        if h > MIN_AIR_HEIGHT and g + h <= world.bounds_max[2]:
            pts.append(w0 + np.array([0.0, 0.0, h]))
            break
    else:
        raise PathError("could not place the lift-off waypoint")

    for k in range(2, n_waypoints):
        # stay low enough to still reach the ground in the remaining legs
        cap = g + max(0.6 * hi * (n_waypoints - k), MIN_AIR_HEIGHT + 0.5 * lo)

        def airborne(p, cap=cap):
            return _in_bounds(p, world) and g + MIN_AIR_HEIGHT < p[2] < cap

        pts.append(_sample_segment(rng, pts[-1], lo, hi, airborne))

    last = pts[-1]
    height = last[2] - g
    for _ in range(MAX_ATTEMPTS):
        length = rng.uniform(lo, hi)
        if length < height:
            continue
        r = np.sqrt(length * length - height * height)
        ang = rng.uniform(-np.pi, np.pi)
        p = np.array([last[0] + r * np.cos(ang), last[1] + r * np.sin(ang), g])
        if _in_bounds(p, world):
            pts.append(p)
            break
    else:
        raise PathError("could not place the landing waypoint")
    return WaypointPath(np.array(pts), PathMode.GROUND_TO_GROUND)


def _sample_direction(rng, origin, length, accept) -> np.ndarray:
    for _ in range(MAX_ATTEMPTS):
        p = origin + length * _unit_vector(rng)
        if accept(p):
            return p
    raise PathError(f"no valid waypoint at distance {length:.2f} after {MAX_ATTEMPTS} attempts")


def _sample_segment(rng, origin, lo, hi, accept) -> np.ndarray:
    for _ in range(MAX_ATTEMPTS):
        p = origin + rng.uniform(lo, hi) * _unit_vector(rng)
        if accept(p):
            return p
    raise PathError(f"no valid waypoint within {MAX_ATTEMPTS} attempts")


def current_waypoint(path: WaypointPath, index) -> np.ndarray:
    """Waypoint ``w[min(index, N)]`` per agent."""
    idx = np.minimum(np.asarray(index), path.n)
    return _gather(path.waypoints, idx)


def _gather(waypoints, idx) -> np.ndarray:
    idx = np.asarray(idx)
    if waypoints.ndim == 2:
        return waypoints[int(idx)]
    return np.take_along_axis(waypoints, idx[..., None, None].repeat(3, axis=-1), axis=-2)[..., 0, :]


def start_progress(path: WaypointPath, p) -> PathProgress:
    shape = np.shape(p)[:-1]
    idx = np.ones(shape, dtype=np.int64)
    d = np.linalg.norm(current_waypoint(path, idx) - p, axis=-1)
    return PathProgress(idx, np.zeros(shape, dtype=np.int64), d)


def advance_waypoint(progress: PathProgress, p, path: WaypointPath, eps: float):
    """Arrive at the current waypoint iff strictly closer than ``eps``.

    Returns the updated progress and the arrival flag(s). ``prev_distance``
    tracks the distance to whichever waypoint is current after the update.
    """
    i = np.asarray(progress.current_index)
    d = np.linalg.norm(current_waypoint(path, i) - p, axis=-1)
    arrived = (i <= path.n) & (d < eps)
    i_new = i + arrived
    d_new = np.where(arrived, np.linalg.norm(current_waypoint(path, i_new) - p, axis=-1), d)
    return PathProgress(i_new, progress.arrived_count + arrived, d_new), arrived


def episode_status(state: AgentState, progress: PathProgress, path: WaypointPath, steps, max_steps,
                   eps: float = 2.0):
    """Classify each agent's episode; returns :class:`Status` codes."""
    finished = np.asarray(progress.current_index) > path.n
    if path.mode == PathMode.GROUND_TO_GROUND:
        final = path.waypoints[..., -1, :]
        near = np.linalg.norm(state.position - final, axis=-1) < eps
        finished = finished & np.asarray(state.grounded) & near
    status = np.where(
        ~np.asarray(state.alive), Status.CRASHED,
        np.where(finished, Status.SUCCESS,
                 np.where(np.asarray(steps) >= max_steps, Status.TIMED_OUT, Status.RUNNING)))
    if status.ndim == 0:
        return Status(int(status))
    return status.astype(np.int64)
