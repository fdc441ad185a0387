"""Vectorized test-range environment with auto-reset.

One :class:`VecEnv` hosts ``n`` agents of a single locomotion mode, stepped
together. Observations and rewards leave the environment as 32-bit floats,
the same precision the wire protocol carries, so in-process and remote
collection see identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import physics
from .observation import OBS_SIZE, FrameStack, RewardParams, compute_reward, encode_observation
from .physics import Mode, VehicleParams, World, body_up
from .tasks import (PathMode, PathProgress, Status, WaypointPath, advance_waypoint, episode_status,
                    generate_path, start_progress)

# episode flags, shared with the wire protocol
DONE = 1
TRUNCATED = 2
SUCCESS = 4
CRASHED = 8


@dataclass(frozen=True)
class EnvConfig:
    mode: Mode = Mode.ZERO_G
    path_mode: PathMode = PathMode.FREE_SPACE
    n_waypoints: int = 8
    segment_range: tuple = (10.0, 25.0)
    max_steps: int = 1800
    world: World = field(default_factory=lambda: World.cube(60.0))
    vehicle: VehicleParams = field(default_factory=VehicleParams.zero_g)
    reward: RewardParams = field(default_factory=RewardParams)

    @classmethod
    def helicopter(cls, **kw) -> "EnvConfig":
        kw.setdefault("mode", Mode.HELICOPTER)
        kw.setdefault("path_mode", PathMode.GROUND_TO_GROUND)
        kw.setdefault("n_waypoints", 5)
        kw.setdefault("vehicle", VehicleParams.helicopter())
        return cls(**kw)

    @classmethod
    def zero_g(cls, **kw) -> "EnvConfig":
        return cls(**kw)

    @property
    def obs_dim(self) -> int:
        return OBS_SIZE

    @property
    def act_dim(self) -> int:
        return 5


@dataclass
class StepResult:
    obs: np.ndarray  # (n, obs_dim) float32, post-reset for finished agents
    reward: np.ndarray  # (n,) float32
    flags: np.ndarray  # (n,) uint8 episode flags
    terminal_obs: np.ndarray  # (n, obs_dim) float32; meaningful where TRUNCATED
    episode_id: np.ndarray  # (n,) id of the episode ``obs`` belongs to
    finished: list = field(default_factory=list)  # dicts describing completed episodes

    @property
    def done(self) -> np.ndarray:
        return (self.flags & DONE) != 0


class VecEnv:
    def __init__(self, config: EnvConfig, n: int, seed: int):
        self.config = config
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.stack = FrameStack(n)
        self.episode_id = np.zeros(n, dtype=np.int64)
        self.state = None

    @property
    def obs_dim(self) -> int:
        return OBS_SIZE

    def _new_episodes(self, count: int):
        cfg = self.config
        st = physics.spawn(cfg.world, cfg.mode, self.rng, count)
        paths = [generate_path(self.rng, cfg.world, cfg.path_mode, cfg.n_waypoints,
                               cfg.segment_range, start=st.position[k]).waypoints
                 for k in range(count)]
        return st, np.array(paths)

    def reset(self) -> np.ndarray:
        self.state, wps = self._new_episodes(self.n)
        self.path = WaypointPath(wps, self.config.path_mode)
        self.progress = start_progress(self.path, self.state.position)
        self.steps = np.zeros(self.n, dtype=np.int64)
        self.returns = np.zeros(self.n)
        self.unstable = np.zeros(self.n, dtype=np.int64)
        frame = encode_observation(self.state, self.path, self.progress, self.config.world)
        self.stack.reset(frame)
        return self.stack.observation()

    def step(self, actions) -> StepResult:
        cfg = self.config
        old_state, old_progress = self.state, self.progress
        a = np.asarray(actions, dtype=np.float64)
        new = physics.step(old_state, a, cfg.world, cfg.vehicle)
        if cfg.mode == Mode.HELICOPTER:
            report = physics.detect_ground_contact(new, cfg.world, cfg.vehicle)
            new = physics.resolve_contact(new, report, cfg.world, cfg.vehicle)
        progress, arrived = advance_waypoint(old_progress, new.position, self.path, cfg.reward.eps)
        reward = compute_reward((old_state, old_progress), (new, progress), arrived, cfg.reward,
                                cfg.mode, self.path, cfg.world)
        reward = reward.astype(np.float32)
        self.steps += 1
        self.returns += reward
        if cfg.mode == Mode.HELICOPTER:
            self.unstable += body_up(new.orientation)[:, 2] <= 0.0
        status = episode_status(new, progress, self.path, self.steps, cfg.max_steps, cfg.reward.eps)

        frame = encode_observation(new, self.path, progress, cfg.world, prev_q=old_state.orientation)
        self.stack.push(frame)
        self.state, self.progress = new, progress

        done = status != Status.RUNNING
        flags = np.zeros(self.n, dtype=np.uint8)
        flags[done] |= DONE
        flags[status == Status.TIMED_OUT] |= TRUNCATED
        flags[status == Status.SUCCESS] |= SUCCESS
        flags[status == Status.CRASHED] |= CRASHED
        obs = self.stack.observation()
        terminal = obs.copy()
        finished = []
        if np.any(done):
            idx = np.flatnonzero(done)
            for k in idx:
                finished.append({
                    "agent": int(k), "episode_id": int(self.episode_id[k]),
                    "return": float(self.returns[k]), "length": int(self.steps[k]),
                    "status": Status(int(status[k])), "arrived": int(progress.arrived_count[k]),
                    "unstable_steps": int(self.unstable[k]),
                })
            self._reset_rows(idx)
            obs = self.stack.observation()
        return StepResult(obs, reward, flags, terminal, self.episode_id.copy(), finished)

    def _reset_rows(self, idx: np.ndarray):
        st, wps = self._new_episodes(len(idx))
        s = self.state.copy()
        for name in ("position", "velocity", "acceleration", "orientation", "angular_velocity",
                     "alive", "grounded"):
            getattr(s, name)[idx] = getattr(st, name)
        self.state = s
        waypoints = self.path.waypoints.copy()
        waypoints[idx] = wps
        self.path = WaypointPath(waypoints, self.config.path_mode)
        fresh = start_progress(WaypointPath(wps, self.config.path_mode), st.position)
        ci = self.progress.current_index.copy()
        ac = self.progress.arrived_count.copy()
        pd = self.progress.prev_distance.copy()
        ci[idx], ac[idx], pd[idx] = fresh.current_index, fresh.arrived_count, fresh.prev_distance
        self.progress = PathProgress(ci, ac, pd)
        self.steps[idx] = 0
        self.returns[idx] = 0.0
        self.unstable[idx] = 0
        self.episode_id[idx] += 1
        mask = np.zeros(self.n, dtype=bool)
        mask[idx] = True
        frame = encode_observation(self.state, self.path, self.progress, self.config.world)
        self.stack.reset(frame, mask)


@dataclass(frozen=True)
class PointMassConfig:
    """1-D integrator toy task: steer ``x`` to 0; reward is ``-|x|``."""
    max_steps: int = 50
    speed: float = 0.1
    start_range: float = 1.0

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def act_dim(self) -> int:
        return 1


class PointMassEnv:
    def __init__(self, config: PointMassConfig, n: int, seed: int):
        self.config = config
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.episode_id = np.zeros(n, dtype=np.int64)

    @property
    def obs_dim(self) -> int:
        return 2

    def _obs(self):
        return np.stack([self.x, self.steps / self.config.max_steps], axis=-1).astype(np.float32)

    def reset(self):
        r = self.config.start_range
        self.x = self.rng.uniform(-r, r, self.n)
        self.steps = np.zeros(self.n)
        self.returns = np.zeros(self.n)
        return self._obs()

    def step(self, actions) -> StepResult:
        a = np.clip(np.asarray(actions, dtype=np.float64)[:, 0], -1.0, 1.0)
        self.x = self.x + self.config.speed * a
        reward = (-np.abs(self.x)).astype(np.float32)
        self.steps += 1
        self.returns += reward
        done = self.steps >= self.config.max_steps
        flags = np.where(done, DONE | TRUNCATED, 0).astype(np.uint8)
        terminal = self._obs()
        finished = []
        for k in np.flatnonzero(done):
            finished.append({"agent": int(k), "episode_id": int(self.episode_id[k]),
                             "return": float(self.returns[k]), "length": int(self.steps[k]),
                             "status": Status.TIMED_OUT, "arrived": 0, "unstable_steps": 0})
            r = self.config.start_range
            self.x[k] = self.rng.uniform(-r, r)
            self.steps[k] = 0
            self.returns[k] = 0.0
            self.episode_id[k] += 1
        return StepResult(self._obs(), reward, flags, terminal, self.episode_id.copy(), finished)


def make_env(config, n: int, seed: int):
    if isinstance(config, PointMassConfig):
        return PointMassEnv(config, n, seed)
    return VecEnv(config, n, seed)
