"""Fixed-timestep rigid-body simulator for the flight test ranges.

Two locomotion regimes are modelled: gravity-bound helicopter flight and
zero-gravity 6-DOF movement. A kinematic on-foot mode supports the scripted
bots. Forces are mass-normalized (N/kg) everywhere.

Every function accepts either a single agent (vectors of shape ``(3,)``) or a
batch (shape ``(n, 3)``); the batch dimension simply rides along.

Integration holds the control forces constant over a step and solves the
linear-drag ODE ``v' = a - c v`` exactly for that step, so a constant-input
trajectory agrees with the analytic solution to rounding error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81
CONTACT_TOLERANCE = 0.05


class Mode(enum.IntEnum):
    HELICOPTER = 0
    ZERO_G = 1
    ON_FOOT = 2


class PhysicsError(ValueError):
    pass


@dataclass(frozen=True)
class World:
    bounds_min: np.ndarray = field(default_factory=lambda: np.array([-30.0, -30.0, 0.0]))
    bounds_max: np.ndarray = field(default_factory=lambda: np.array([30.0, 30.0, 60.0]))
    ground_height: float = 0.0
    dt: float = 1.0 / 30.0

    def __post_init__(self):
        lo = np.asarray(self.bounds_min, dtype=np.float64)
        hi = np.asarray(self.bounds_max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise PhysicsError("bounds must be 3-vectors")
        if not np.all(lo < hi):
            raise PhysicsError("bounds_min must be < bounds_max component-wise")
        if not self.dt > 0:
            raise PhysicsError("dt must be positive")
        if not lo[2] <= self.ground_height < hi[2]:
            raise PhysicsError("ground_height must lie inside the vertical bounds")
        object.__setattr__(self, "bounds_min", lo)
        object.__setattr__(self, "bounds_max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.bounds_max - self.bounds_min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @classmethod
    def cube(cls, side: float, ground_height: float = 0.0, dt: float = 1.0 / 30.0) -> "World":
        h = side / 2.0
        return cls(np.array([-h, -h, ground_height]), np.array([h, h, ground_height + side]),
                   ground_height, dt)


@dataclass(frozen=True)
class VehicleParams:
    max_thrust: float = 20.0
    torque_gains: tuple = (2.0, 2.0, 2.0)  # pitch, yaw, roll
    linear_drag: float = 0.3
    angular_drag: float = 2.0
    gravity: float = GRAVITY
    crash_speed: float = 3.0
    walk_speed: float = 4.0
    turn_rate: float = np.pi

    def __post_init__(self):
        gains = tuple(float(g) for g in self.torque_gains)
        object.__setattr__(self, "torque_gains", gains)
        if len(gains) != 3:
            raise PhysicsError("torque_gains needs (pitch, yaw, roll)")
        values = (self.max_thrust, *gains, self.linear_drag, self.angular_drag, self.gravity,
                  self.walk_speed, self.turn_rate)
        if any(v < 0 or not np.isfinite(v) for v in values):
            raise PhysicsError("vehicle gains must be finite and >= 0")
        if not self.crash_speed > 0:
            raise PhysicsError("crash_speed must be positive")

    @classmethod
    def helicopter(cls, **kw) -> "VehicleParams":
        return cls(**kw)

    @classmethod
    def zero_g(cls, **kw) -> "VehicleParams":
        kw.setdefault("gravity", 0.0)
        return cls(**kw)


@dataclass(frozen=True)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    orientation: np.ndarray  # (w, x, y, z)
    angular_velocity: np.ndarray  # body frame, rad/s
    alive: np.ndarray
    grounded: np.ndarray
    mode: Mode

    @property
    def batch_shape(self) -> tuple:
        return self.position.shape[:-1]

    def __getitem__(self, idx) -> "AgentState":
        """Select agents from a batched state."""
        return AgentState(self.position[idx], self.velocity[idx], self.acceleration[idx],
                          self.orientation[idx], self.angular_velocity[idx],
                          self.alive[idx], self.grounded[idx], self.mode)

    def copy(self) -> "AgentState":
        return AgentState(self.position.copy(), self.velocity.copy(), self.acceleration.copy(),
                          self.orientation.copy(), self.angular_velocity.copy(),
                          np.array(self.alive, copy=True), np.array(self.grounded, copy=True),
                          self.mode)


@dataclass(frozen=True)
class ContactReport:
    touching: np.ndarray
    impact_speed: np.ndarray
    inverted: np.ndarray


def make_state(position, mode: Mode, orientation=None, velocity=None, *,
               grounded=False, alive=True) -> AgentState:
    p = np.array(position, dtype=np.float64)
    zeros = np.zeros_like(p)
    if orientation is None:
        q = np.zeros(p.shape[:-1] + (4,))
        q[..., 0] = 1.0
    else:
        q = np.array(orientation, dtype=np.float64)
    v = zeros.copy() if velocity is None else np.array(velocity, dtype=np.float64)
    shape = p.shape[:-1]
    return AgentState(p, v, zeros.copy(), q, zeros.copy(),
                      np.full(shape, alive, dtype=bool), np.full(shape, grounded, dtype=bool), mode)


# -- quaternion helpers ------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x, with its limit 1/2 at x = 0
    safe = np.where(angle > 1e-12, angle, 1.0)
    scale = np.where(angle > 1e-12, np.sin(half) / safe, 0.5)
    return np.concatenate([np.cos(half), scale * rotvec], axis=-1)


def rotate(q: np.ndarray, v) -> np.ndarray:
    """Rotate body-frame vector(s) ``v`` into the world frame by ``q``."""
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def to_body(q: np.ndarray, v) -> np.ndarray:
    """Express world-frame vector(s) ``v`` in the body frame of ``q``."""
    conj = q * np.array([1.0, -1.0, -1.0, -1.0])
    return rotate(conj, v)


def body_forward(q):
    return rotate(q, np.array([1.0, 0.0, 0.0]))


def body_right(q):
    return rotate(q, np.array([0.0, -1.0, 0.0]))


def body_up(q):
    return rotate(q, np.array([0.0, 0.0, 1.0]))


def yaw_quat(yaw) -> np.ndarray:
    return quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)


# -- integration -------------------------------------------------------------

def _drag_step(v0, accel, drag, dt):
    """Exact one-step solution of ``v' = accel - drag*v`` with accel held constant."""
    if drag > 0:
        decay = np.exp(-drag * dt)
        growth = (1.0 - decay) / drag
        v1 = v0 * decay + accel * growth
        dx = v0 * growth + accel * (dt - growth) / drag
    else:
        v1 = v0 + accel * dt
        dx = v0 * dt + 0.5 * accel * dt * dt
    return v1, dx


def _check_finite(state: AgentState, action) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != 5:
        raise PhysicsError(f"action must have 5 components, got shape {action.shape}")
    for name in ("position", "velocity", "orientation", "angular_velocity"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise PhysicsError(f"non-finite {name} in state")
    if not np.all(np.isfinite(action)):
        raise PhysicsError("non-finite action")
    return np.clip(action, -1.0, 1.0)


def _torque_accel(pitch_yaw_roll, params: VehicleParams):
    g_pitch, g_yaw, g_roll = params.torque_gains
    pyr = pitch_yaw_roll
    # body axes: x = roll, y = pitch, z = yaw
    return np.stack([pyr[..., 2] * g_roll, pyr[..., 0] * g_pitch, pyr[..., 1] * g_yaw], axis=-1)


def _integrate(state: AgentState, lin_accel, ang_accel, world: World, params: VehicleParams):
    dt = world.dt
    v1, dx = _drag_step(state.velocity, lin_accel, params.linear_drag, dt)
    w1, dtheta = _drag_step(state.angular_velocity, ang_accel, params.angular_drag, dt)
    q1 = quat_mul(state.orientation, quat_from_rotvec(dtheta))
    q1 = q1 / np.linalg.norm(q1, axis=-1, keepdims=True)
    p1 = state.position + dx
    return p1, v1, w1, q1


def _clamp_box(p, v, lo, hi):
    below = p < lo
    above = p > hi
    hit = below | above
    p = np.clip(p, lo, hi)
    v = np.where(hit, 0.0, v)
    return p, v


def _freeze_dead(old: AgentState, new: AgentState) -> AgentState:
    alive = np.asarray(old.alive)
    if np.all(alive):
        return new
    m3 = alive[..., None]
    return AgentState(
        np.where(m3, new.position, old.position),
        np.where(m3, new.velocity, old.velocity),
        np.where(m3, new.acceleration, old.acceleration),
        np.where(m3, new.orientation, old.orientation),
        np.where(m3, new.angular_velocity, old.angular_velocity),
        old.alive.copy() if isinstance(old.alive, np.ndarray) else np.asarray(old.alive),
        np.where(alive, new.grounded, old.grounded),
        old.mode,
    )


def step_helicopter(state: AgentState, action, world: World, params: VehicleParams) -> AgentState:
    """Advance helicopter agents one tick.

    Action layout is (throttle, pitch, yaw, roll, fire); fire has no physical
    effect. A grounded helicopter whose vertical thrust cannot beat gravity
    stays parked. Ground penetration is clamped to the ground plane but the
    vertical velocity is kept so :func:`detect_ground_contact` can read the
    impact speed; :func:`resolve_contact` then lands or kills the agent.
    """
    if state.mode != Mode.HELICOPTER:
        raise PhysicsError("step_helicopter requires Helicopter mode")
    action = _check_finite(state, action)
    thrust = params.max_thrust * (action[..., 0] + 1.0) * 0.5
    up = body_up(state.orientation)
    lin_accel = thrust[..., None] * up
    lin_accel = lin_accel - np.array([0.0, 0.0, params.gravity])
    ang_accel = _torque_accel(action[..., 1:4], params)

    p1, v1, w1, q1 = _integrate(state, lin_accel, ang_accel, world, params)

    parked = np.asarray(state.grounded) & (lin_accel[..., 2] <= 0.0)
    pk = parked[..., None]
    p1 = np.where(pk, state.position, p1)
    v1 = np.where(pk, 0.0, v1)
    w1 = np.where(pk, 0.0, w1)
    q1 = np.where(pk, state.orientation, q1)

    lo = world.bounds_min.copy()
    lo[2] = -np.inf
    p1, v1 = _clamp_box(p1, v1, lo, world.bounds_max)
    p1[..., 2] = np.maximum(p1[..., 2], world.ground_height)

    accel = (v1 - state.velocity) / world.dt
    new = AgentState(p1, v1, accel, q1, w1, np.array(state.alive, copy=True), parked, state.mode)
    return _freeze_dead(state, new)


def step_zero_g(state: AgentState, action, world: World, params: VehicleParams) -> AgentState:
    """Advance zero-gravity agents one tick.

    Action layout is (forward, strafe, pitch, yaw, roll).
    """
    if state.mode != Mode.ZERO_G:
        raise PhysicsError("step_zero_g requires ZeroG mode")
    action = _check_finite(state, action)
    q = state.orientation
    lin_accel = params.max_thrust * (action[..., 0:1] * body_forward(q) + action[..., 1:2] * body_right(q))
    if params.gravity:
        lin_accel = lin_accel - np.array([0.0, 0.0, params.gravity])
    ang_accel = _torque_accel(action[..., 2:5], params)
    p1, v1, w1, q1 = _integrate(state, lin_accel, ang_accel, world, params)
    p1, v1 = _clamp_box(p1, v1, world.bounds_min, world.bounds_max)
    accel = (v1 - state.velocity) / world.dt
    grounded = np.zeros_like(np.asarray(state.grounded))
    new = AgentState(p1, v1, accel, q1, w1, np.array(state.alive, copy=True), grounded, state.mode)
    return _freeze_dead(state, new)


def step_on_foot(state: AgentState, action, world: World, params: VehicleParams) -> AgentState:
    """Kinematic ground-plane walking: heading turns with yaw, moves with forward/strafe."""
    if state.mode != Mode.ON_FOOT:
        raise PhysicsError("step_on_foot requires OnFoot mode")
    action = _check_finite(state, action)
    dt = world.dt
    turn = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), action[..., 3] * params.turn_rate * dt)
    q1 = quat_mul(turn, state.orientation)
    q1 = q1 / np.linalg.norm(q1, axis=-1, keepdims=True)
    fwd = body_forward(q1)
    fwd[..., 2] = 0.0
    fwd /= np.maximum(np.linalg.norm(fwd, axis=-1, keepdims=True), 1e-12)
    right = np.stack([fwd[..., 1], -fwd[..., 0], np.zeros_like(fwd[..., 0])], axis=-1)
    v1 = params.walk_speed * (action[..., 0:1] * fwd + action[..., 1:2] * right)
    p1 = state.position + v1 * dt
    p1, v1 = _clamp_box(p1, v1, world.bounds_min, world.bounds_max)
    p1[..., 2] = world.ground_height
    v1[..., 2] = 0.0
    accel = (v1 - state.velocity) / dt
    new = AgentState(p1, v1, accel, q1, np.zeros_like(state.angular_velocity),
                     np.array(state.alive, copy=True), np.ones_like(np.asarray(state.grounded)),
                     state.mode)
    return _freeze_dead(state, new)


STEP_FUNCTIONS = {
    Mode.HELICOPTER: step_helicopter,
    Mode.ZERO_G: step_zero_g,
    Mode.ON_FOOT: step_on_foot,
}


def step(state: AgentState, action, world: World, params: VehicleParams) -> AgentState:
    return STEP_FUNCTIONS[state.mode](state, action, world, params)


def detect_ground_contact(state: AgentState, world: World, params: VehicleParams) -> ContactReport:
    touching = state.position[..., 2] <= world.ground_height + CONTACT_TOLERANCE
    inverted = body_up(state.orientation)[..., 2] <= 0.0
    impact = np.where(touching, np.abs(state.velocity[..., 2]), 0.0)
    return ContactReport(np.asarray(touching), np.asarray(impact), np.asarray(inverted))


def resolve_contact(state: AgentState, report: ContactReport, world: World,
                    params: VehicleParams) -> AgentState:
    """Apply crash/landing semantics to a helicopter after a step.

    Contact kills the agent when the impact is faster than ``crash_speed`` or
    the body is inverted. A survivable contact while descending (or at rest)
    becomes a landing: the agent is parked on the ground.
    """
    alive = np.asarray(state.alive)
    crash = alive & report.touching & ((report.impact_speed > params.crash_speed) | report.inverted)
    land = alive & report.touching & ~crash & (state.velocity[..., 2] <= 0.0)
    if not np.any(crash) and not np.any(land):
        return state
    l3 = land[..., None]
    p = state.position.copy()
    p[..., 2] = np.where(land, world.ground_height, p[..., 2])
    return AgentState(
        p,
        np.where(l3, 0.0, state.velocity),
        state.acceleration,
        state.orientation,
        np.where(l3, 0.0, state.angular_velocity),
        alive & ~crash,
        np.asarray(state.grounded) | land,
        state.mode,
    )


def spawn(world: World, mode: Mode, rng: np.random.Generator, n: int | None = None) -> AgentState:
    """Sample a fresh agent (or ``n`` agents).

    Helicopter and on-foot agents start level and grounded at a uniform ground
    position with a uniform heading; zero-g agents get a uniform position and
    a uniform random orientation.
    """
    shape = () if n is None else (n,)
    lo, hi = world.bounds_min, world.bounds_max
    if mode == Mode.ZERO_G:
        p = rng.uniform(lo, hi, size=shape + (3,))
        q = rng.standard_normal(shape + (4,))
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        return make_state(p, mode, orientation=q)
    xy = rng.uniform(lo[:2], hi[:2], size=shape + (2,))
    p = np.concatenate([xy, np.full(shape + (1,), world.ground_height)], axis=-1)
    q = yaw_quat(rng.uniform(-np.pi, np.pi, size=shape))
    return make_state(p, mode, orientation=q, grounded=True)
