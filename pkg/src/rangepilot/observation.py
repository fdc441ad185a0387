"""Ego-centric observation encoding and the waypoint-navigation reward.

Frame layout (version 1, 24 values, in order):

=====================  ====  =============================================
slot                   size  normalization
=====================  ====  =============================================
waypoint_rel           3     body-frame (w[i] - p) / largest box extent, clipped
next_waypoint_rel      3     body-frame (w[i+1] - p) / largest box extent, clipped
waypoint_distance      1     |w[i] - p| / box diagonal
line_distance          1     distance to line w[i-1] -> w[i] / box diagonal
ground_distance        1     (p.z - ground) / box height; 0 in zero-g
velocity               3     body-frame v / largest box extent (per second), clipped
acceleration           3     body-frame a / largest box extent (per second^2), clipped
orientation            4     unit quaternion (w, x, y, z)
orientation_delta      4     q[t] - q[t-1], component-wise, clipped
alignment              1     XY-plane cosine between heading and waypoint
=====================  ====  =============================================

Vectors are expressed in the agent's body frame (forward, left, up), so a
policy does not have to learn to rotate world offsets by its own attitude.
The orientation quaternion still carries the world attitude.

The policy sees a stack of the three most recent frames, oldest first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import AgentState, Mode, World, body_forward, body_up, to_body
from .tasks import PathProgress, WaypointPath, current_waypoint

OBS_LAYOUT_VERSION = 1
OBS_LAYOUT = (
    ("waypoint_rel", 3),
    ("next_waypoint_rel", 3),
    ("waypoint_distance", 1),
    ("line_distance", 1),
    ("ground_distance", 1),
    ("velocity", 3),
    ("acceleration", 3),
    ("orientation", 4),
    ("orientation_delta", 4),
    ("alignment", 1),
)
FRAME_SIZE = sum(n for _, n in OBS_LAYOUT)
STACK_SIZE = 3
OBS_SIZE = FRAME_SIZE * STACK_SIZE

_offsets = {}
_o = 0
for _name, _n in OBS_LAYOUT:
    _offsets[_name] = slice(_o, _o + _n)
    _o += _n
SLOTS = dict(_offsets)


class ObservationError(ValueError):
    pass


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 0.1
    beta: float = 0.5
    gamma: float = 1.0
    psi: float = 10.0
    eps: float = 2.0
    d_l_floor: float = 0.1
    stability_penalty: float = 1.0

    def __post_init__(self):
        if not self.d_l_floor > 0:
            raise ValueError("d_l_floor must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @classmethod
    def progress_weighted(cls, **kw) -> "RewardParams":
        """Weights that train reliably: progress and arrival only.

        With the default weights the per-step line and alignment bonuses
        outweigh progress, and policies settle on facing the target and hovering.
        """
        kw.setdefault("alpha", 0.0)
        kw.setdefault("beta", 0.0)
        kw.setdefault("gamma", 100.0)
        return cls(**kw)


def point_line_distance(p, w_prev, w_cur):
    """Distance from ``p`` to the infinite line through ``w_prev`` and ``w_cur``.

    Falls back to ``|p - w_cur|`` when the two waypoints coincide.
    """
    p = np.asarray(p, dtype=np.float64)
    seg = np.asarray(w_cur, dtype=np.float64) - w_prev
    seg_len = np.linalg.norm(seg, axis=-1)
    cross = np.linalg.norm(np.cross(p - w_prev, seg), axis=-1)
    degenerate = seg_len < 1e-9
    line = cross / np.where(degenerate, 1.0, seg_len)
    return np.where(degenerate, np.linalg.norm(p - w_cur, axis=-1), line)


def alignment(state: AgentState, w_cur):
    fwd = body_forward(state.orientation)[..., :2]
    to = (np.asarray(w_cur, dtype=np.float64) - state.position)[..., :2]
    nf = np.linalg.norm(fwd, axis=-1)
    nt = np.linalg.norm(to, axis=-1)
    ok = (nf >= 1e-9) & (nt >= 1e-9)
    dot = np.sum(fwd * to, axis=-1) / np.where(ok, nf * nt, 1.0)
    return np.where(ok, np.clip(dot, -1.0, 1.0), 0.0)


def _leg(path: WaypointPath, index):
    i = np.clip(np.asarray(index), 1, path.n)
    return current_waypoint(path, i - 1), current_waypoint(path, i)


def encode_observation(state: AgentState, path: WaypointPath, progress: PathProgress, world: World,
                       prev_q=None) -> np.ndarray:
    """Encode one 24-wide frame per agent (float64).

    ``prev_q`` is the orientation at the previous frame; ``None`` means this
    is the first frame of an episode and the orientation delta is zero.
    """
    q = state.orientation
    p = state.position
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q)) and np.all(np.isfinite(state.velocity))
            and np.all(np.isfinite(state.acceleration))):
        raise ObservationError("non-finite agent state")
    i = np.asarray(progress.current_index)
    w_prev, w_cur = _leg(path, i)
    w_next = current_waypoint(path, np.minimum(np.clip(i, 1, path.n) + 1, path.n))
    scale = float(np.max(world.extent))
    diag = world.diagonal

    frame = np.empty(p.shape[:-1] + (FRAME_SIZE,))
    frame[..., SLOTS["waypoint_rel"]] = np.clip(to_body(q, w_cur - p) / scale, -1.0, 1.0)
    frame[..., SLOTS["next_waypoint_rel"]] = np.clip(to_body(q, w_next - p) / scale, -1.0, 1.0)
    frame[..., 6] = np.linalg.norm(w_cur - p, axis=-1) / diag
    frame[..., 7] = point_line_distance(p, w_prev, w_cur) / diag
    if state.mode == Mode.ZERO_G:
        frame[..., 8] = 0.0
    else:
        frame[..., 8] = (p[..., 2] - world.ground_height) / world.extent[2]
    frame[..., SLOTS["velocity"]] = np.clip(to_body(q, state.velocity) / scale, -1.0, 1.0)
    frame[..., SLOTS["acceleration"]] = np.clip(to_body(q, state.acceleration) / scale, -1.0, 1.0)
    frame[..., SLOTS["orientation"]] = q
    if prev_q is None:
        frame[..., SLOTS["orientation_delta"]] = 0.0
    else:
        frame[..., SLOTS["orientation_delta"]] = np.clip(q - prev_q, -1.0, 1.0)
    frame[..., 23] = alignment(state, w_cur)
    return frame


class FrameStack:
    """Sliding window over the last ``STACK_SIZE`` frames for ``n`` agents."""

    def __init__(self, n: int, frame_size: int = FRAME_SIZE, depth: int = STACK_SIZE):
        self.frames = np.zeros((n, depth, frame_size))

    def reset(self, frame: np.ndarray, mask=None):
        if mask is None:
            self.frames[:] = frame[:, None, :]
        else:
            self.frames[mask] = frame[mask][:, None, :]

    def push(self, frame: np.ndarray):
        self.frames[:, :-1] = self.frames[:, 1:]
        self.frames[:, -1] = frame

    def observation(self) -> np.ndarray:
        return self.frames.reshape(self.frames.shape[0], -1).astype(np.float32)


# -- reward ------------------------------------------------------------------

def line_term(state: AgentState, path: WaypointPath, index, params: RewardParams):
    w_prev, w_cur = _leg(path, index)
    d_l = point_line_distance(state.position, w_prev, w_cur)
    return params.alpha / np.maximum(d_l, params.d_l_floor)


def alignment_term(state: AgentState, path: WaypointPath, index, params: RewardParams):
    return params.beta * alignment(state, _leg(path, index)[1])


def progress_term(prev_distance, state: AgentState, path: WaypointPath, index, world: World,
                  params: RewardParams):
    d = np.linalg.norm(_leg(path, index)[1] - state.position, axis=-1)
    return params.gamma * (prev_distance - d) / world.diagonal


def arrival_term(arrived, params: RewardParams):
    return params.psi * np.asarray(arrived, dtype=np.float64)


def stability_term(state: AgentState, mode: Mode, params: RewardParams):
    if mode != Mode.HELICOPTER:
        return np.zeros(state.position.shape[:-1])
    unstable = body_up(state.orientation)[..., 2] <= 0.0
    return -params.stability_penalty * unstable.astype(np.float64)


def compute_reward(prev: tuple[AgentState, PathProgress], cur: tuple[AgentState, PathProgress],
                   arrived, params: RewardParams, mode: Mode, path: WaypointPath, world: World):
    """Per-step reward for consecutive ``(state, progress)`` pairs.

    All terms are measured against the waypoint that was active before this
    step's arrival check, so an arrival step still credits the approach.
    """
    _, prev_progress = prev
    state, _ = cur
    index = prev_progress.current_index
    return (line_term(state, path, index, params)
            + alignment_term(state, path, index, params)
            + progress_term(prev_progress.prev_distance, state, path, index, world, params)
            + arrival_term(arrived, params)
            + stability_term(state, mode, params))
