"""Scripted on-foot steering and the scripted/learned locomotion switch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..observation import OBS_LAYOUT_VERSION
from ..physics import AgentState, Mode, body_forward

STEER_GAIN = 4.0
ARRIVAL_RADIUS = 0.5
SLOW_RADIUS = 2.0
LEARNED_MODES = (Mode.HELICOPTER, Mode.ZERO_G)


class NoModelError(LookupError):
    """A learned controller is required but none is registered for the mode."""


def heading_error(state: AgentState, target) -> float:
    """Signed XY angle from the agent's heading to ``target`` (positive = turn left)."""
    fwd = body_forward(state.orientation)
    to = np.asarray(target, dtype=float) - state.position
    return math.atan2(fwd[0] * to[1] - fwd[1] * to[0], fwd[0] * to[0] + fwd[1] * to[1])


def scripted_locomotion(state: AgentState, target, *, arrival_radius: float = ARRIVAL_RADIUS,
                        slow_radius: float = SLOW_RADIUS, gain: float = STEER_GAIN) -> np.ndarray:
    """Proportional walking controller for on-foot agents.

    Yaw turns toward the target; forward speed scales with how well the agent
    faces it and eases off inside ``slow_radius``. Everything is zero inside
    ``arrival_radius``. Layout matches the zero-g action vector
    (forward, strafe, pitch, yaw, roll).
    """
    action = np.zeros(5)
    to = np.asarray(target, dtype=float)[:2] - state.position[:2]
    dist = float(np.hypot(*to))
    if dist < arrival_radius:
        return action
    err = heading_error(state, target)
    action[3] = np.clip(gain * err, -1.0, 1.0)
    action[0] = max(0.0, math.cos(err)) * min(1.0, dist / slow_radius)
    return action


@dataclass(frozen=True)
class Locomotion:
    learned: bool
    model: object = None

    @property
    def name(self) -> str:
        return "learned" if self.learned else "scripted"


SCRIPTED = Locomotion(False)


def select_locomotion(state: AgentState, command=None, models: dict | None = None) -> Locomotion:
    """Learned control inside a vehicle, scripted control on foot.

    ``models`` maps :class:`Mode` to an inference model. A vehicle mode with
    no registered model, or one built for another observation layout, is an
    error rather than a silent fall back to scripted control.
    """
    mode = Mode(state.mode)
    if mode not in LEARNED_MODES:
        return SCRIPTED
    model = (models or {}).get(mode)
    if model is None:
        raise NoModelError(f"no learned model registered for {mode.name}")
    layout = getattr(model, "obs_layout_version", OBS_LAYOUT_VERSION)
    if layout != OBS_LAYOUT_VERSION:
        raise NoModelError(f"model for {mode.name} uses observation layout {layout}, "
                           f"expected {OBS_LAYOUT_VERSION}")
    return Locomotion(True, model)
