"""One bot: objective interpreter plus per-tick locomotion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..observation import FrameStack, encode_observation
from ..physics import AgentState, Mode, World
from ..tasks import PathMode, WaypointPath, start_progress
from .locomotion import Locomotion, scripted_locomotion, select_locomotion
from .objectives import Command, CommandKind, start_runtime, tick_objectives
from .script import ObjectiveScript


@dataclass(frozen=True)
class BotDecision:
    command: Command
    locomotion: Locomotion
    action: np.ndarray


class _Leg:
    """Single-leg path from the hand-over point to the target; the target stays current."""

    def __init__(self, state: AgentState, target, world: World):
        wps = np.stack([state.position, np.asarray(target, dtype=float)])
        self.path = WaypointPath(wps, PathMode.FREE_SPACE)
        self.progress = start_progress(self.path, state.position)
        self.stack = FrameStack(1)
        self.prev_q = None
        self.world = world
        self.key = (tuple(target), state.mode)

    def observe(self, state: AgentState) -> np.ndarray:
        frame = encode_observation(state, self.path, self.progress, self.world, self.prev_q)
        if self.prev_q is None:
            self.stack.reset(frame[None])
        else:
            self.stack.push(frame[None])
        self.prev_q = state.orientation.copy()
        return self.stack.observation()[0]


class Bot:
    """Drive one agent from an objective script.

    ``models`` maps :class:`Mode` to an exported inference model. Each call to
    :meth:`tick` decides the locomotion source from the state's mode at that
    tick alone, so the switch to learned control happens on the first tick
    in the pilot seat.
    """

    def __init__(self, script: ObjectiveScript, world: World, *, seed: int = 0, models: dict | None = None):
        self.script = script
        self.world = world
        self.models = dict(models or {})
        self.rng = np.random.default_rng(seed)
        self.runtime = start_runtime(script)
        self._leg: _Leg | None = None

    def tick(self, state: AgentState, now_s: float) -> BotDecision:
        cmd = tick_objectives(self.script, self.runtime, self.rng, now_s, state.position, Mode(state.mode))
        loco = select_locomotion(state, cmd, self.models)
        target = cmd.target if cmd.kind in (CommandKind.MOVE_TO, CommandKind.HOLD) else None
        if target is None:
            self._leg = None
            return BotDecision(cmd, loco, np.zeros(5))
        if not loco.learned:
            self._leg = None
            radius = cmd.radius if cmd.kind == CommandKind.HOLD else 0.5
            return BotDecision(cmd, loco, scripted_locomotion(state, target, arrival_radius=max(radius, 0.5)))
        if self._leg is None or self._leg.key != (tuple(target), state.mode):
            self._leg = _Leg(state, target, self.world)
        action = np.array(loco.model.infer(self._leg.observe(state)), dtype=float)
        return BotDecision(cmd, loco, action)
