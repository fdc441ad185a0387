"""Objective interpreter: walks a script graph and emits high-level commands."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..physics import Mode
from .script import SELECTED, ObjectiveScript

ARRIVAL_RADIUS = 1.0
_VEHICLE_MODES = {"helicopter": Mode.HELICOPTER, "zero_g": Mode.ZERO_G}


class CommandKind(enum.Enum):
    MOVE_TO = "move_to"
    HOLD = "hold"
    ENTER_VEHICLE = "enter_vehicle"
    IDLE = "idle"


@dataclass(frozen=True)
class Command:
    kind: CommandKind
    issued_tick: int
    target: tuple | None = None
    radius: float = 0.0
    vehicle: str | None = None


@dataclass
class BotRuntime:
    """Mutable interpreter state for one bot."""
    node: str
    selected: tuple | None = None
    deadline: float | None = None
    command: Command = Command(CommandKind.IDLE, 0)
    tick: int = 0
    fired: int = 0  # select_random firings, handy for statistics


def start_runtime(script: ObjectiveScript) -> BotRuntime:
    return BotRuntime(script.entry)


def _resolve(target, rt: BotRuntime) -> tuple:
    return rt.selected if target == SELECTED else tuple(target)


def _issue(rt: BotRuntime, kind: CommandKind, **kw) -> None:
    new = Command(kind, rt.tick, **kw)
    old = rt.command
    if (old.kind, old.target, old.radius, old.vehicle) != (new.kind, new.target, new.radius, new.vehicle):
        rt.command = new


def tick_objectives(script: ObjectiveScript, rt: BotRuntime, rng: np.random.Generator, now_s: float,
                    position=None, mode: Mode | None = None,
                    arrival_radius: float = ARRIVAL_RADIUS) -> Command:
    """Advance ``rt`` to simulated time ``now_s`` and return the current command.

    ``position`` and ``mode`` describe the bot; without a position, move
    objectives never complete. At most ``len(nodes) + 1`` transitions happen
    per tick, so a re-entered timer is re-armed at the tick it fired.
    """
    rt.tick += 1
    pos = None if position is None else np.asarray(position, dtype=float)
    for _ in range(len(script.nodes) + 1):
        node = script.nodes[rt.node]
        kind = node.kind
        if kind == "timer":
            if rt.deadline is None:
                rt.deadline = now_s + (node.min_s if node.min_s == node.max_s
                                       else rng.uniform(node.min_s, node.max_s))
            if now_s < rt.deadline:
                break
            rt.deadline = None
        elif kind == "select_random":
            pts = script.points[node.point_set]
            rt.selected = pts[int(rng.integers(len(pts)))]
            rt.fired += 1
        elif kind == "defend":
            _issue(rt, CommandKind.HOLD, target=_resolve(node.target, rt), radius=node.radius)
            if node.next is None:
                break
        elif kind in ("move", "navigate_volume"):
            if kind == "navigate_volume" and mode != _VEHICLE_MODES[node.vehicle]:
                _issue(rt, CommandKind.ENTER_VEHICLE, vehicle=node.vehicle)
                break
            target = _resolve(node.target, rt)
            _issue(rt, CommandKind.MOVE_TO, target=target)
            if pos is None or np.linalg.norm(pos - np.asarray(target)) >= arrival_radius:
                break
        else:  # idle
            _issue(rt, CommandKind.IDLE)
            break
        if node.next is None:
            break
        rt.node = node.next
    return rt.command
