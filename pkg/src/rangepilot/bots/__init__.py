"""Scripted bots: objective scripts, their interpreter, and locomotion hand-off."""

from .driver import Bot, BotDecision
from .locomotion import (SCRIPTED, Locomotion, NoModelError, heading_error, scripted_locomotion,
                         select_locomotion)
from .objectives import BotRuntime, Command, CommandKind, start_runtime, tick_objectives
from .script import ObjectiveScript, ScriptError, parse_script, same_graph, serialize

__all__ = ["SCRIPTED", "Bot", "BotDecision", "BotRuntime", "Command", "CommandKind", "Locomotion",
           "NoModelError", "ObjectiveScript", "ScriptError", "heading_error", "parse_script", "same_graph",
           "scripted_locomotion", "select_locomotion", "serialize", "start_runtime", "tick_objectives"]
