"""Objective-script DSL: parsing, validation and serialization.

A script is a small directed graph of behaviour nodes. Grammar, one
statement per line, ``#`` starts a comment::

    version 1                                   (optional, must come first)
    points <set> = [(x, y, z), (x, y, z), ...]
    node <id>: timer <min_s> <max_s> [-> <id>]
    node <id>: select_random <set> [-> <id>]
    node <id>: defend <target> radius <r> [-> <id>]
    node <id>: move <target> [-> <id>]
    node <id>: navigate_volume <helicopter|zero_g> to <target> [-> <id>]
    node <id>: idle
    entry <id>

where ``<target>`` is ``$selected`` (the point bound by the latest
``select_random``) or a literal ``(x, y, z)``. Example, a bot defending a
random capture point and re-rolling it every 10 to 30 seconds::

    points caps = [(0, 0, 0), (20, 0, 0), (0, 20, 0)]
    node pick: select_random caps -> hold
    node hold: defend $selected radius 5 -> wait
    node wait: timer 10 30 -> pick
    entry pick

Every failure is a :class:`ScriptError` carrying a line and column.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

SCRIPT_VERSION = 1
SELECTED = "$selected"
VEHICLES = ("helicopter", "zero_g")
BLOCKING = ("timer", "move", "navigate_volume", "idle")


class ScriptError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.message = message
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class Node:
    id: str
    kind: str  # timer | select_random | defend | move | navigate_volume | idle
    next: str | None = None
    min_s: float = 0.0
    max_s: float = 0.0
    point_set: str | None = None
    target: object = None  # SELECTED or an (x, y, z) tuple
    radius: float = 0.0
    vehicle: str | None = None
    line: int = 0
    column: int = 0


@dataclass(frozen=True)
class ObjectiveScript:
    points: dict
    nodes: dict
    entry: str
    entry_line: int = 0

    def edges(self) -> list[tuple[str, str]]:
        return [(n.id, n.next) for n in self.nodes.values() if n.next is not None]


# -- lexing --------------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>[ \t]+)
  | (?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<arrow>->)
  | (?P<var>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[()\[\],=:])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    column: int


def _lex(line: str, lineno: int) -> list[_Tok]:
    toks = []
    pos = 0
    body = line.split("#", 1)[0].rstrip()
    while pos < len(body):
        m = _TOKEN.match(body, pos)
        if not m:
            raise ScriptError(f"unexpected character {body[pos]!r}", lineno, pos + 1)
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), lineno, pos + 1))
        pos = m.end()
    return toks


class _Cursor:
    def __init__(self, toks: list[_Tok], lineno: int, width: int):
        self.toks = toks
        self.i = 0
        self.lineno = lineno
        self.end_col = width + 1

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def error(self, msg: str, tok: _Tok | None = None) -> ScriptError:
        tok = tok if tok is not None else self.peek()
        col = tok.column if tok is not None else self.end_col
        return ScriptError(msg, self.lineno, col)

    def take(self, kind: str, text: str | None = None, what: str | None = None) -> _Tok:
        tok = self.peek()
        if tok is None or tok.kind != kind or (text is not None and tok.text != text):
            want = what or (repr(text) if text else kind)
            got = "end of line" if tok is None else repr(tok.text)
            raise self.error(f"expected {want}, got {got}", tok)
        self.i += 1
        return tok

    def number(self, what: str = "number") -> float:
        tok = self.take("num", what=what)
        val = float(tok.text)
        if not math.isfinite(val):
            raise self.error(f"{what} must be finite", tok)
        return val

    def done(self):
        if self.peek() is not None:
            raise self.error(f"unexpected {self.peek().text!r}")


def _point(cur: _Cursor) -> tuple:
    cur.take("punct", "(")
    xyz = [cur.number("coordinate")]
    for _ in range(2):
        cur.take("punct", ",")
        xyz.append(cur.number("coordinate"))
    cur.take("punct", ")")
    return tuple(xyz)


def _target(cur: _Cursor):
    tok = cur.peek()
    if tok is not None and tok.kind == "var":
        if tok.text != SELECTED:
            raise cur.error(f"unknown variable {tok.text}; only {SELECTED} exists", tok)
        cur.i += 1
        return SELECTED
    if tok is not None and tok.text == "(":
        return _point(cur)
    raise cur.error(f"expected {SELECTED} or (x, y, z)")


# -- parsing -------------------------------------------------------------------------

@dataclass
class _Refs:
    next: dict = field(default_factory=dict)  # node id -> token of its successor
    sets: dict = field(default_factory=dict)  # node id -> token naming its point set


def _parse_node(cur: _Cursor, refs: _Refs) -> Node:
    id_tok = cur.take("name", what="node id")
    cur.take("punct", ":")
    kind_tok = cur.take("name", what="node kind")
    kind = kind_tok.text
    loc = dict(line=cur.lineno, column=id_tok.column)
    if kind == "timer":
        lo_tok = cur.peek()
        lo, hi = cur.number("minimum seconds"), cur.number("maximum seconds")
        if lo <= 0:
            raise cur.error("timer minimum must be > 0", lo_tok)
        if lo > hi:
            raise cur.error(f"timer minimum {lo:g} exceeds maximum {hi:g}", lo_tok)
        fields = dict(min_s=lo, max_s=hi)
    elif kind == "select_random":
        set_tok = cur.take("name", what="point set name")
        refs.sets[id_tok.text] = set_tok
        fields = dict(point_set=set_tok.text)
    elif kind == "defend":
        target = _target(cur)
        cur.take("name", "radius")
        r_tok = cur.peek()
        radius = cur.number("radius")
        if radius <= 0:
            raise cur.error("radius must be > 0", r_tok)
        fields = dict(target=target, radius=radius)
    elif kind == "move":
        fields = dict(target=_target(cur))
    elif kind == "navigate_volume":
        v_tok = cur.take("name", what="vehicle")
        if v_tok.text not in VEHICLES:
            raise cur.error(f"unknown vehicle {v_tok.text!r}; expected one of {', '.join(VEHICLES)}", v_tok)
        cur.take("name", "to")
        fields = dict(vehicle=v_tok.text, target=_target(cur))
    elif kind == "idle":
        fields = {}
    else:
        raise cur.error(f"unknown node kind {kind!r}", kind_tok)
    nxt = None
    if cur.peek() is not None and cur.peek().kind == "arrow":
        arrow = cur.take("arrow")
        if kind == "idle":
            raise cur.error("idle nodes cannot have a successor", arrow)
        nxt_tok = cur.take("name", what="successor node id")
        refs.next[id_tok.text] = nxt_tok
        nxt = nxt_tok.text
    cur.done()
    return Node(id_tok.text, kind, nxt, **fields, **loc)


def parse_script(text: str) -> ObjectiveScript:
    """Parse and validate a script; raises :class:`ScriptError` with a location."""
    if not isinstance(text, str):
        raise ScriptError("script must be text")
    points: dict = {}
    point_lines: dict = {}
    nodes: dict = {}
    refs = _Refs()
    entry = None
    seen_statement = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _lex(raw, lineno)
        if not toks:
            continue
        cur = _Cursor(toks, lineno, len(raw))
        head = cur.take("name", what="statement keyword")
        if head.text == "version":
            if seen_statement:
                raise cur.error("version must be the first statement", head)
            v_tok = cur.peek()
            v = cur.number("version")
            if v != SCRIPT_VERSION:
                raise cur.error(f"unsupported script version {v:g}", v_tok)
            cur.done()
        elif head.text == "points":
            name = cur.take("name", what="point set name")
            if name.text in points:
                raise cur.error(f"point set {name.text!r} already defined on line {point_lines[name.text]}", name)
            cur.take("punct", "=")
            cur.take("punct", "[")
            pts = [_point(cur)]
            while cur.peek() is not None and cur.peek().text == ",":
                cur.i += 1
                pts.append(_point(cur))
            cur.take("punct", "]")
            cur.done()
            points[name.text] = tuple(pts)
            point_lines[name.text] = lineno
        elif head.text == "node":
            node = _parse_node(cur, refs)
            if node.id in nodes:
                raise ScriptError(f"node {node.id!r} already defined on line {nodes[node.id].line}",
                                  lineno, node.column)
            nodes[node.id] = node
        elif head.text == "entry":
            tok = cur.take("name", what="entry node id")
            if entry is not None:
                raise cur.error("entry declared twice", head)
            cur.done()
            entry = tok
        else:
            raise cur.error(f"unknown statement {head.text!r}", head)
        seen_statement = True
    if entry is None:
        raise ScriptError("missing entry node", max(1, len(text.splitlines())), 1)
    script = ObjectiveScript(points, nodes, entry.text, entry.line)
    _validate(script, refs, entry)
    return script


def _validate(script: ObjectiveScript, refs: _Refs, entry_tok: _Tok) -> None:
    nodes = script.nodes
    if script.entry not in nodes:
        raise ScriptError(f"entry node {script.entry!r} is not defined", entry_tok.line, entry_tok.column)
    for nid, tok in refs.next.items():
        if tok.text not in nodes:
            raise ScriptError(f"node {tok.text!r} is not defined", tok.line, tok.column)
    for nid, tok in refs.sets.items():
        if tok.text not in script.points:
            raise ScriptError(f"point set {tok.text!r} is not defined", tok.line, tok.column)

    reachable = _walk(nodes, script.entry)
    for node in nodes.values():
        if node.id not in reachable:
            raise ScriptError(f"node {node.id!r} is unreachable from entry {script.entry!r}",
                              node.line, node.column)

    # every cycle needs a node that waits, or one tick would spin forever
    for start in nodes.values():
        path = []
        cur = start
        while cur is not None and cur.kind not in BLOCKING and cur.id not in path:
            path.append(cur.id)
            cur = nodes.get(cur.next) if cur.next else None
        if cur is not None and cur.id in path and cur.id == start.id:
            raise ScriptError(f"cycle through {' -> '.join(path + [start.id])} has no timer or movement",
                              start.line, start.column)

    # $selected must be bound by a select_random on every route to its use
    unbound = _walk(nodes, script.entry, stop=lambda n: n.kind == "select_random")
    for node in nodes.values():
        if node.target == SELECTED and node.id in unbound:
            raise ScriptError(f"node {node.id!r} uses {SELECTED} before any select_random",
                              node.line, node.column)


def _walk(nodes: dict, entry: str, stop=None) -> set:
    """Node ids reachable from ``entry``; traversal does not pass through ``stop`` nodes."""
    seen = set()
    cur = entry
    while cur is not None and cur not in seen:
        seen.add(cur)
        node = nodes[cur]
        if stop is not None and stop(node):
            break
        cur = node.next
    return seen


# -- serialization -------------------------------------------------------------------

def _fmt_num(x: float) -> str:
    return repr(float(x))


def _fmt_point(p) -> str:
    return "(" + ", ".join(_fmt_num(c) for c in p) + ")"


def _fmt_target(t) -> str:
    return SELECTED if t == SELECTED else _fmt_point(t)


def serialize(script: ObjectiveScript) -> str:
    lines = [f"version {SCRIPT_VERSION}"]
    for name, pts in script.points.items():
        lines.append(f"points {name} = [" + ", ".join(_fmt_point(p) for p in pts) + "]")
    for n in script.nodes.values():
        if n.kind == "timer":
            body = f"timer {_fmt_num(n.min_s)} {_fmt_num(n.max_s)}"
        elif n.kind == "select_random":
            body = f"select_random {n.point_set}"
        elif n.kind == "defend":
            body = f"defend {_fmt_target(n.target)} radius {_fmt_num(n.radius)}"
        elif n.kind == "move":
            body = f"move {_fmt_target(n.target)}"
        elif n.kind == "navigate_volume":
            body = f"navigate_volume {n.vehicle} to {_fmt_target(n.target)}"
        else:
            body = "idle"
        arrow = f" -> {n.next}" if n.next else ""
        lines.append(f"node {n.id}: {body}{arrow}")
    lines.append(f"entry {script.entry}")
    return "\n".join(lines) + "\n"


def same_graph(a: ObjectiveScript, b: ObjectiveScript) -> bool:
    """Structural equality ignoring source locations."""
    def strip(s):
        return {k: (n.kind, n.next, n.min_s, n.max_s, n.point_set, n.target, n.radius, n.vehicle)
                for k, n in s.nodes.items()}
    return a.entry == b.entry and a.points == b.points and strip(a) == strip(b)
