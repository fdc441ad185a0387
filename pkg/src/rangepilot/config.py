"""Harness configuration files.

Grammar (INI style, read with :mod:`configparser`, no interpolation)::

    # comment                 ; or ';' comment
    [section]
    key = value               # trailing comments allowed

Sections and keys (all optional except ``run.seed``):

``[run]``
    seed, out_dir, total_steps, checkpoint_every, eval_every, eval_episodes,
    target (early-stop threshold), target_metric, lr_anneal, wall_clock
    (false writes 0.0 for reproducible metrics), agents (local agents),
    hidden (comma-separated widths), log_std_init
``[env]``
    mode (zero_g | helicopter | point_mass), n_waypoints, max_steps,
    segment_min, segment_max, world_size, dt
``[reward]``
    alpha, beta, gamma, psi, eps, d_l_floor, stability_penalty
``[vehicle]``
    max_thrust, torque_gains (pitch, yaw, roll), linear_drag, angular_drag,
    gravity, crash_speed, walk_speed, turn_rate
``[ppo]``
    discount, gae_lambda, clip_range, policy_lr, value_coeff,
    entropy_coeff, epochs_per_iter, minibatch_size, horizon, max_grad_norm
``[distrib]``
    server (host:port), min_clients, join_timeout, idle_timeout,
    processes, agents_per_process

Every error is a :class:`ConfigError` naming the file and line.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field

from .env import EnvConfig, PointMassConfig
from .observation import RewardParams
from .physics import Mode, PhysicsError, VehicleParams, World
from .policy import PPO_HIDDEN
from .ppo import PpoConfig, TrainConfig

MODES = {"zero_g": Mode.ZERO_G, "helicopter": Mode.HELICOPTER, "point_mass": None}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "<config>", line: int = 0):
        self.message = message
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}" if line else f"{path}: {message}")


@dataclass(frozen=True)
class DistribConfig:
    server: str = "127.0.0.1:7878"
    min_clients: int = 1
    join_timeout: float = 60.0
    idle_timeout: float = 5.0
    processes: int = 1
    agents_per_process: int = 16


@dataclass(frozen=True)
class HarnessConfig:
    seed: int
    env: object  # EnvConfig or PointMassConfig
    train: TrainConfig
    hidden: tuple = PPO_HIDDEN
    log_std_init: float = -0.5
    agents: int = 16
    eval_episodes: int = 100
    distrib: DistribConfig = field(default_factory=DistribConfig)


# -- value parsing -------------------------------------------------------------------

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


_SCHEMA = {
    "run": {"seed": int, "out_dir": str, "total_steps": int, "checkpoint_every": int, "eval_every": int,
            "eval_episodes": int, "target": _opt_float, "target_metric": str, "lr_anneal": _bool,
            "wall_clock": _bool, "agents": int, "hidden": _ints, "log_std_init": float},
    "env": {"mode": str, "n_waypoints": int, "max_steps": int, "segment_min": float, "segment_max": float,
            "world_size": float, "dt": float},
    "reward": {f.name: float for f in dataclasses.fields(RewardParams)},
    "vehicle": {f.name: (_floats if f.name == "torque_gains" else float)
                for f in dataclasses.fields(VehicleParams)},
    "ppo": {f.name: (int if f.type in ("int", int) else float) for f in dataclasses.fields(PpoConfig)},
    "distrib": {f.name: (str if f.name == "server" else int if f.type in ("int", int) else float)
                for f in dataclasses.fields(DistribConfig)},
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number; sections map to their header line."""
    where = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), n)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            where.setdefault((section, m.group(1).strip().lower()), n)
    return where


def parse_config(text: str, path: str = "<config>") -> HarnessConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   strict=True, empty_lines_in_values=False)
    try:
        cp.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any [section]", path, e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"section [{e.section}] appears twice", path, e.lineno or 0) from None
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"key {e.option!r} appears twice in [{e.section}]", path, e.lineno or 0) from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else 0
        raise ConfigError("cannot parse line (expected 'key = value')", path, lineno) from None

    where = _line_index(text)
    values: dict[str, dict] = {}
    for section in cp.sections():
        schema = _SCHEMA.get(section)
        if schema is None:
            raise ConfigError(f"unknown section [{section}]", path, where.get((section, None), 0))
        values[section] = {}
        for key, raw in cp.items(section):
            line = where.get((section, key), where.get((section, None), 0))
            conv = schema.get(key)
            if conv is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]", path, line)
            try:
                values[section][key] = (conv(raw), line)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", path, line) from None
    return _build(values, path, where)


def load_config(path) -> HarnessConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    except UnicodeDecodeError:
        raise ConfigError("config is not valid UTF-8", str(path)) from None
    return parse_config(text, str(path))


def _build(values: dict, path: str, where: dict) -> HarnessConfig:
    def get(section, key, default=None):
        return values.get(section, {}).get(key, (default, 0))[0]

    def section_line(section):
        return where.get((section, None), 0)

    def build(section, factory, **kw):
        fields = {k: v for k, (v, _) in values.get(section, {}).items()}
        fields.update(kw)
        try:
            return factory(**fields)
        except (ValueError, TypeError, PhysicsError) as exc:
            given = values.get(section, {})
            named = [line for k, (_, line) in given.items() if k in str(exc)]
            lines = named or [line for _, line in given.values()] or [section_line(section)]
            raise ConfigError(f"invalid [{section}]: {exc}", path, min(lines)) from None

    if "seed" not in values.get("run", {}):
        raise ConfigError("run.seed is required (no implicit randomness)", path, section_line("run"))
    seed = get("run", "seed")

    mode_name = get("env", "mode", "zero_g")
    if mode_name not in MODES:
        raise ConfigError(f"unknown env.mode {mode_name!r}; expected one of {', '.join(MODES)}",
                          path, values["env"]["mode"][1])
    mode = MODES[mode_name]

    if mode is None:
        env = _point_mass(values, path)
    else:
        reward = build("reward", RewardParams)
        vfactory = VehicleParams.helicopter if mode == Mode.HELICOPTER else VehicleParams.zero_g
        vehicle = build("vehicle", vfactory)
        env_kw = {}
        for key in ("n_waypoints", "max_steps"):
            if key in values.get("env", {}):
                env_kw[key] = get("env", key)
        lo = get("env", "segment_min", 10.0)
        hi = get("env", "segment_max", 25.0)
        if not 0 < lo <= hi:
            raise ConfigError("need 0 < env.segment_min <= env.segment_max", path, section_line("env"))
        try:
            world = World.cube(get("env", "world_size", 60.0), dt=get("env", "dt", 1.0 / 30.0))
        except PhysicsError as exc:
            raise ConfigError(f"invalid world: {exc}", path, section_line("env")) from None
        if env_kw.get("n_waypoints", 1) < 1 or env_kw.get("max_steps", 1) < 1:
            raise ConfigError("env.n_waypoints and env.max_steps must be >= 1", path, section_line("env"))
        factory = EnvConfig.helicopter if mode == Mode.HELICOPTER else EnvConfig.zero_g
        env = factory(reward=reward, vehicle=vehicle, world=world, segment_range=(lo, hi), **env_kw)

    ppo = build("ppo", PpoConfig)
    run = values.get("run", {})
    train = TrainConfig(
        ppo=ppo, seed=seed,
        total_steps=get("run", "total_steps", 3_000_000),
        out_dir=get("run", "out_dir"),
        checkpoint_every=get("run", "checkpoint_every", 50),
        eval_every=get("run", "eval_every", 0),
        target_arrival_rate=get("run", "target"),
        target_metric=get("run", "target_metric", "arrival_rate"),
        lr_anneal=get("run", "lr_anneal", False),
        record_wall_clock=get("run", "wall_clock", True),
    )
    for key in ("agents", "eval_episodes"):
        if key in run and run[key][0] < 1:
            raise ConfigError(f"run.{key} must be >= 1", path, run[key][1])
    hidden = get("run", "hidden", PPO_HIDDEN)
    if not hidden or min(hidden) < 1:
        raise ConfigError("run.hidden needs positive widths", path, run["hidden"][1])
    distrib = build("distrib", DistribConfig)
    if distrib.processes < 1 or distrib.agents_per_process < 1 or distrib.min_clients < 0:
        raise ConfigError("distrib sizes must be positive", path, section_line("distrib"))
    return HarnessConfig(seed=seed, env=env, train=train, hidden=tuple(hidden),
                         log_std_init=get("run", "log_std_init", -0.5), agents=get("run", "agents", 16),
                         eval_episodes=get("run", "eval_episodes", 100), distrib=distrib)


def _point_mass(values: dict, path: str) -> PointMassConfig:
    env = values.get("env", {})
    for key in env:
        if key not in ("mode", "max_steps"):
            raise ConfigError(f"env.{key} does not apply to point_mass", path, env[key][1])
    for section in ("reward", "vehicle"):
        if section in values:
            first = min(line for _, line in values[section].values()) if values[section] else 0
            raise ConfigError(f"[{section}] does not apply to point_mass", path, first)
    return PointMassConfig(max_steps=env["max_steps"][0]) if "max_steps" in env else PointMassConfig()
