"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 invalid input (config, script, model
file), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import signal
import sys
import time

import numpy as np

from . import binfmt
from .bots import ScriptError, parse_script
from .config import ConfigError, HarnessConfig, load_config
from .deploy import bench_latency, export_model, load_model
from .distrib import ClientRejected, ServerSource, ServerUnreachable, run_client
from .env import PointMassConfig
from .evaluation import evaluate
from .policy import LossError, init_model, load_checkpoint
from .ppo import LocalSource, SourceClosed, train_loop

log = logging.getLogger("rangepilot")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3
HEARTBEAT_S = 5.0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Invalid(Exception):
    pass


def _config(args) -> HarnessConfig:
    cfg = load_config(args.config)
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "out", None):
        train = dataclasses.replace(train, out_dir=args.out)
    if getattr(args, "steps", None) is not None:
        train = dataclasses.replace(train, total_steps=args.steps)
    return dataclasses.replace(cfg, train=train)


def _new_model(cfg: HarnessConfig):
    env = cfg.env
    meta = {}
    if not isinstance(env, PointMassConfig):
        meta = dict(mode=int(env.mode), bounds_min=env.world.bounds_min, bounds_max=env.world.bounds_max)
    return init_model(np.random.default_rng(cfg.seed), env.obs_dim, cfg.hidden, env.act_dim,
                      log_std_init=cfg.log_std_init, **meta)


def _evaluator(cfg: HarnessConfig):
    if not cfg.train.eval_every:
        return None

    def run(model):
        result = evaluate(model, cfg.env, cfg.eval_episodes, seed=cfg.seed + 2)
        log.info("eval: %s", {k: round(v, 3) for k, v in result.items()})
        return result
    return run


def _progress(i, model, row, stats):
    if i == 1 or i % 10 == 0:
        log.info("iteration %d: steps=%d return=%.3f arrival=%.3f crash=%.3f", i, row["env_steps"],
                 row["mean_return"], row["arrival_rate"], row["crash_rate"])


def _stop_on_sigterm():
    def handler(signum, frame):
        raise KeyboardInterrupt
    signal.signal(signal.SIGTERM, handler)


def cmd_train(args) -> int:
    cfg = _config(args)
    if not cfg.train.out_dir:
        raise _Invalid("no output directory: set run.out_dir or pass --out")
    model = _new_model(cfg)
    _stop_on_sigterm()
    if args.local:
        source = LocalSource(cfg.env, cfg.agents, seed=cfg.seed + 1)
        _, rows = train_loop(cfg.train, source, model, evaluator=_evaluator(cfg), on_iteration=_progress)
    else:
        rows = _serve(cfg, model)
    print(f"trained {len(rows)} iterations; outputs in {cfg.train.out_dir}")
    return EXIT_OK


def _serve(cfg: HarnessConfig, model):
    d = cfg.distrib
    with ServerSource(d.server, obs_dim=model.obs_dim, act_dim=model.act_dim,
                      obs_layout_version=model.obs_layout_version, min_clients=d.min_clients,
                      join_timeout=0.0, idle_timeout=d.idle_timeout) as source:
        host, port = source.address
        log.info("listening on %s:%d, waiting for %d client(s)", host, port, d.min_clients)
        print(f"listening on {host}:{port}", flush=True)
        # wait for the first clients, forever unless a join timeout is set
        deadline = time.monotonic() + d.join_timeout if d.join_timeout > 0 else float("inf")
        last = time.monotonic()
        try:
            while source.pending < d.min_clients:
                if time.monotonic() > deadline:
                    raise SourceClosed(f"only {source.pending} of {d.min_clients} clients joined")
                time.sleep(0.1)
                if time.monotonic() - last >= HEARTBEAT_S:
                    last = time.monotonic()
                    log.info("heartbeat: %d of %d clients connected", source.pending, d.min_clients)
        except KeyboardInterrupt:
            log.info("interrupted while waiting for clients; shutting down")
            return []
        try:
            _, rows = train_loop(cfg.train, source, model, evaluator=_evaluator(cfg), on_iteration=_progress)
        except KeyboardInterrupt:
            log.info("interrupted; final checkpoint written")
            return []
    return rows


def cmd_client(args) -> int:
    cfg = _config(args)
    d = cfg.distrib
    reason = run_client(args.server or d.server, cfg.env, d.processes, d.agents_per_process,
                        client_id=args.client_id, seed=cfg.seed, max_ticks=args.max_ticks)
    print(f"session ended: {reason}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.model)
    if model.obs_dim != cfg.env.obs_dim or model.act_dim != cfg.env.act_dim:
        raise _Invalid(f"model is {model.obs_dim}->{model.act_dim}, "
                       f"environment needs {cfg.env.obs_dim}->{cfg.env.act_dim}")
    episodes = args.episodes or cfg.eval_episodes
    result = evaluate(model, cfg.env, episodes, seed=cfg.seed, stochastic=args.stochastic)
    for key in ("episodes", "arrival_rate", "crash_rate", "liftoff_rate", "unstable_rate", "mean_length",
                "mean_return"):
        print(f"{key:14s} {result[key]:.4g}")
    return EXIT_OK


def cmd_export(args) -> int:
    model = load_checkpoint(args.checkpoint)
    size = export_model(model, args.out, strip_value=args.strip_value)
    print(f"wrote {args.out} ({size} bytes)")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(args.model)
    stats = bench_latency(model, args.iterations, warmup=args.warmup, seed=args.seed or 0, rounds=args.rounds)
    dims = "->".join(str(d) for d in model.dims)
    print(f"model {dims}, {stats.iterations} batch-1 calls x {args.rounds} round(s)")
    print(f"p50 {stats.p50_us:.1f} us  p95 {stats.p95_us:.1f} us  p99 {stats.p99_us:.1f} us  "
          f"mean {stats.mean_us:.1f} us")
    if len(stats.round_p99_us) > 1:
        print("p99 per round: " + ", ".join(f"{r:.1f}" for r in stats.round_p99_us) + " us")
    print(f"budget {stats.budget_us:.0f} us: {'met' if stats.within_budget else 'MISSED'}")
    return EXIT_OK


def cmd_lint_script(args) -> int:
    try:
        with open(args.path, encoding="utf-8") as f:
            text = f.read()
    except UnicodeDecodeError:
        raise _Invalid(f"{args.path}: not valid UTF-8") from None
    try:
        script = parse_script(text)
    except ScriptError as err:
        print(f"{args.path}:{err.line}:{err.column}: {err.message}", file=sys.stderr)
        return EXIT_INVALID
    print(f"{args.path}: ok ({len(script.nodes)} nodes, entry {script.entry})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rangepilot", description="Train, serve, evaluate and deploy navigation policies.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("config")
    where = t.add_mutually_exclusive_group(required=True)
    where.add_argument("--local", action="store_true", help="step environments in this process")
    where.add_argument("--serve", action="store_true", help="train on data from connected clients")
    t.add_argument("--out", help="output directory (overrides run.out_dir)")
    t.add_argument("--steps", type=int, help="environment step budget (overrides run.total_steps)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("client", help="run rollout processes for a training server")
    c.add_argument("config")
    c.add_argument("--server", help="host:port (overrides distrib.server)")
    c.add_argument("--client-id", type=int)
    c.add_argument("--max-ticks", type=int)
    c.set_defaults(func=cmd_client)

    e = sub.add_parser("eval", help="deterministic-policy evaluation of a checkpoint")
    e.add_argument("model", help="training checkpoint (.apck)")
    e.add_argument("config")
    e.add_argument("--episodes", type=int)
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="convert a checkpoint to the deployment format")
    x.add_argument("checkpoint")
    x.add_argument("out")
    x.add_argument("--strip-value", action="store_true", help="drop the value output")
    x.set_defaults(func=cmd_export)

    b = sub.add_parser("bench", help="batch-1 inference latency of an exported model")
    b.add_argument("model", help="exported model (.apml)")
    b.add_argument("--iterations", type=int, default=10_000)
    b.add_argument("--warmup", type=int, default=1000)
    b.add_argument("--rounds", type=int, default=3, help="repeat and report the median-p99 round")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("lint-script", help="validate an objective script")
    s.add_argument("path")
    s.set_defaults(func=cmd_lint_script)

    for sp in (t, c, e, x, b, s):
        sp.add_argument("--seed", type=int, help="override the configured seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, _Invalid, binfmt.FormatError, ClientRejected) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_INVALID
    except (ServerUnreachable, SourceClosed, LossError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
