"""PPO training: advantage estimation, clipped-surrogate updates, the training loop.

Data arrives from an *env source*, which is anything with

* ``start() -> Tick`` and ``step(actions, log_prob, value) -> Tick``
* ``close()``

where a :class:`Tick` carries one row per live agent keyed by
``(client_id, agent_index)``. :class:`LocalSource` wraps in-process
environments; :class:`rangepilot.distrib.server.ServerSource` feeds the same
interface from remote clients.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .env import CRASHED, DONE, SUCCESS, TRUNCATED, make_env
from .policy import (Adam, LossError, LossSpec, Minibatch, PolicyModel, clip_by_global_norm, entropy,
                     forward, loss_and_gradients, sample_action, save_checkpoint)

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("iteration", "env_steps", "mean_return", "arrival_rate", "crash_rate",
                   "clip_fraction", "entropy", "wall_clock_s")


@dataclass(frozen=True)
class PpoConfig:
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    policy_lr: float = 3e-4
    value_coeff: float = 0.5
    entropy_coeff: float = 0.003
    epochs_per_iter: int = 3
    minibatch_size: int = 512
    horizon: int = 256
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0 < self.discount < 1:
            raise ValueError("discount must be in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip_range > 0:
            raise ValueError("clip_range must be positive")
        if self.horizon < 1 or self.minibatch_size < 1 or self.epochs_per_iter < 1:
            raise ValueError("horizon, minibatch_size and epochs_per_iter must be >= 1")

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.clip_range, 1.0, self.value_coeff, self.entropy_coeff)


def compute_gae(rewards, values, dones, bootstrap_value, discount: float, lam: float):
    """Generalized advantage estimates for time-major sequences.

    Arrays are shaped ``(T,)`` or ``(T, n)``; ``bootstrap_value`` is the value
    of the state after the last step. Returns ``(advantages, returns)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if not (r.shape == v.shape == d.shape):
        raise ValueError(f"length mismatch: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    T = r.shape[0]
    adv = np.zeros_like(r)
    next_v = np.asarray(bootstrap_value, dtype=np.float64)
    running = np.zeros_like(next_v)
    for t in range(T - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + discount * next_v * live - v[t]
        running = delta + discount * lam * live * running
        adv[t] = running
        next_v = v[t]
    return adv, adv + v


@dataclass
class Tick:
    keys: list  # [(client_id, agent_index)]
    obs: np.ndarray
    reward: np.ndarray
    flags: np.ndarray
    terminal_obs: np.ndarray
    episode_id: np.ndarray
    departed: list = field(default_factory=list)
    finished: list = field(default_factory=list)


class LocalSource:
    """In-process vectorized environments presented as one client (id 0)."""

    def __init__(self, env_config, n_agents: int, seed: int, client_id: int = 0):
        self.env = make_env(env_config, n_agents, seed)
        self.keys = [(client_id, k) for k in range(n_agents)]

    @property
    def obs_dim(self):
        return self.env.obs_dim

    def start(self) -> Tick:
        obs = self.env.reset()
        n = len(self.keys)
        return Tick(self.keys, obs, np.zeros(n, np.float32), np.zeros(n, np.uint8), obs.copy(),
                    self.env.episode_id.copy())

    def step(self, actions, log_prob=None, value=None) -> Tick:
        res = self.env.step(np.asarray(actions, dtype=np.float32))
        return Tick(self.keys, res.obs, res.reward, res.flags, res.terminal_obs, res.episode_id,
                    finished=res.finished)

    def close(self):
        pass


class SourceClosed(Exception):
    """Raised by an env source when no more data will arrive."""


@dataclass
class Transition:
    key: tuple
    obs: np.ndarray
    action: np.ndarray  # pre-clamp
    log_prob: float
    value: float
    reward: float = 0.0
    done: bool = False
    terminal_value: float = 0.0


class Collector:
    """Turns a tick stream into per-agent transitions, sampling actions from ``model``."""

    def __init__(self, source, model: PolicyModel, rng: np.random.Generator, discount: float):
        self.source = source
        self.model = model
        self.rng = rng
        self.discount = discount
        self.pending: dict[tuple, Transition] = {}
        self.ep_return: dict[tuple, float] = {}
        self.ep_length: dict[tuple, int] = {}
        self.episodes: list[dict] = []
        self.env_steps = 0
        self._actions = None

    def act(self, obs):
        """One batched forward pass; returns float32 (pre-clamp actions, log-probs, values)."""
        mu, sigma, value = forward(self.model, obs)
        _, raw, logp = sample_action(mu, sigma, self.rng)
        return raw.astype(np.float32), logp.astype(np.float32), value.astype(np.float32)

    def start(self):
        tick = self.source.start()
        self._consume(tick, [])

    def collect(self, ticks: int) -> list[Transition]:
        out: list[Transition] = []
        for _ in range(ticks):
            tick = self.source.step(*self._actions)
            self._consume(tick, out)
        return out

    def _consume(self, tick: Tick, out: list):
        for key in tick.departed:
            self.pending.pop(key, None)
            self.ep_return.pop(key, None)
            self.ep_length.pop(key, None)
        truncated = (tick.flags & TRUNCATED) != 0
        tvals = None
        rows = np.flatnonzero(truncated)
        if rows.size:
            _, _, tv = forward(self.model, tick.terminal_obs[rows])
            tvals = dict(zip(rows.tolist(), tv.astype(np.float32).tolist()))
        for row, key in enumerate(tick.keys):
            tr = self.pending.pop(key, None)
            if tr is None:
                continue
            flag = int(tick.flags[row])
            tr.reward = float(tick.reward[row])
            tr.done = bool(flag & DONE)
            if tvals is not None and row in tvals:
                tr.terminal_value = tvals[row]
            out.append(tr)
            self.env_steps += 1
            self.ep_return[key] = self.ep_return.get(key, 0.0) + tr.reward
            self.ep_length[key] = self.ep_length.get(key, 0) + 1
            if tr.done:
                self.episodes.append({"key": key, "return": self.ep_return.pop(key),
                                      "length": self.ep_length.pop(key),
                                      "success": bool(flag & SUCCESS),
                                      "crashed": bool(flag & CRASHED)})
        raw, logp, value = self.act(tick.obs)
        for row, key in enumerate(tick.keys):
            self.pending[key] = Transition(key, tick.obs[row], raw[row], float(logp[row]),
                                           float(value[row]))
        self._actions = (raw, logp, value)

    def bootstrap_values(self) -> dict:
        return {k: tr.value for k, tr in self.pending.items()}


def build_batch(transitions: list[Transition], bootstrap: dict, config: PpoConfig) -> dict:
    """Group transitions per agent, run GAE, and stack everything into arrays."""
    by_key: dict[tuple, list[Transition]] = {}
    for tr in transitions:
        by_key.setdefault(tr.key, []).append(tr)
    obs, acts, logps, advs, rets, vals = [], [], [], [], [], []
    for key, seq in by_key.items():
        r = np.array([t.reward for t in seq], dtype=np.float64)
        tv = np.array([t.terminal_value for t in seq], dtype=np.float64)
        v = np.array([t.value for t in seq], dtype=np.float64)
        d = np.array([t.done for t in seq], dtype=np.float64)
        adv, ret = compute_gae(r + config.discount * tv, v, d, bootstrap.get(key, 0.0),
                               config.discount, config.gae_lambda)
        obs.append(np.stack([t.obs for t in seq]))
        acts.append(np.stack([t.action for t in seq]))
        logps.append(np.array([t.log_prob for t in seq]))
        advs.append(adv)
        rets.append(ret)
        vals.append(v)
    return {
        "obs": np.concatenate(obs), "actions": np.concatenate(acts),
        "log_prob": np.concatenate(logps), "advantages": np.concatenate(advs),
        "returns": np.concatenate(rets), "values": np.concatenate(vals),
    }


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-8 else 1.0)


def ppo_update(model: PolicyModel, batch: dict, config: PpoConfig, rng: np.random.Generator,
               optimizer: Adam | None = None) -> dict:
    """Run ``epochs_per_iter`` epochs of clipped-surrogate minibatch updates.

    On a non-finite loss the parameters are restored to their pre-update
    values and the stats carry ``aborted=True``.
    """
    if optimizer is None:
        optimizer = Adam(model, config.policy_lr)
    optimizer.lr = config.policy_lr
    spec = config.loss_spec()
    n = len(batch["obs"])
    adv = normalize_advantages(np.asarray(batch["advantages"], dtype=np.float64))
    snapshot = model.params
    opt_state = (optimizer.t, dict(optimizer.m), dict(optimizer.v))
    totals: dict[str, list] = {}
    try:
        for _ in range(config.epochs_per_iter):
            order = rng.permutation(n)
            for start in range(0, n, config.minibatch_size):
                idx = order[start:start + config.minibatch_size]
                mb = Minibatch(batch["obs"][idx], batch["actions"][idx], batch["log_prob"][idx],
                               adv[idx], batch["returns"][idx])
                _, grads, stats = loss_and_gradients(model, mb, spec)
                grads, gnorm = clip_by_global_norm(grads, config.max_grad_norm)
                stats["grad_norm"] = gnorm
                if config.policy_lr > 0:
                    optimizer.step(model, grads)
                for k, val in stats.items():
                    totals.setdefault(k, []).append(val)
    except LossError as exc:
        log.warning("aborting update: %s", exc)
        model.params = snapshot
        optimizer.t, optimizer.m, optimizer.v = opt_state
        return {"aborted": True, "term": exc.term}
    out = {k: float(np.mean(v)) for k, v in totals.items()}
    out["aborted"] = False
    out["entropy"] = entropy(model)
    return out


@dataclass
class TrainConfig:
    ppo: PpoConfig = field(default_factory=PpoConfig)
    total_steps: int = 3_000_000
    seed: int = 0
    out_dir: str | None = None
    checkpoint_every: int = 50
    eval_every: int = 0
    target_arrival_rate: float | None = None
    target_metric: str = "arrival_rate"
    lr_anneal: bool = False
    record_wall_clock: bool = True  # False writes 0.0 so reruns give byte-identical metrics


def _episode_summary(episodes: list[dict]):
    if not episodes:
        return float("nan"), float("nan"), float("nan")
    ret = float(np.mean([e["return"] for e in episodes]))
    succ = float(np.mean([e["success"] for e in episodes]))
    crash = float(np.mean([e["crashed"] for e in episodes]))
    return ret, succ, crash


def train_loop(config: TrainConfig, env_source, model: PolicyModel, *, evaluator=None,
               on_iteration=None):
    """Collect, estimate advantages, update; repeat until the step budget is spent.

    ``evaluator(model) -> dict`` (optional) is called every ``eval_every``
    iterations; training stops early once its ``target_metric`` entry reaches
    ``target_arrival_rate``. Returns ``(model, metrics_rows)``.
    """
    metrics: list[dict] = []
    if config.total_steps <= 0:
        return model, metrics
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model, config.ppo.policy_lr)
    collector = Collector(env_source, model, rng, config.ppo.discount)
    t0 = time.perf_counter()
    writer = _MetricsWriter(config.out_dir)
    iteration = 0
    try:
        collector.start()
        while collector.env_steps < config.total_steps:
            iteration += 1
            n_ep = len(collector.episodes)
            transitions = collector.collect(config.ppo.horizon)
            if not transitions:
                continue
            batch = build_batch(transitions, collector.bootstrap_values(), config.ppo)
            ppo_cfg = config.ppo
            if config.lr_anneal:
                frac = max(0.0, 1.0 - collector.env_steps / config.total_steps)
                ppo_cfg = _with_lr(ppo_cfg, ppo_cfg.policy_lr * frac)
            stats = ppo_update(model, batch, ppo_cfg, rng, optimizer)
            mean_ret, arrival, crash = _episode_summary(collector.episodes[n_ep:])
            row = {
                "iteration": iteration, "env_steps": collector.env_steps,
                "mean_return": mean_ret, "arrival_rate": arrival, "crash_rate": crash,
                "clip_fraction": stats.get("clip_fraction", float("nan")),
                "entropy": entropy(model),
                "wall_clock_s": time.perf_counter() - t0 if config.record_wall_clock else 0.0,
            }
            metrics.append(row)
            writer.append(row)
            if on_iteration is not None:
                on_iteration(iteration, model, row, stats)
            if config.out_dir and config.checkpoint_every and iteration % config.checkpoint_every == 0:
                save_checkpoint(model, os.path.join(config.out_dir, f"ckpt_{iteration:05d}.apck"))
            if evaluator is not None and config.eval_every and iteration % config.eval_every == 0:
                result = evaluator(model)
                log.info("iteration %d eval: %s", iteration, result)
                if (config.target_arrival_rate is not None
                        and result.get(config.target_metric, 0.0) >= config.target_arrival_rate):
                    break
    except SourceClosed:
        log.warning("env source closed; stopping after %d iterations", iteration)
    finally:
        if config.out_dir:
            save_checkpoint(model, os.path.join(config.out_dir, "final.apck"))
        writer.close()
    return model, metrics


def _with_lr(cfg: PpoConfig, lr: float) -> PpoConfig:
    from dataclasses import replace
    return replace(cfg, policy_lr=lr)


class _MetricsWriter:
    def __init__(self, out_dir):
        self._f = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self._f = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
            self._w = csv.DictWriter(self._f, fieldnames=METRICS_COLUMNS)
            self._w.writeheader()

    def append(self, row):
        if self._f:
            self._w.writerow({k: _fmt(row[k]) for k in METRICS_COLUMNS})
            self._f.flush()

    def close(self):
        if self._f:
            self._f.close()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v
