"""Policy evaluation; deterministic (clamped mean) unless asked to sample."""

from __future__ import annotations

import numpy as np

from .env import make_env
from .policy import PolicyModel, forward, sample_action
from .tasks import Status


def evaluate(model: PolicyModel, env_config, episodes: int = 100, seed: int = 12345, *,
             stochastic: bool = False) -> dict:
    """Run exactly one episode in each of ``episodes`` parallel slots.

    ``stochastic`` samples actions from the policy instead of using its mean,
    which for an untrained model gives the random-policy baseline.

    Reports success ("arrival") rate, crash rate, lift-off rate (first target
    reached), mean waypoints reached, mean return, mean episode length and the
    share of episodes that spent any step upside down (stability penalty).
    """
    env = make_env(env_config, episodes, seed)
    obs = env.reset()
    rng = np.random.default_rng(seed)
    results: dict[int, dict] = {}
    while len(results) < episodes:
        mu, sigma, _ = forward(model, obs)
        act = sample_action(mu, sigma, rng)[0] if stochastic else mu
        res = env.step(np.clip(act, -1.0, 1.0).astype(np.float32))
        for ep in res.finished:
            results.setdefault(ep["agent"], ep)
        obs = res.obs
    eps = [results[k] for k in range(episodes)]
    status = np.array([int(e["status"]) for e in eps])
    arrived = np.array([e["arrived"] for e in eps])
    return {
        "episodes": episodes,
        "arrival_rate": float(np.mean(status == Status.SUCCESS)),
        "crash_rate": float(np.mean(status == Status.CRASHED)),
        "timeout_rate": float(np.mean(status == Status.TIMED_OUT)),
        "liftoff_rate": float(np.mean(arrived >= 1)),
        "mean_arrived": float(np.mean(arrived)),
        "mean_return": float(np.mean([e["return"] for e in eps])),
        "mean_length": float(np.mean([e["length"] for e in eps])),
        "unstable_rate": float(np.mean([e["unstable_steps"] > 0 for e in eps])),
    }
