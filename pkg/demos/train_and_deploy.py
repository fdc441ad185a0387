"""Train a zero-g navigation policy, then ship it.

Walks the whole pipeline in one process: local PPO training with periodic
evaluation, a final deterministic evaluation on fresh episodes, export to the
deployment format, a latency benchmark, and a single inference call.

    python demos/train_and_deploy.py                 # a few minutes on one core
    python demos/train_and_deploy.py --steps 200000  # quick look, will not converge
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from rangepilot.deploy import bench_latency, export_model, load_model
from rangepilot.env import EnvConfig, VecEnv
from rangepilot.evaluation import evaluate
from rangepilot.observation import RewardParams
from rangepilot.physics import Mode
from rangepilot.policy import init_model
from rangepilot.ppo import LocalSource, TrainConfig, train_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2_000_000)
    ap.add_argument("--out", default="runs/demo_zero_g")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    env = EnvConfig.zero_g(reward=RewardParams.progress_weighted())
    model = init_model(np.random.default_rng(args.seed), log_std_init=-0.5, mode=int(Mode.ZERO_G),
                       bounds_min=env.world.bounds_min, bounds_max=env.world.bounds_max)
    print(f"untrained: {evaluate(model, env, 20, seed=99)['arrival_rate']:.2f} of episodes reach every waypoint")

    def evaluator(m):
        r = evaluate(m, env, 50, seed=args.seed + 2)
        print(f"  eval: arrival {r['arrival_rate']:.2f}, mean waypoints {r['mean_arrived']:.1f}")
        return r

    def progress(i, m, row, stats):
        if i % 20 == 0:
            print(f"iteration {i:4d}  steps {row['env_steps']:8d}  return {row['mean_return']:7.2f}")

    cfg = TrainConfig(total_steps=args.steps, seed=args.seed, out_dir=args.out, eval_every=20,
                      target_arrival_rate=0.9)
    model, rows = train_loop(cfg, LocalSource(env, 16, seed=args.seed + 1), model, evaluator=evaluator,
                             on_iteration=progress)
    final = evaluate(model, env, 100, seed=12345)
    print(f"trained for {rows[-1]['env_steps']} steps; fresh episodes: arrival {final['arrival_rate']:.2f}, "
          f"crash {final['crash_rate']:.2f}, mean length {final['mean_length']:.0f} steps")

    apml = Path(args.out) / "final.apml"
    size = export_model(model, apml, strip_value=True)
    deployed = load_model(apml)
    print(f"exported {apml} ({size / 1024:.0f} KiB, layers {'->'.join(map(str, deployed.dims))})")
    lat = bench_latency(deployed, 10_000, rounds=3)
    print(f"batch-1 latency: p50 {lat.p50_us:.1f} us, p99 {lat.p99_us:.1f} us")

    venv = VecEnv(env, 1, seed=7)
    obs = venv.reset()
    print("first action from the deployed policy:", [round(float(a), 3) for a in deployed.infer(obs[0])])
    print(f"try: python demos/capture_bot.py --model {apml}")


if __name__ == "__main__":
    main()
