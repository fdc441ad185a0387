"""A bot working through the capture-point script.

The bot walks between capture points with scripted steering. With
``--model craft.apml`` (a zero-g policy from ``rangepilot export``) it boards
a craft halfway through and the learned policy takes over.

    python demos/capture_bot.py
    python demos/capture_bot.py --model runs/zero_g/final.apml
"""

import argparse
import math
from pathlib import Path

import numpy as np

from rangepilot.bots import Bot, parse_script
from rangepilot.deploy import load_model
from rangepilot.physics import Mode, VehicleParams, World, make_state, step

HERE = Path(__file__).parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", help="exported zero-g policy; enables boarding a craft")
    ap.add_argument("--seconds", type=float, default=120.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    world = World()
    script = parse_script((HERE / "capture_point.script").read_text())
    models = {Mode.ZERO_G: load_model(args.model)} if args.model else None
    bot = Bot(script, world, seed=args.seed, models=models)
    params = {Mode.ON_FOOT: VehicleParams(), Mode.ZERO_G: VehicleParams.zero_g()}

    state = make_state((0.0, 0.0, 0.0), Mode.ON_FOOT, grounded=True)
    last = None
    board_at = args.seconds / 2 if models else math.inf
    for k in range(int(args.seconds / world.dt)):
        now = k * world.dt
        if now >= board_at and state.mode == Mode.ON_FOOT:
            state = make_state(state.position + (0.0, 0.0, 10.0), Mode.ZERO_G)
            print(f"{now:7.2f}s  boarded a zero-g craft")
        d = bot.tick(state, now)
        shown = (d.command.kind, d.command.target, d.locomotion.name)
        if shown != last:
            where = np.round(state.position, 1).tolist()
            print(f"{now:7.2f}s  {d.command.kind.name.lower():8s} target={d.command.target} "
                  f"control={d.locomotion.name} at {where}")
            last = shown
        state = step(state, d.action, world, params[state.mode])
        if k % int(10 / world.dt) == 0 and d.command.target is not None:
            gap = math.dist(state.position[:2], d.command.target[:2])
            print(f"{now:7.2f}s    {gap:5.1f} m from target")


if __name__ == "__main__":
    main()
