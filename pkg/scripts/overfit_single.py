"""Overfit the default model on one synthetic object and score rig and unseen views.

Usage: python scripts/overfit_single.py [--steps 2000] [--out results/overfit]
"""

import argparse
import json
import time
from pathlib import Path

from splatdiff.camera import rig_default
from splatdiff.data import build_dataset, load_dataset
from splatdiff.denoiser import ModelDenoiser
from splatdiff.metrics import evaluate
from splatdiff.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--sample-steps", type=int, default=50)
    ap.add_argument("--eval-every", type=int, default=0)
    ap.add_argument("--out", default="results/overfit")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rig = rig_default(6, (args.size, args.size))
    build_dataset(1, rig, 2, out / "data", seed=args.seed)
    records = load_dataset(out / "data")
    config = TrainConfig(steps=args.steps, seed=args.seed)
    log = out / "train"
    if (log / "metrics.jsonl").exists():
        (log / "metrics.jsonl").unlink()

    def score(state):
        rep = evaluate(lambda rec: ModelDenoiser(state.model), records, args.sample_steps, args.seed)
        return rep.summary()

    def callback(state, metrics):
        if state.step % 50 == 0:
            print(f"step {state.step} l_render {metrics['l_render']:.4f} l_diff {metrics['l_diff']:.4f} "
                  f"{metrics['wall_ms']:.0f} ms", flush=True)
        if args.eval_every and state.step % args.eval_every == 0:
            print("eval", state.step, json.dumps(score(state)), flush=True)

    start = time.perf_counter()
    state = train(records, config, log, callback=callback)
    train_s = time.perf_counter() - start
    summary = score(state)
    result = {"steps": args.steps, "seed": args.seed, "size": args.size, "train_seconds": train_s,
              "summary": summary}
    (out / "result.json").write_text(json.dumps(result, indent=1) + "\n")
    print(json.dumps(result, indent=1))


if __name__ == "__main__":
    main()
