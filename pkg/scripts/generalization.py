"""Train on many synthetic objects and compare held-out generation against the untrained model.

Usage: python scripts/generalization.py [--objects 64] [--heldout 8] [--steps 20000] [--out results/general]
"""

import argparse
import json
import time
from pathlib import Path

from splatdiff.camera import rig_default
from splatdiff.data import build_dataset, load_dataset
from splatdiff.denoiser import DenoiserModel, ModelDenoiser
from splatdiff.metrics import evaluate
from splatdiff.training import TrainConfig, train


def run(out, objects=64, heldout=8, steps=20000, size=128, seed=0, sample_steps=50, log_every=500):
    out = Path(out)
    rig = rig_default(6, (size, size))
    if not (out / "data" / "manifest.json").exists():
        build_dataset(objects + heldout, rig, 2, out / "data", seed=seed)
    records = load_dataset(out / "data")
    train_set, test_set = records[:objects], records[objects:]
    config = TrainConfig(steps=steps, seed=seed)

    baseline_model = DenoiserModel(config.model)
    baseline = evaluate(lambda rec: ModelDenoiser(baseline_model), test_set, sample_steps, seed,
                        "untrained", out_path=out / "baseline.jsonl").summary()

    def callback(state, metrics):
        if state.step % log_every == 0:
            print(f"step {state.step} l_render {metrics['l_render']:.4f} l_diff {metrics['l_diff']:.4f}", flush=True)

    start = time.perf_counter()
    state = train(train_set, config, out / "train", callback=callback)
    trained = evaluate(lambda rec: ModelDenoiser(state.model), test_set, sample_steps, seed,
                       f"step{state.step}", out_path=out / "trained.jsonl").summary()
    result = {"objects": objects, "heldout": heldout, "steps": steps, "size": size, "seed": seed,
              "train_seconds": time.perf_counter() - start, "baseline": baseline, "trained": trained,
              "unseen_gain_db": trained["unseen"]["psnr"] - baseline["unseen"]["psnr"]}
    (out / "result.json").write_text(json.dumps(result, indent=1) + "\n")
    return result


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--objects", type=int, default=64)
    ap.add_argument("--heldout", type=int, default=8)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/general")
    args = ap.parse_args()
    result = run(args.out, args.objects, args.heldout, args.steps, args.size, args.seed)
    print(json.dumps(result, indent=1))


if __name__ == "__main__":
    main()
