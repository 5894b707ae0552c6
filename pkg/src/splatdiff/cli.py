"""Command-line interface: gen-data, train, sample, render, eval.

Exit codes: 0 success, 1 user error (bad flags, missing or invalid inputs),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from .camera import RIG_AZIMUTHS_DEG, read_pose_file, rig_default
from .errors import NonFiniteLossError, PipelineError, SplatDiffError

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="splatdiff", description="Multiview latent diffusion through a 3D Gaussian bottleneck.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic multiview dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-objects", type=int, default=4)
    g.add_argument("--unseen", type=int, default=2, help="random-sphere views per object")
    g.add_argument("--size", type=int, default=128, help="image width and height")
    g.add_argument("--views", type=int, default=6, choices=[2, 4, 6])
    g.add_argument("--seed", type=_u64, default=0)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--config", help="JSON training config (defaults apply to missing keys)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for metrics and checkpoints")
    t.add_argument("--seed", type=_u64, default=None, help="overrides the config seed")
    t.add_argument("--steps", type=int, default=None, help="overrides the config step count")
    t.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("sample", help="generate a Gaussian cloud from one image")
    s.add_argument("--input", required=True, help="conditioning PNG (view at the first rig pose)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=_u64, default=0)
    s.add_argument("--out-dir", required=True)

    r = sub.add_parser("render", help="render a cloud file")
    r.add_argument("--cloud", required=True)
    r.add_argument("--poses", help="pose file; default is the 6-view rig")
    r.add_argument("--size", type=int, default=128)
    r.add_argument("--background", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    r.add_argument("--out-dir", required=True)
    r.add_argument("--seed", type=_u64, default=0, help="accepted for uniformity; rendering is deterministic")

    e = sub.add_parser("eval", help="score conditional generation on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="all", help="'all' or a START:END slice of the object list")
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--seed", type=_u64, default=0)
    e.add_argument("--out", required=True, help="report file")
    return ap


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import build_dataset

    if args.n_objects < 1 or args.unseen < 0 or args.size < 8 or args.size % 8:
        raise UsageError("need --n-objects >= 1, --unseen >= 0 and --size a positive multiple of 8")
    manifest = build_dataset(args.n_objects, rig_default(args.views, (args.size, args.size)), args.unseen,
                             args.out, args.seed)
    print(f"wrote {len(manifest['objects'])} objects to {args.out}")
    return EXIT_OK


def _load_train_config(args):
    from .training import TrainConfig

    d = {}
    if args.config:
        try:
            d = json.loads(_existing(args.config, "config file").read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    if args.seed is not None:
        d["seed"] = args.seed
    if args.steps is not None:
        d["steps"] = args.steps
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def cmd_train(args) -> int:
    from .data import load_dataset
    from .denoiser import load_checkpoint
    from .training import state_from_checkpoint, train

    config = _load_train_config(args)
    _existing(args.data, "dataset directory")
    records = load_dataset(args.data)
    state = None
    if args.resume:
        state = state_from_checkpoint(load_checkpoint(_existing(args.resume, "checkpoint")), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    state = train(records, config, out, state)
    print(f"trained to step {state.step}; checkpoint {out / 'last.dsck'}")
    return EXIT_OK


def _load_model(path):
    from .denoiser import load_checkpoint

    return load_checkpoint(_existing(path, "checkpoint")).build_model()


def cmd_sample(args) -> int:
    from .denoiser import ModelDenoiser
    from .diffusion import sample
    from .gaussians import save_cloud
    from .images import load_png, save_png

    try:
        image = load_png(_existing(args.input, "input image"))
    except OSError as exc:
        raise UsageError(f"cannot read input image {args.input}: {exc}") from None
    model = _load_model(args.checkpoint)
    h, w = image.shape[:2]
    rig = rig_default(6, (w, h))
    cloud, renders = sample(image, rig, ModelDenoiser(model), args.steps, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(out / "cloud.dspl", cloud)
    for i, r in enumerate(renders):
        save_png(out / f"view_{i}.png", r.color)
    print(f"wrote {len(cloud)} Gaussians and {len(renders)} views to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .gaussians import load_cloud
    from .images import save_alpha_png16, save_png
    from .render import render

    cloud = load_cloud(_existing(args.cloud, "cloud file"))
    if args.poses:
        try:
            poses = [r.to_pose() for r in read_pose_file(_existing(args.poses, "pose file"))]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        poses = rig_default(len(RIG_AZIMUTHS_DEG), (args.size, args.size)).poses
    bg = tuple(args.background)
    if any(not 0.0 <= c <= 1.0 for c in bg):
        raise UsageError("--background components must lie in [0, 1]")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        r = render(cloud, pose, bg)
        save_png(out / f"view_{i}.png", r.color)
        save_alpha_png16(out / f"alpha_{i}.png", r.alpha)
    print(f"rendered {len(poses)} views to {out}")
    return EXIT_OK


def _split(records, text: str):
    if text == "all":
        return records
    try:
        start, _, end = text.partition(":")
        return records[slice(int(start) if start else None, int(end) if end else None)]
    except ValueError:
        raise UsageError(f"--split must be 'all' or START:END, got {text!r}") from None


def cmd_eval(args) -> int:
    import hashlib

    from .data import load_dataset
    from .denoiser import ModelDenoiser
    from .metrics import evaluate

    ckpt_path = _existing(args.checkpoint, "checkpoint")
    model = _load_model(ckpt_path)
    _existing(args.data, "dataset directory")
    records = _split(load_dataset(args.data), args.split)
    if not records:
        raise UsageError(f"split {args.split!r} selects no objects")
    ckpt_id = hashlib.sha256(ckpt_path.read_bytes()).hexdigest()[:16]
    report = evaluate(lambda rec: ModelDenoiser(model), records, args.steps, args.seed, ckpt_id,
                      {"model": model.config.to_dict(), "split": args.split}, args.out)
    s = report.summary()
    print(f"psnr rig {s['rig']['psnr']} unseen {s['unseen']['psnr']}; report {args.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nerror: a subcommand is required")
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USER
    except (FileNotFoundError, SplatDiffError) as exc:
        if isinstance(exc, (PipelineError, NonFiniteLossError)):
            print(f"internal error: {exc}", file=sys.stderr)
            return EXIT_INTERNAL
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
