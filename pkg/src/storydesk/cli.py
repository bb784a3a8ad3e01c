"""Command-line interface: dataset generation, training, sampling, evaluation,
and serving, all against one model and one sampling code path.

Exit codes: 0 success, 1 runtime failure, 2 argument error.
Flags override values from --config (a JSON file of flag defaults), which
override built-in defaults. When a checkpoint path does not exist as given,
it is also tried under $STORYDESK_CHECKPOINT_DIR.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .captions import Caption
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .errors import StoryDeskError
from .layout import FrameMask, LatentStoryboard, StoryboardLayout
from .model import build_story_model, desk_model_config, tiny_model_config
from .sampler import SamplerConfig, ddim_masked_sample
from .stories import (
    Story,
    generate_dataset,
    image_to_uint8,
    load_dataset,
    load_frame_image,
    save_dataset,
    uint8_to_image,
)
from .training import TrainConfig, Trainer

CHECKPOINT_DIR_ENV = "STORYDESK_CHECKPOINT_DIR"


class UsageError(Exception):
    """Argument-level problem: reported on one line, exit code 2."""


def _require(args: argparse.Namespace, *names: str) -> None:
    """Presence check deferred past the --config merge, so a config file can
    satisfy a flag the command line omits."""
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def resolve_task_mask(task: str, num_frames: int, mask_bits: str | None,
                      given_frames: int = 1) -> FrameMask:
    """Map a task preset to its frame mask (1 = generate).

    visualize -> all ones; continue -> leading `given_frames` zeros;
    complete -> explicit --mask bit string.
    """
    if task == "visualize":
        return FrameMask.full(num_frames)
    if task == "continue":
        if not 1 <= given_frames < num_frames:
            raise UsageError(
                f"--given must lie in [1, {num_frames - 1}], got {given_frames}"
            )
        return FrameMask(
            (False,) * given_frames + (True,) * (num_frames - given_frames)
        )
    if task == "complete":
        if mask_bits is None:
            raise UsageError("--task complete requires --mask")
        try:
            mask = FrameMask.from_string(mask_bits)
        except StoryDeskError as exc:
            raise UsageError(str(exc)) from exc
        if len(mask) != num_frames:
            raise UsageError(
                f"--mask has {len(mask)} bits, the model expects {num_frames}"
            )
        return mask
    raise UsageError(f"unknown task {task!r}")


def resolve_checkpoint_path(path: str) -> Path:
    candidate = Path(path)
    if candidate.exists():
        return candidate
    env_dir = os.environ.get(CHECKPOINT_DIR_ENV)
    if env_dir:
        fallback = Path(env_dir) / path
        if fallback.exists():
            return fallback
        raise UsageError(
            f"checkpoint {path!r} not found (also tried {fallback})"
        )
    raise UsageError(
        f"checkpoint {path!r} not found (set ${CHECKPOINT_DIR_ENV} to add a "
        f"search directory)"
    )


def _write_png(path: Path, img_uint8: np.ndarray) -> None:
    Image.fromarray(img_uint8).save(path)


def _load_captions_file(path: str, num_frames: int) -> list[Caption]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read captions file {path!r}: {exc}") from exc
    if not isinstance(data, list) or len(data) != num_frames:
        raise UsageError(
            f"captions file must hold a list of {num_frames} caption objects"
        )
    try:
        return [Caption.from_json(obj) for obj in data]
    except StoryDeskError as exc:
        raise UsageError(str(exc)) from exc


def cmd_dataset_gen(args: argparse.Namespace) -> int:
    _require(args, "out")
    layout = StoryboardLayout(
        num_frames=args.frames, grid_rows=args.rows, grid_cols=args.cols,
        frame_height=args.size, frame_width=args.size,
    )
    stories = generate_dataset(args.count, args.seed, layout)
    save_dataset(stories, args.out, layout, args.seed)
    print(f"wrote {len(stories)} stories to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, "out")
    if args.dataset:
        stories, layout, _ = load_dataset(args.dataset)
    else:
        config_preview = desk_model_config() if args.preset == "desk" \
            else tiny_model_config()
        layout = config_preview.layout
        stories = generate_dataset(args.count, args.data_seed, layout)

    model_config = desk_model_config() if args.preset == "desk" \
        else tiny_model_config()
    if layout != model_config.layout:
        raise UsageError(
            f"dataset layout {layout.to_json()} does not match the "
            f"{args.preset} model layout {model_config.layout.to_json()}"
        )
    model = build_story_model(model_config, seed=args.seed)
    train_config = TrainConfig(
        batch_size=args.batch_size,
        lr_denoiser=args.lr,
        lr_context=args.lr_context,
        steps=args.steps,
        p_full=args.p_full,
        caption_dropout=args.caption_dropout,
        seed=args.seed,
        log_every=args.log_every,
    )
    trainer = Trainer(model, stories, train_config)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def log(step: int, loss: float, elapsed: float) -> None:
        print(f"step {step:>6}  loss {loss:.5f}  {elapsed:8.1f}s", flush=True)
        if args.checkpoint_every and step % args.checkpoint_every == 0:
            save_checkpoint(model, out, step=step,
                            train_config=train_config.to_json())

    trainer.train(on_log=log)
    save_checkpoint(model, out, step=trainer.step_count,
                    train_config=train_config.to_json())
    manifest = {
        "command": "train",
        "seed": args.seed,
        "steps": trainer.step_count,
        "train_config": train_config.to_json(),
        "model_config": model_config.to_json(),
        "checkpoint": str(out),
        "checkpoint_hash": checkpoint_hash(out),
        "version": __version__,
    }
    out.with_suffix(".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    print(f"saved checkpoint to {out}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    _require(args, "checkpoint", "captions", "out")
    ckpt_path = resolve_checkpoint_path(args.checkpoint)
    model, _ = load_checkpoint(ckpt_path)
    layout = model.layout
    mask = resolve_task_mask(args.task, layout.num_frames, args.mask, args.given)
    captions = _load_captions_file(args.captions, layout.num_frames)

    given_images: dict[int, np.ndarray] = {}
    if not mask.all_target:
        if not args.frames:
            raise UsageError(
                "mask leaves frames given; supply them with --frames DIR"
            )
        for i, bit in enumerate(mask.bits):
            if bit:
                continue
            path = Path(args.frames) / f"frame_{i}.png"
            if not path.exists():
                raise UsageError(f"given frame missing: {path}")
            img = np.asarray(Image.open(path).convert("RGB"))
            expected = (layout.frame_height, layout.frame_width, 3)
            if img.shape != expected:
                raise UsageError(
                    f"{path} has shape {img.shape}, expected {expected}"
                )
            given_images[i] = img

    canvas = np.full(
        (layout.canvas_height, layout.canvas_width, 3), 0.5, dtype=np.float32
    )
    for i, img in given_images.items():
        r, c = divmod(i, layout.grid_cols)
        h, w = layout.frame_height, layout.frame_width
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = uint8_to_image(img)

    x0_known = LatentStoryboard(
        model.codec.encode(torch.from_numpy(canvas).permute(2, 0, 1).contiguous()),
        layout,
    )
    sampler_config = SamplerConfig(
        steps=args.steps, guidance_scale=args.guidance, eta=args.eta,
        seed=args.seed,
    )
    result = ddim_masked_sample(model, x0_known, mask, captions, sampler_config)
    decoded = model.codec.decode(result.data).clamp(0.0, 1.0)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame_arrays = []
    h, w = layout.frame_height, layout.frame_width
    for i in range(layout.num_frames):
        if i in given_images:
            frame = given_images[i]
        else:
            r, c = divmod(i, layout.grid_cols)
            tile = decoded[:, r * h:(r + 1) * h, c * w:(c + 1) * w]
            frame = image_to_uint8(tile.permute(1, 2, 0).numpy())
        frame_arrays.append(frame)
        _write_png(out_dir / f"frame_{i}.png", frame)

    board = np.zeros(
        (layout.canvas_height, layout.canvas_width, 3), dtype=np.uint8
    )
    for i, frame in enumerate(frame_arrays):
        r, c = divmod(i, layout.grid_cols)
        board[r * h:(r + 1) * h, c * w:(c + 1) * w] = frame
    _write_png(out_dir / "storyboard.png", board)

    manifest = {
        "command": "sample",
        "task": args.task,
        "mask": mask.to_string(),
        "seed": args.seed,
        "sampler": {
            "steps": args.steps, "guidance_scale": args.guidance,
            "eta": args.eta,
        },
        "captions": [c.to_json() for c in captions],
        "checkpoint": str(ckpt_path),
        "checkpoint_hash": checkpoint_hash(ckpt_path),
        "layout": layout.to_json(),
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {layout.num_frames} frames to {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .evaluation import (
        evaluate,
        load_probe,
        probe_training_data,
        save_probe,
        train_probe,
    )

    _require(args, "checkpoint")
    ckpt_path = resolve_checkpoint_path(args.checkpoint)
    model, _ = load_checkpoint(ckpt_path)
    layout = model.layout

    if args.dataset:
        stories, data_layout, _ = load_dataset(args.dataset)
        if data_layout != layout:
            raise UsageError("dataset layout does not match the checkpoint")
    else:
        stories = generate_dataset(args.count, args.data_seed, layout)
    stories = stories[: args.count]

    if args.probe and Path(args.probe).exists():
        probe = load_probe(args.probe)
    else:
        frames, labels = probe_training_data(stories, layout)
        probe = train_probe(frames, labels, layout.frame_height,
                            layout.frame_width, seed=args.seed)
        if args.probe:
            save_probe(probe, args.probe)

    sampler_config = SamplerConfig(
        steps=args.steps, guidance_scale=args.guidance, seed=args.seed
    )
    report = evaluate(
        model, probe, stories, args.preset, sampler_config, seed=args.seed,
        given_count=args.given_count, batch_size=args.batch_size,
    )
    print(report.format_table())
    if args.out:
        payload = report.to_json()
        payload["checkpoint_hash"] = checkpoint_hash(ckpt_path)
        payload["seed"] = args.seed
        Path(args.out).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
    if args.csv:
        report.write_csv(args.csv)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    ckpt_path = resolve_checkpoint_path(args.checkpoint) if args.checkpoint \
        else None
    app = create_app(
        checkpoint_path=ckpt_path, queue_depth=args.queue_depth
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storydesk",
        description="Masked storyboard diffusion: one model for story "
                    "visualization, continuation, and completion.",
    )
    parser.add_argument("--config", help="JSON file of flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="dataset utilities")
    dataset_sub = p_dataset.add_subparsers(dest="dataset_command", required=True)
    p_gen = dataset_sub.add_parser("gen", help="generate a shape-story dataset")
    p_gen.add_argument("-n", "--count", type=int, default=100)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out")
    p_gen.add_argument("--frames", type=int, default=4)
    p_gen.add_argument("--rows", type=int, default=2)
    p_gen.add_argument("--cols", type=int, default=2)
    p_gen.add_argument("--size", type=int, default=32)
    p_gen.set_defaults(func=cmd_dataset_gen)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--dataset", help="dataset directory (else generated)")
    p_train.add_argument("--count", type=int, default=2000,
                         help="stories to generate when --dataset is omitted")
    p_train.add_argument("--data-seed", type=int, default=0)
    p_train.add_argument("--preset", choices=("desk", "tiny"), default="desk")
    p_train.add_argument("--out", help="checkpoint output path")
    p_train.add_argument("--steps", type=int, default=4000)
    p_train.add_argument("--batch-size", type=int, default=8)
    p_train.add_argument("--lr", type=float, default=3e-4)
    p_train.add_argument("--lr-context", type=float, default=1e-4)
    p_train.add_argument("--p-full", type=float, default=0.5)
    p_train.add_argument("--caption-dropout", type=float, default=0.1)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--log-every", type=int, default=100)
    p_train.add_argument("--checkpoint-every", type=int, default=0)
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="generate storyboard frames")
    p_sample.add_argument("--checkpoint")
    p_sample.add_argument(
        "--task", choices=("visualize", "continue", "complete"),
        default="visualize",
    )
    p_sample.add_argument("--mask", help="bit string, 1 = generate that frame")
    p_sample.add_argument("--given", type=int, default=1,
                          help="leading given frames for --task continue")
    p_sample.add_argument("--frames", help="directory of given frame_<i>.png")
    p_sample.add_argument("--captions",
                          help="JSON file with one caption object per frame")
    p_sample.add_argument("--out")
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--steps", type=int, default=50)
    p_sample.add_argument("--guidance", type=float, default=6.0)
    p_sample.add_argument("--eta", type=float, default=0.0)
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="score a checkpoint")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--dataset", help="dataset directory (else generated)")
    p_eval.add_argument("--count", type=int, default=64)
    p_eval.add_argument("--data-seed", type=int, default=1000)
    p_eval.add_argument(
        "--preset", choices=("visualize", "continue", "complete"),
        default="visualize",
    )
    p_eval.add_argument("--given-count", type=int, default=2,
                        help="locked frames for --preset complete")
    p_eval.add_argument("--probe", help="probe checkpoint (trained if missing)")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--steps", type=int, default=50)
    p_eval.add_argument("--guidance", type=float, default=6.0)
    p_eval.add_argument("--batch-size", type=int, default=16)
    p_eval.add_argument("--out", help="write the report JSON here")
    p_eval.add_argument("--csv", help="write per-frame decodes here")
    p_eval.set_defaults(func=cmd_eval)

    p_serve = sub.add_parser("serve", help="run the HTTP generation service")
    p_serve.add_argument("--checkpoint")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--queue-depth", type=int, default=4)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def _apply_config_defaults(parser: argparse.ArgumentParser,
                           overrides: dict) -> None:
    """Install config values as defaults on the parser and every subparser.

    Subcommands parse into a fresh namespace that re-applies their own
    defaults, so top-level set_defaults alone never reaches subcommand flags.
    """
    parser.set_defaults(**overrides)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_config_defaults(sub, overrides)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()

    probe_args, _ = parser.parse_known_args(argv)
    if probe_args.config:
        try:
            overrides = json.loads(Path(probe_args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config {probe_args.config!r}: {exc}",
                  file=sys.stderr)
            return 2
        if not isinstance(overrides, dict):
            print("error: config file must hold a JSON object", file=sys.stderr)
            return 2
        _apply_config_defaults(parser, overrides)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StoryDeskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
