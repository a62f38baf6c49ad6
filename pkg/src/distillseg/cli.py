"""Command-line interface: train-teacher, distill, eval, segment, augment, serve.

Exit codes: 0 success, 1 runtime failure, 2 bad usage or bad configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigurationError, DistillsegError

SPLIT_RATIOS = (0.8, 0.1, 0.1)


def _load_distill_config(path: str | None, seed: int | None):
    from .configio import apply_env_overrides, load_config_file
    from .distill import DistillConfig

    data = load_config_file(path) if path else {}
    data = apply_env_overrides(data)
    if seed is not None:
        data["seed"] = seed
    try:
        return DistillConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigurationError(f"bad config values: {exc}") from exc


def _load_split(data_dir: str, seed: int):
    from . import imaging

    samples = imaging.load_dataset(data_dir)
    split = imaging.split_dataset(samples, SPLIT_RATIOS, seed=seed)
    return imaging.SplitData(samples={s.id: s for s in samples}, split=split)


def cmd_train_teacher(args) -> int:
    from . import distill, nets
    from .checkpoint import save_model

    cfg = _load_distill_config(args.config, args.seed)
    data = _load_split(args.data, cfg.seed)
    model = nets.build_teacher(args.arch, seed=cfg.seed)
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    model = distill.train_teacher(model, data, cfg, log_path=log_path)
    save_model(args.out, model)
    print(f"wrote {args.out} (log: {log_path})")
    return 0


def cmd_distill(args) -> int:
    from . import distill, nets
    from .checkpoint import load_model, save_model

    cfg = _load_distill_config(args.config, args.seed)
    data = _load_split(args.data, cfg.seed)
    teachers = [load_model(p) for p in args.teachers]
    student = nets.build_student(seed=cfg.seed)
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    result = distill.distill_student(teachers, student, data, cfg, log_path=log_path)
    save_model(args.out, result.model)
    print(f"wrote {args.out} (best val loss {result.state.best_val_loss:.6f}, "
          f"log: {log_path})")
    return 0


def cmd_eval(args) -> int:
    from . import imaging, metrics
    from .checkpoint import load_model
    from .prompts import box_from_mask

    model = load_model(args.model)
    samples = imaging.load_dataset(args.data)
    prompt_fn = None
    if model.accepts_prompts:
        # ground-truth-box fallback in place of a detector
        prompt_fn = lambda s: box_from_mask(s.mask, pad=1)  # noqa: E731
    report = metrics.evaluate(model, samples, threshold=args.threshold,
                              prompt_fn=prompt_fn)
    csv_path = args.csv or str(Path(args.report).with_suffix(".csv"))
    report.save(args.report, csv_path)
    print(f"wrote {args.report} and {csv_path}; aggregate miou "
          f"{report.aggregate['miou']:.4f}")
    return 0


def cmd_segment(args) -> int:
    from . import imaging
    from .checkpoint import load_model
    from .distill import infer
    from .prompts import prompt_from_json

    model = load_model(args.model)
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prompt_table = {}
    if args.prompts:
        prompt_table = json.loads(Path(args.prompts).read_text())
    paths = sorted(p for p in in_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        print(f"no images in {in_dir}", file=sys.stderr)
        return 1
    for path in paths:
        image = imaging.load_image(path)
        prompt = None
        if path.stem in prompt_table:
            prompt = prompt_from_json(prompt_table[path.stem],
                                      width=image.width, height=image.height)
        result = infer(model, image, prompt=prompt, threshold=args.threshold)
        imaging.save_mask(result.mask, out_dir / f"{path.stem}.png")
    print(f"wrote {len(paths)} masks to {out_dir}")
    return 0


def cmd_augment(args) -> int:
    import numpy as np

    from . import augment, imaging

    queue = augment.ScreeningQueue(args.queue)
    if args.mode == "ddpm":
        sched = augment.make_schedule(args.schedule, args.steps)
        den = augment.ToyDenoiser(channels=3, seed=args.seed)
        if args.data and args.train_epochs > 0:
            images = [s.image for s in imaging.load_dataset(args.data)]
            den, _ = augment.train_denoiser(
                den, images, sched,
                augment.DenoiserTrainConfig(epochs=args.train_epochs, seed=args.seed),
            )
        for i in range(args.n):
            img = augment.sample(den, sched, (3, args.size, args.size),
                                 seed=args.seed + i)
            queue.add(img, source="ddpm")
    else:  # composite
        if not args.data:
            raise ConfigurationError("composite mode requires --data")
        samples = imaging.load_dataset(args.data)
        rng = np.random.default_rng(args.seed)
        for i in range(args.n):
            s = samples[int(rng.integers(0, len(samples)))]
            noise = rng.uniform(0.0, 1.0, size=(2, 2, 3))
            from scipy import ndimage

            bg = ndimage.zoom(noise, (s.image.height / 2, s.image.width / 2, 1),
                              order=1, mode="nearest", grid_mode=True)
            bg = imaging.RasterImage(
                np.clip(bg[: s.image.height, : s.image.width], 0, 1).astype(np.float32)
            )
            queue.add(augment.composite_background(s.image, s.mask, bg),
                      source="composite")
    print(f"enqueued {args.n} pending candidates in {args.queue}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    cfg = ServiceConfig(models_dir=args.models, jobs_dir=args.jobs,
                        queue_dir=args.queue, token=args.token)
    app = create_app(cfg)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillseg",
        description="Tongue segmentation: teacher training, multi-teacher "
                    "distillation, evaluation, batch segmentation, diffusion "
                    "augmentation, and the HTTP service.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="fine-tune one teacher")
    p.add_argument("--arch", required=True,
                   choices=("prompt_vit", "unet_like", "deeplab_like"))
    p.add_argument("--data", required=True, help="dataset dir with manifest.tsv")
    p.add_argument("--config", help="JSON/TOML training config")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="JSON-lines training log path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill teachers into the student")
    p.add_argument("--teachers", nargs="+", required=True)
    p.add_argument("--config", help="JSON/TOML training config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output JSON report path")
    p.add_argument("--csv", help="output CSV path (default: report with .csv)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="offline batch segmentation")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--prompts", help="JSON file: image stem -> prompt object")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("augment", help="generate screening candidates")
    p.add_argument("--mode", required=True, choices=("ddpm", "composite"))
    p.add_argument("--queue", required=True, help="screening queue directory")
    p.add_argument("--data", help="dataset dir (composite source / ddpm training)")
    p.add_argument("-n", type=int, default=3)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--schedule", default="linear", choices=("linear", "cosine"))
    p.add_argument("--train-epochs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--models", required=True, help="directory of .ckpt files")
    p.add_argument("--jobs", default="jobs")
    p.add_argument("--queue", default="screening")
    p.add_argument("--token", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DistillsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
