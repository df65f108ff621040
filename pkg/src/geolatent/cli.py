"""Command-line entry point: data generation, training, evaluation, demos.

Subcommands mirror the experiment pipeline: `gen-data` builds the
synthetic multi-view dataset, `train-rep` and `train-pose` run the two
training stages, `eval` scores a checkpoint on held-out subjects,
`ablate` and `sweep-budgets` run the experiment grids, and `nvs`,
`swap-appearance`, `switch-background` produce the qualitative image
strips.  `report` collects run directories into a CSV and a plot.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import datapipe, geometry, metrics, nets, synthworld, train


class CliError(Exception):
    """User-facing failure with a one-line message."""


def apply_thread_limit():
    value = os.environ.get("GEOLATENT_THREADS")
    if value:
        import torch

        torch.set_num_threads(int(value))


def load_train_config(args) -> train.TrainConfig:
    overrides = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides.update(json.load(fh))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    try:
        return train.TrainConfig(**overrides)
    except TypeError as exc:
        raise CliError(f"bad config: {exc}") from exc


def resolve_checkpoint(path: str):
    """Accept a model directory or a run directory; return (model, stats)."""
    if os.path.exists(os.path.join(path, "descriptor.json")):
        model_dir = path
        run_dir = os.path.dirname(os.path.dirname(path.rstrip("/")))
    elif os.path.isdir(os.path.join(path, "checkpoints")):
        steps = sorted(
            (int(d.split("_")[1]), d)
            for d in os.listdir(os.path.join(path, "checkpoints"))
            if d.startswith("step_")
        )
        if not steps:
            raise CliError(f"no checkpoints under {path}")
        model_dir = os.path.join(path, "checkpoints", steps[-1][1])
        run_dir = path
    else:
        raise CliError(f"no checkpoint found at {path}")
    model = nets.load_model(model_dir).eval()
    stats = None
    stats_path = os.path.join(run_dir, "norm_stats.json")
    if os.path.exists(stats_path):
        with open(stats_path) as fh:
            stats = datapipe.NormStats.from_json(json.load(fh))
    return model, stats


def resolve_background(spec: str, dataset, subject, camera, size):
    if spec == "white":
        return np.ones((size, size, 3), dtype=np.float32)
    if spec == "original":
        return dataset.background(subject, camera)
    bg = synthworld.load_png(spec)
    if bg.shape[:2] != (size, size):
        raise CliError(f"background size {bg.shape[:2]} does not match model {size}")
    return bg.astype(np.float32)


def save_image(img: np.ndarray, path: str):
    from PIL import Image

    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def decode_latent(model, geometry, appearance, background):
    """Decode, supplying the identity rotation for the flat-latent variant."""
    import torch

    bg = nets.to_tensor(background)
    with torch.no_grad():
        if model.uses_3d_latent:
            return nets.to_image(model.decode(geometry, appearance, bg))[0]
        return nets.to_image(
            model.decode(geometry, appearance, bg, rotation=np.eye(3))
        )[0]


def parse_angles(text: str, radians: bool) -> list:
    angles = []
    for part in text.split(","):
        value = float(part)
        if radians:
            angles.append(value % (2.0 * np.pi))
        else:
            angles.append(np.deg2rad(value % 360.0))
    return angles


def cmd_gen_data(args) -> int:
    config = synthworld.DatasetConfig(
        out_dir=args.out, num_subjects=args.subjects, num_cameras=args.cameras,
        num_frames=args.frames, image_size=args.size, seed=args.seed or 0,
    )
    synthworld.make_dataset(config)
    print(f"dataset written to {args.out}")
    return 0


def cmd_train_rep(args) -> int:
    config = load_train_config(args)
    if args.steps is not None:
        config = train.TrainConfig(**{**config.to_json(), "rep_steps": args.steps})
    dataset = datapipe.MultiViewDataset(args.data)
    train_subjects, _ = train.split_subjects(dataset)
    view = dataset.view(train_subjects)
    train.train_representation(view, config, out_dir=args.out)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump({"train": config.to_json(), "stage": "representation"}, fh, indent=2)
    print(f"representation run in {args.out}")
    return 0


def cmd_train_pose(args) -> int:
    config = load_train_config(args)
    if args.steps is not None:
        config = train.TrainConfig(**{**config.to_json(), "head_steps": args.steps})
    if args.fine_tune:
        config = train.TrainConfig(**{**config.to_json(), "fine_tune_encoder": True})
    model, _ = resolve_checkpoint(args.checkpoint)
    scenario = train.Scenario(kind="semi", budget=args.budget,
                              eval_stride=args.eval_stride, name="train-pose")
    record = train.run_scenario(scenario, args.data, config, out_dir=args.out,
                                pretrained=model)
    print(f"n-mpjpe {record.metrics.n_mpjpe:.2f} mm on held-out subjects")
    return 0


def cmd_eval(args) -> int:
    model, stats = resolve_checkpoint(args.checkpoint)
    if stats is None:
        raise CliError("checkpoint has no norm_stats.json; train the pose head first")
    dataset = datapipe.MultiViewDataset(args.data)
    train_subjects, test_subjects = train.split_subjects(dataset)
    testset = train.labeled_test_set(dataset, test_subjects, args.eval_stride)
    report = metrics.evaluate_model(model, None, testset, stats, train_subjects)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
    print(f"mpjpe {report.mpjpe:.2f}  n-mpjpe {report.n_mpjpe:.2f}  "
          f"p-mpjpe {report.p_mpjpe:.2f}  samples {report.sample_count}")
    return 0


def cmd_ablate(args) -> int:
    config = load_train_config(args)
    results = train.run_ablations(args.data, config, budget=args.budget,
                                  out_dir=args.out, eval_stride=args.eval_stride)
    for name, record in results.items():
        print(f"{name}: n-mpjpe {record.metrics.n_mpjpe:.2f}")
    return 0


def cmd_sweep_budgets(args) -> int:
    config = load_train_config(args)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    results = train.sweep_budgets(args.data, config, fractions=fractions,
                                  out_dir=args.out, eval_stride=args.eval_stride)
    for fraction, record in sorted(results.items(), reverse=True):
        print(f"budget {fraction}: n-mpjpe {record.metrics.n_mpjpe:.2f} "
              f"({record.num_labels} labels)")
    return 0


def _load_source(args):
    dataset = datapipe.MultiViewDataset(args.data)
    img = dataset.image(args.subject, args.camera, args.frame)
    return dataset, img


def cmd_nvs(args) -> int:
    import torch

    model, _ = resolve_checkpoint(args.checkpoint)
    dataset, img = _load_source(args)
    size = model.config.image_size
    background = resolve_background(args.bg, dataset, args.subject, args.camera, size)
    angles = parse_angles(args.angles, args.radians)
    os.makedirs(args.out, exist_ok=True)
    frames = []
    src = nets.to_tensor(img)
    bg = nets.to_tensor(background)
    with torch.no_grad():
        for angle in angles:
            rot = geometry.rotation_from_euler(angle, 0.0, 0.0)
            out = nets.to_image(model.reconstruct(src, rot, src, bg))[0]
            frames.append(out)
            save_image(out, os.path.join(args.out, f"angle_{np.rad2deg(angle):07.2f}.png"))
    strip = np.concatenate([img] + frames, axis=1)
    save_image(strip, os.path.join(args.out, "strip.png"))
    print(f"{len(frames)} novel views in {args.out}")
    return 0


def cmd_swap_appearance(args) -> int:
    model, _ = resolve_checkpoint(args.checkpoint)
    if not 0.0 <= args.alpha <= 1.0:
        raise CliError(f"alpha {args.alpha} outside [0, 1]")
    dataset, img_a = _load_source(args)
    img_b = dataset.image(args.subject_b, args.camera_b, args.frame_b)
    size = model.config.image_size
    background = resolve_background(args.bg, dataset, args.subject, args.camera, size)
    import torch

    with torch.no_grad():
        code_a = model.encode(nets.to_tensor(img_a))
        code_b = model.encode(nets.to_tensor(img_b))
        blended = (1.0 - args.alpha) * code_a.appearance + args.alpha * code_b.appearance
        out = decode_latent(model, code_a.geometry, blended, background)
    os.makedirs(args.out, exist_ok=True)
    save_image(out, os.path.join(args.out, f"blend_{args.alpha:.2f}.png"))
    print(f"appearance blend written to {args.out}")
    return 0


def cmd_switch_background(args) -> int:
    model, _ = resolve_checkpoint(args.checkpoint)
    dataset, img = _load_source(args)
    size = model.config.image_size
    background = resolve_background(args.bg, dataset, args.subject, args.camera, size)
    import torch

    with torch.no_grad():
        code = model.encode(nets.to_tensor(img))
        out = decode_latent(model, code.geometry, code.appearance, background)
    os.makedirs(args.out, exist_ok=True)
    save_image(out, os.path.join(args.out, "switched.png"))
    print(f"background switch written to {args.out}")
    return 0


def collect_run_records(paths: list) -> list:
    records = []
    for path in paths:
        config_path = os.path.join(path, "config.json")
        metrics_path = os.path.join(path, "metrics.json")
        if not (os.path.exists(config_path) and os.path.exists(metrics_path)):
            raise CliError(f"{path} is not a run directory")
        with open(config_path) as fh:
            config = json.load(fh)
        with open(metrics_path) as fh:
            report = metrics.MetricReport.from_json(json.load(fh))
        name = config.get("scenario", {}).get("name") or os.path.basename(path.rstrip("/"))
        records.append({"scenario": name, "num_labels": config.get("num_labels", 0),
                        "report": report})
    return records


def cmd_report(args) -> int:
    paths = [p for p in args.runs.split(",") if p]
    records = collect_run_records(paths)
    records.sort(key=lambda r: -r["num_labels"])
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "report.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "num_labels", "mpjpe", "n_mpjpe", "p_mpjpe"])
        for rec in records:
            r = rec["report"]
            writer.writerow([rec["scenario"], rec["num_labels"],
                             f"{r.mpjpe:.4f}", f"{r.n_mpjpe:.4f}", f"{r.p_mpjpe:.4f}"])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    labels = [rec["num_labels"] for rec in records]
    for key, style in (("mpjpe", "o-"), ("n_mpjpe", "s-"), ("p_mpjpe", "^-")):
        ax.plot(labels, [getattr(rec["report"], key) for rec in records], style, label=key)
    ax.set_xlabel("labeled samples")
    ax.set_ylabel("error (mm)")
    if len(set(labels)) > 1 and min(labels) > 0:
        ax.set_xscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, "error_vs_labels.png"), dpi=120)
    plt.close(fig)
    print(f"report with {len(records)} rows in {args.out}")
    return 0


def _add_common(parser, data=True, checkpoint=False):
    if data:
        parser.add_argument("--data", required=True, help="dataset directory")
    if checkpoint:
        parser.add_argument("--checkpoint", required=True,
                            help="model or run directory")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None)


def _add_source_args(parser):
    parser.add_argument("--subject", type=int, default=0)
    parser.add_argument("--camera", type=int, default=0)
    parser.add_argument("--frame", type=int, default=0)
    parser.add_argument("--bg", default="original",
                        help="white, original, or a PNG path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geolatent",
        description="Geometry-aware latent representation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p, data=False)
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-rep", help="stage 1: representation training")
    _add_common(p)
    p.add_argument("--config", help="JSON file of training overrides")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_rep)

    p = sub.add_parser("train-pose", help="stage 2: pose head training")
    _add_common(p, checkpoint=True)
    p.add_argument("--config", help="JSON file of training overrides")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--budget", type=float, default=1.0)
    p.add_argument("--fine-tune", action="store_true")
    p.add_argument("--eval-stride", type=int, default=1)
    p.set_defaults(func=cmd_train_pose)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--eval-stride", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation grid")
    _add_common(p)
    p.add_argument("--config", help="JSON file of training overrides")
    p.add_argument("--budget", type=float, default=0.05)
    p.add_argument("--eval-stride", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-budgets", help="label-budget sweep")
    _add_common(p)
    p.add_argument("--config", help="JSON file of training overrides")
    p.add_argument("--fractions", default="1.0,0.5,0.1,0.05,0.01")
    p.add_argument("--eval-stride", type=int, default=1)
    p.set_defaults(func=cmd_sweep_budgets)

    p = sub.add_parser("nvs", help="novel-view strip for one source image")
    _add_common(p, checkpoint=True)
    _add_source_args(p)
    p.add_argument("--angles", default="0,45,90,135,180,225,270,315")
    p.add_argument("--radians", action="store_true")
    p.set_defaults(func=cmd_nvs)

    p = sub.add_parser("swap-appearance", help="blend appearance between frames")
    _add_common(p, checkpoint=True)
    _add_source_args(p)
    p.add_argument("--subject-b", type=int, default=1)
    p.add_argument("--camera-b", type=int, default=0)
    p.add_argument("--frame-b", type=int, default=0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.set_defaults(func=cmd_swap_appearance)

    p = sub.add_parser("switch-background", help="decode over a new background")
    _add_common(p, checkpoint=True)
    _add_source_args(p)
    p.set_defaults(func=cmd_switch_background)

    p = sub.add_parser("report", help="tables and plots from run directories")
    p.add_argument("--runs", required=True, help="comma-separated run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    apply_thread_limit()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
