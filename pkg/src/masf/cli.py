"""Command line entry point: ``masf {train,eval,bench,inspect,render,generate,ablate}``.

Results go to stdout as tab-separated text; figures are written as PNG files.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from masf.errors import ConfigError, DataError, MasfError
from masf.network import MasfYolo, ModelConfig, count_params, estimate_gflops
from masf.tensor import Tensor


def _model_config(path) -> ModelConfig:
    return ModelConfig.load(path) if path else ModelConfig.full()


def _train_config(path, **overrides):
    from masf.train import TrainConfig

    cfg = TrainConfig.load(path) if path else TrainConfig()
    d = cfg.to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


def _tsv(rows: list[list]) -> str:
    return "".join("\t".join(str(c) for c in row) + "\n" for row in rows)


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from masf.data import load_data
    from masf.report import plot_training_curves
    from masf.train import run_training

    model_cfg = _model_config(args.model_config)
    train_cfg = _train_config(args.train_config, image_size=model_cfg.image_size, epochs=args.epochs)
    data = load_data(args.data, model_cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg.save(out / "model_config.json")
    (out / "train_config.json").write_text(json.dumps(train_cfg.to_dict(), indent=2) + "\n")
    cols = ["epoch", "loss", "box", "cls", "lr", "map50", "map5095", "seconds"]
    print("\t".join(cols), flush=True)

    def log(rec, secs):
        vals = [rec["epoch"]] + [f"{rec[k]:.4f}" for k in ("loss", "box", "cls")]
        vals += [f"{rec['lr']:.6f}"]
        vals += ["-" if rec[k] is None else f"{rec[k]:.4f}" for k in ("map50", "map5095")]
        print("\t".join(map(str, vals + [f"{secs:.1f}"])), flush=True)

    result = run_training(model_cfg, train_cfg, data, out, log_fn=None if args.quiet else log)
    plot_training_curves(result["records"], out / "training_curves.png")
    for key in ("skipped_gts", "collisions", "nonfinite_cells"):
        if result["stats"].get(key):
            print(f"# {key}\t{result['stats'][key]}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from masf.data import load_data
    from masf.metrics import class_pr_curves
    from masf.postproc import write_predictions
    from masf.report import plot_pr_curves
    from masf.train import TrainConfig, evaluate_model, load_checkpoint

    model, meta = load_checkpoint(args.checkpoint)
    train_cfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else TrainConfig()
    data = load_data(args.data, model.config.image_size, fmt=args.format)
    if args.split not in data:
        raise DataError(f"split {args.split!r} not in data (have {sorted(data)})")
    split = data[args.split]
    report, preds = evaluate_model(model, split, train_cfg, method=args.ap_method)
    sys.stdout.write(report.table())
    rows = [["class", "AP50"]] + [[c, f"{100 * ap:.1f}"] for c, ap in sorted(report.per_class_ap.items())]
    sys.stdout.write(_tsv(rows))
    if report.flagged_classes:
        print(f"# predicted classes without ground truth: {report.flagged_classes}", file=sys.stderr)
    if args.report:
        out = Path(args.report)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        gts = {split[k][2]: split[k][1] for k in range(len(split))}
        plot_pr_curves(class_pr_curves(preds, gts), out / "pr_curves.png")
    if args.predictions:
        write_predictions(args.predictions, preds)
    return 0


def cmd_bench(args) -> int:
    cfg = _model_config(args.model_config)
    model = MasfYolo(cfg).eval()
    images = Tensor(np.random.default_rng(0).uniform(size=(args.batch, 3, cfg.image_size, cfg.image_size))
                    .astype(np.float32))
    from masf.tensor import no_grad

    with no_grad():
        model(images)
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            model(images)
            times.append(time.perf_counter() - t0)
    rows = [["params (M)", "GFLOPs", "batch", "ms/forward (median)", "ms/forward (min)"],
            [f"{count_params(model) / 1e6:.4f}", f"{estimate_gflops(model):.4f}", args.batch,
             f"{1e3 * float(np.median(times)):.1f}", f"{1e3 * min(times):.1f}"]]
    sys.stdout.write(_tsv(rows))
    return 0


def cmd_inspect(args) -> int:
    cfg = _model_config(args.model_config)
    model = MasfYolo(cfg)
    rows = [["layer", "output", "params", "conv FLOPs", "elementwise FLOPs"]]
    for r in model.layer_table():
        rows.append([r["layer"], "x".join(map(str, r["output"])), r["params"], r["conv_flops"],
                     r["elementwise_flops"]])
    rows.append(["total", "", count_params(model), "", f"{estimate_gflops(model):.4f} GFLOPs"])
    sys.stdout.write(_tsv(rows))
    return 0


def _render_input(args, image_size):
    """Letterboxed image and ground truth from a file or ``synthetic:<seed>``."""
    from masf.data import GenConfig, generate_scene, letterbox, parse_annotations, read_image

    if args.image.startswith("synthetic:"):
        try:
            seed = int(args.image.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad synthetic image spec {args.image!r}") from None
        scene = generate_scene(GenConfig(image_size=image_size), seed)
        return scene.image.data, scene.gts
    path = Path(args.image)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    raw = read_image(path)
    boxed, tf = letterbox(raw, image_size)
    gts = []
    if args.annotations:
        h, w = raw.shape[2:]
        gts = [tf.forward_gt(g) for g in parse_annotations(args.annotations, args.format, (w, h))]
    return boxed.data, gts


def cmd_render(args) -> int:
    from masf.postproc import postprocess
    from masf.report import render_comparison
    from masf.tensor import no_grad
    from masf.train import load_checkpoint

    model_a, _ = load_checkpoint(args.checkpoint_a)
    model_b, _ = load_checkpoint(args.checkpoint_b)
    if model_a.config.image_size != model_b.config.image_size:
        raise ConfigError("checkpoints were built for different image sizes")
    image, gts = _render_input(args, model_a.config.image_size)
    dets = []
    with no_grad():
        for model in (model_a, model_b):
            model.eval()
            raw = model(Tensor(image.astype(model.stem.conv.weight.dtype)))
            dets.append(postprocess({k: v.data for k, v in raw.items()}, model.config,
                                    args.score_threshold, 0.5)[0])
    red = render_comparison(image, dets[0], dets[1], gts, args.out, args.iou_threshold)
    sys.stdout.write(_tsv([["image", "gts", "dets_a", "dets_b", "highlighted", "figure"],
                           [args.image, len(gts), len(dets[0]), len(dets[1]), len(red), args.out]]))
    return 0


def cmd_generate(args) -> int:
    from masf.data import GenConfig, SyntheticSpec, export_synthetic

    spec = SyntheticSpec(train=args.train, val=args.val, seed=args.seed,
                         gen=GenConfig(image_size=args.image_size))
    path = export_synthetic(args.out, spec)
    sys.stdout.write(_tsv([["manifest", "train", "val"], [path, args.train, args.val]]))
    return 0


def cmd_ablate(args) -> int:
    from masf.experiments import run_ablation

    res = run_ablation(seeds=tuple(args.seeds), train=args.train, val=args.val, epochs=args.epochs,
                       out_path=args.out)
    rows = [["seed", "model", "map50", "map5095", "seconds"]]
    rows += [[r["seed"], r["model"], f"{r['map50']:.4f}", f"{r['map5095']:.4f}", f"{r['seconds']:.0f}"]
             for r in res["runs"]]
    rows += [["mean", name, f"{res[f'mean_map50_{name}']:.4f}", "", ""] for name in ("baseline", "full")]
    sys.stdout.write(_tsv(rows))
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="masf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoints, log and curves")
    t.add_argument("--model-config")
    t.add_argument("--train-config")
    t.add_argument("--data", default="synthetic", help="manifest path or 'synthetic'")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, help="override the train config")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--format", choices=["internal", "visdrone"])
    e.add_argument("--split", default="val")
    e.add_argument("--ap-method", choices=["all_points", "11_point"], default="all_points")
    e.add_argument("--report", help="directory for report.json and pr_curves.png")
    e.add_argument("--predictions", help="write detections as JSON Lines")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="params, GFLOPs and forward wall-clock")
    b.add_argument("--model-config")
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(fn=cmd_bench)

    i = sub.add_parser("inspect", help="per-layer table")
    i.add_argument("--model-config")
    i.set_defaults(fn=cmd_inspect)

    r = sub.add_parser("render", help="side-by-side comparison of two checkpoints")
    r.add_argument("--checkpoint-a", required=True)
    r.add_argument("--checkpoint-b", required=True)
    r.add_argument("--image", required=True, help="image file or synthetic:<seed>")
    r.add_argument("--annotations")
    r.add_argument("--format", choices=["internal", "visdrone"], default="internal")
    r.add_argument("--score-threshold", type=float, default=0.25)
    r.add_argument("--iou-threshold", type=float, default=0.5)
    r.add_argument("--out", default="comparison.png")
    r.set_defaults(fn=cmd_render)

    g = sub.add_parser("generate", help="export a synthetic dataset with a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=128)
    g.set_defaults(fn=cmd_generate)

    a = sub.add_parser("ablate", help="paired baseline/full runs on synthetic data")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--train", type=int, default=2000)
    a.add_argument("--val", type=int, default=500)
    a.add_argument("--epochs", type=int, default=30)
    a.add_argument("--out", default="ablation.json")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MasfError as exc:
        print(f"masf {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"masf {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
