"""Command-line entry point covering the full pipeline.

Commands: synth-data, prepare-data, train, colorize, evaluate,
ablate-weights. Flag precedence is flags > config file > defaults, and every
invocation writes its resolved-config snapshot into the output directory
before doing any work. Failures leave a machine-readable ``error.json``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import figures
from .core import (
    BaselineKind,
    FrameworkConfig,
    ImageBatch,
    Task,
    Variant,
    merge_overrides,
    parse_config,
    serialize_config,
    validate_config,
)
from .datapipe import (
    DatasetManifest,
    EdgeExtractorSpec,
    EdgeMethod,
    attach_sources,
    curate_by_category,
    generate_shape_scenes,
    load_image,
)
from .errors import MissingGeneratorRoleError, SegguideError
from .evaluation import (
    MetricReport,
    PretrainedFeatureExtractor,
    StubFeatureExtractor,
    evaluate_run,
    load_split,
)
from .networks import CheckpointReader
from .objectives import ObjectiveConfig
from .training import build_backend, colorize, train
from .datapipe import save_image

CACHE_ENV = "SEGGUIDE_CACHE"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segguide", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, need_out: bool = True):
        p.add_argument("--config", type=Path, default=None, help="config file path")
        p.add_argument("--out", type=Path, required=need_out, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant", choices=[v.value for v in Variant], default=None)
        p.add_argument("--baseline", choices=[b.value for b in BaselineKind], default=None)
        p.add_argument("--task", choices=[t.value for t in Task], default=None)
        p.add_argument("--wg", type=float, default=None)
        p.add_argument("--wb", type=float, default=None)
        p.add_argument("--wm", type=float, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--resolution", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--dataset-dir", type=Path, default=None)
        p.add_argument("--extractor", choices=["stub", "pretrained"], default=None)
        p.add_argument("--segbackend", choices=["stub", "pretrained"], default=None)
        p.add_argument("--gen-arch", choices=["resnet_blocks", "unet"], default=None)
        p.add_argument("--gen-width", type=int, default=None)
        p.add_argument("--gen-depth", type=int, default=None)
        p.add_argument("--disc-width", type=int, default=None)
        p.add_argument("--disc-layers", type=int, default=None)
        p.add_argument("--classes", type=int, default=None, help="segmentation class count")

    p = sub.add_parser("synth-data", help="generate the hermetic synthetic shape dataset")
    common(p)
    p.add_argument("--train-n", type=int, default=256)
    p.add_argument("--test-n", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("prepare-data", help="curate a category subset and extract edges")
    common(p)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--images-dir", type=Path, default=None)
    p.add_argument("--category", required=True)
    p.add_argument("--split-ratio", type=float, default=0.9)
    p.add_argument("--edge-method", choices=[m.value for m in EdgeMethod],
                   default=EdgeMethod.GRADIENT_FALLBACK.value)
    p.add_argument("--edge-weights", type=Path, default=None)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    common(p)
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)

    p = sub.add_parser("colorize", help="run generator inference on sketches")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="image file or directory")

    p = sub.add_parser("evaluate", help="compute FID/mIoU for checkpoints on the test split")
    common(p)
    p.add_argument("--checkpoint", type=Path, action="append", default=None)
    p.add_argument("--grids", type=int, default=4, help="sample grids to render")

    p = sub.add_parser("ablate-weights", help="sweep segmentation loss weights")
    common(p)
    p.add_argument("--grid", default="0.1,0.5,1.0,5.0,10.0",
                   help="comma-separated weight values, applied jointly to w_b and w_m")

    return parser


def resolve_config(args) -> FrameworkConfig:
    cfg = FrameworkConfig()
    if args.config is not None:
        cfg = parse_config(Path(args.config).read_text())
    overrides = {
        "run": {
            "seed": args.seed,
            "task": Task(args.task) if args.task else None,
            "epochs": args.epochs,
            "learning_rate": args.lr,
            "resolution": args.resolution,
            "batch_size": getattr(args, "batch_size", None),
            "checkpoint_every": getattr(args, "checkpoint_every", None),
        },
        "objective": {
            "variant": Variant(args.variant) if args.variant else None,
            "baseline": BaselineKind(args.baseline) if args.baseline else None,
            "w_g": args.wg,
            "w_b": args.wb,
            "w_m": args.wm,
        },
        "data": {
            "dataset_dir": str(args.dataset_dir) if args.dataset_dir else None,
            "extractor": args.extractor,
            "segbackend": args.segbackend,
        },
        "networks": {
            "gen_arch": args.gen_arch,
            "gen_base_width": args.gen_width,
            "gen_depth": args.gen_depth,
            "disc_base_width": args.disc_width,
            "disc_layers": args.disc_layers,
            "seg_class_count": args.classes,
            "seg_foreground_ids": (
                ",".join(str(i) for i in range(1, args.classes)) if args.classes else None
            ),
        },
    }
    return merge_overrides(cfg, overrides)


def snapshot_config(cfg: FrameworkConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(serialize_config(cfg))


def resolve_cache_dir(cfg: FrameworkConfig, out_dir: Path) -> Path:
    if cfg.data.cache_dir:
        return Path(cfg.data.cache_dir)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else out_dir


def make_extractor(cfg: FrameworkConfig):
    if cfg.data.extractor == "stub":
        return StubFeatureExtractor()
    return PretrainedFeatureExtractor(cfg.data.extractor_weights)


def _load_manifest(cfg: FrameworkConfig) -> tuple[DatasetManifest, Path]:
    root = Path(cfg.data.dataset_dir)
    manifest = DatasetManifest.load(root / "manifest.txt")
    manifest.verify(root)
    return manifest, root


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def cmd_synth_data(args, cfg: FrameworkConfig) -> int:
    out = Path(args.out)
    resolution = cfg.run.resolution
    manifest = generate_shape_scenes(
        out / "dataset",
        n_train=args.train_n,
        n_test=args.test_n,
        resolution=resolution,
        class_count=cfg.networks.seg_class_count,
        seed=cfg.run.seed,
        task=cfg.run.task,
        noise=args.noise,
    )
    print(f"wrote {manifest.train_size} train / {manifest.test_size} test scenes "
          f"at {resolution}x{resolution} under {out / 'dataset'}")
    return 0


def cmd_prepare_data(args, cfg: FrameworkConfig) -> int:
    out = Path(args.out)
    edge_spec = EdgeExtractorSpec(
        method=EdgeMethod(args.edge_method),
        weights_path=str(args.edge_weights) if args.edge_weights else "",
    )
    manifest = curate_by_category(
        args.annotations,
        args.category,
        out / "dataset",
        images_root=args.images_dir,
        split_ratio=args.split_ratio,
        seed=cfg.run.seed,
        task=cfg.run.task,
        resolution=cfg.run.resolution,
    )
    attach_sources(manifest, out / "dataset", edge_spec)
    print(f"curated {manifest.train_size} train / {manifest.test_size} test images "
          f"for category {args.category!r}")
    return 0


def cmd_train(args, cfg: FrameworkConfig) -> int:
    validate_config(cfg.objective, cfg.run)
    manifest, root = _load_manifest(cfg)
    out = Path(args.out)
    result = train(cfg, manifest, root, out, resume=args.resume)
    figures.loss_curves(out / "figures" / "loss_curves.png", result.trace_path)
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_colorize(args, cfg: FrameworkConfig) -> int:
    out = Path(args.out)
    reader = CheckpointReader(args.checkpoint)
    ckpt_cfg = reader.config()
    src = Path(args.input)
    paths = sorted(src.glob("*.png")) + sorted(src.glob("*.jpg")) if src.is_dir() else [src]
    channels = 1 if ckpt_cfg.run.task == Task.SKETCH2PHOTO else 3
    data = torch.stack([load_image(p, ckpt_cfg.run.resolution, channels) for p in paths])
    from .core import Domain

    domain = Domain.SKETCH if channels == 1 else Domain.LABELMAP
    batch = ImageBatch(data=data, domain=domain)
    result = colorize(reader, batch)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for path, img in zip(paths, result.data):
        save_image(img_dir / f"{path.stem}_color.png", img.numpy().transpose(1, 2, 0))
    print(f"colorized {len(paths)} images into {img_dir}")
    return 0


def cmd_evaluate(args, cfg: FrameworkConfig) -> int:
    if not args.checkpoint:
        raise MissingGeneratorRoleError("evaluate needs at least one --checkpoint")
    manifest, root = _load_manifest(cfg)
    out = Path(args.out)
    extractor = make_extractor(cfg)
    eval_backend = build_backend(cfg)
    rows = []
    outputs = {}
    for ckpt in args.checkpoint:
        row, fakes = evaluate_run(ckpt, manifest, root, extractor, eval_backend)
        rows.append(row)
        outputs[f"{row.baseline}/{row.variant}"] = fakes
    report = MetricReport(rows)
    report_path = report.write_csv(out / "reports" / "report.csv")
    labels = [f"{r.baseline}/{r.variant}" for r in rows]
    figures.metrics_bar(out / "figures" / "metrics.png", labels,
                        [r.fid for r in rows], [r.miou for r in rows])
    if args.grids > 0:
        sources, reals, stems = load_split(manifest, root, "test", cfg.run.resolution)
        for idx in range(min(args.grids, len(stems))):
            figures.sample_grid(out / "figures" / f"sample_{stems[idx]}.png",
                                sources, reals, outputs, idx)
    print(f"report: {report_path}")
    for row in rows:
        print(f"  {row.baseline}/{row.variant}: fid={row.fid:.4f}"
              + (f" miou={row.miou:.4f}" if row.miou is not None else ""))
    return 0


def cmd_ablate_weights(args, cfg: FrameworkConfig) -> int:
    grid = [float(v) for v in str(args.grid).split(",") if v]
    if cfg.objective.variant == Variant.BASELINE:
        raise SegguideError("ablate-weights needs a segmentation variant, not baseline")
    manifest, root = _load_manifest(cfg)
    out = Path(args.out)
    extractor = make_extractor(cfg)
    eval_backend = build_backend(cfg)
    results = []
    for value in grid:
        objective = ObjectiveConfig.for_variant(
            cfg.objective.variant,
            baseline=cfg.objective.baseline,
            w_g=cfg.objective.w_g,
            w_b=value,
            w_m=value,
            lambda_l1=cfg.objective.lambda_l1,
            lambda_cycle=cfg.objective.lambda_cycle,
            gan_mode=cfg.objective.gan_mode,
        )
        point_cfg = FrameworkConfig(run=cfg.run, objective=objective,
                                    data=cfg.data, networks=cfg.networks)
        point_dir = out / f"w_{value:g}"
        snapshot_config(point_cfg, point_dir)
        result = train(point_cfg, manifest, root, point_dir)
        row, _ = evaluate_run(result.final_checkpoint, manifest, root, extractor, eval_backend)
        results.append((value, row.fid))
        print(f"  weight {value:g}: fid={row.fid:.4f}")
    ranked = sorted(results, key=lambda item: item[1])
    report_dir = out / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    lines = ["rank,weight,fid"]
    lines += [f"{i + 1},{w!r},{f!r}" for i, (w, f) in enumerate(ranked)]
    (report_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    figures.ablation_bar(out / "figures" / "ablation.png",
                         [w for w, _ in results], [f for _, f in results])
    best_w, best_fid = ranked[0]
    print(f"best weight {best_w:g} (fid {best_fid:.4f}); table: {report_dir / 'ablation.csv'}")
    return 0


HANDLERS = {
    "synth-data": cmd_synth_data,
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "colorize": cmd_colorize,
    "evaluate": cmd_evaluate,
    "ablate-weights": cmd_ablate_weights,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        cache_dir = resolve_cache_dir(cfg, out)
        if (cfg.objective.active_binary() or cfg.objective.active_multiclass()) and not cfg.data.cache_dir:
            import dataclasses

            cfg = FrameworkConfig(
                run=cfg.run, objective=cfg.objective,
                data=dataclasses.replace(cfg.data, cache_dir=str(cache_dir)),
                networks=cfg.networks,
            )
        snapshot_config(cfg, out)
        return HANDLERS[args.command](args, cfg)
    except SegguideError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        violations = getattr(exc, "violations", None)
        if violations:
            record["violations"] = violations
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        print(f"error: {record['error']}: {record['message']}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
