"""Command line entry point: ``msoreid {generate,train,eval,ablate,visualize}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config

logger = logging.getLogger("msoreid")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(train__seed=args.seed, eval__seed=args.seed)
    return cfg


def _where(args) -> str:
    return str(args.config) if args.config else "built-in defaults"


def _records(cfg, args):
    from .data import DatasetError
    from .train import load_records

    try:
        return load_records(cfg)
    except DatasetError as exc:
        raise SystemExit(f"error: dataset from {_where(args)}: {exc}") from exc


def _load_matching_checkpoint(args, cfg):
    """Load ``args.checkpoint`` and refuse it if its architecture disagrees with ``cfg``."""
    from dataclasses import asdict

    from .model import load_checkpoint
    from .train import model_config

    try:
        model, meta = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, ValueError) as exc:
        raise SystemExit(f"error: {exc}") from exc
    have = asdict(model.cfg)
    want = asdict(model_config(cfg, model.cfg.num_classes))
    diff = sorted(k for k in want if k not in ("mean", "std") and want[k] != have[k])
    if diff:
        detail = ", ".join(f"{k}: checkpoint {have[k]!r} vs config {want[k]!r}" for k in diff)
        raise SystemExit(f"error: checkpoint {args.checkpoint} does not match {_where(args)} ({detail})")
    return model, meta


# --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .data import DatasetError, export_dataset, generate_synthetic
    from .train import synthetic_config

    cfg = _config(args)
    try:
        records = generate_synthetic(synthetic_config(cfg))
    except DatasetError as exc:
        raise SystemExit(f"error: {_where(args)}: {exc}") from exc
    manifest = export_dataset(records, args.out)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    print(f"wrote {len(records)} images to {args.out} (manifest sha256 {digest[:16]})")
    return 0


def cmd_train(args) -> int:
    from .train import TrainingAborted, train

    cfg = _config(args)
    records = _records(cfg, args)
    try:
        manifest = train(cfg, args.out, records=records, progress=True)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if manifest.metrics:
        print(json.dumps(manifest.metrics["mean"]))
    print(f"run directory: {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint

    if not args.checkpoint:
        raise SystemExit("error: eval needs --checkpoint")
    cfg = _config(args)
    _load_matching_checkpoint(args, cfg)
    records = _records(cfg, args)
    report = evaluate_checkpoint(args.checkpoint, cfg, records, num_trials=args.trials)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_json(out / "metrics.json")
        report.write_csv(out / "metrics.csv")
        report.write_cmc_csv(out / "cmc.csv")
    print(report.summary())
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = _config(args)
    records = _records(cfg, args)
    base_seed = cfg.train.seed
    seeds = [base_seed + i for i in range(args.num_seeds)]
    result = run_ablation(cfg, args.matrix, seeds, args.out, records=records, cells=args.cells)
    print(result.table())
    return 0


def cmd_visualize(args) -> int:
    from . import visualize as viz

    out = Path(args.out)
    if args.kind == "training_curves":
        if not args.run:
            raise SystemExit("error: training_curves needs --run DIR (a train output directory)")
        from .train import STEP_LOG

        names = viz.plot_training_curves(viz.read_step_log(Path(args.run) / STEP_LOG), out / "training_curves.png")
        print(f"wrote {out / 'training_curves.png'} ({', '.join(names)})")
        return 0

    import torch

    from .data import Modality, Split
    from .model import extract_features

    if not args.checkpoint:
        raise SystemExit(f"error: {args.kind} needs --checkpoint")
    cfg = _config(args)
    model, _ = _load_matching_checkpoint(args, cfg)
    records = _records(cfg, args)
    size = (cfg.train.input_height, cfg.train.input_width)
    test = [r for r in records if r.split is not Split.TRAIN] or records

    if args.kind == "embedding_scatter":
        ids = sorted({r.identity for r in test})[: args.max_identities]
        subset = [r for r in test if r.identity in set(ids)]
        feats = extract_features(model, subset, image_size=size)
        viz.plot_embedding_scatter(feats, [r.identity for r in subset], [r.modality for r in subset],
                                   out / "embedding_scatter.png", method=args.projection, seed=cfg.eval.seed)
        print(f"wrote {out / 'embedding_scatter.png'}")
        return 0

    pid = test[0].identity if args.identity is None else args.identity
    rgb = next((r for r in test if r.identity == pid and r.modality is Modality.RGB), None)
    ir = next((r for r in test if r.identity == pid and r.modality is Modality.IR), None)
    if rgb is None or ir is None:
        raise SystemExit(f"error: identity {pid} lacks an RGB/IR pair")
    if args.kind == "feature_maps":
        maps = viz.stem_maps(model, rgb, ir, size)
        viz.plot_feature_maps(maps, out / "feature_maps.png")
        print(f"wrote {out / 'feature_maps.png'}")
    else:
        from .data import resize, to_tensor

        for rec in (rgb, ir):
            x = to_tensor([resize(rec.pixels(), size)], model.cfg.mean, model.cfg.std)
            with torch.no_grad():
                edge = model.edge_map(x)[0, 0].numpy()
            path = viz.plot_edge_map(edge, out / f"edge_map_{rec.modality.value}.png")
            print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment INI file (defaults to the packaged recipe)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="overrides the train and eval seeds (the synthetic data keeps dataset.synthetic_seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="msoreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write the synthetic dataset to disk")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--trials", type=int, help="number of gallery trials (default from config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run a loss or fusion ablation matrix")
    p.add_argument("--matrix", choices=("loss", "fusion"), default="loss")
    p.add_argument("--num-seeds", type=int, default=3)
    p.add_argument("--cells", nargs="+", help="restrict to these cell labels")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", parents=[common], help="feature maps, embedding scatter, loss curves")
    p.add_argument("kind", choices=("feature_maps", "embedding_scatter", "training_curves", "edge_map"))
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--run", type=Path, help="train output directory (training_curves)")
    p.add_argument("--identity", type=int, help="test identity for feature_maps / edge_map")
    p.add_argument("--projection", choices=("tsne", "pca"), default="tsne")
    p.add_argument("--max-identities", type=int, default=20)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verbose:
        logger.setLevel(logging.INFO)
    try:
        return args.func(args)
    except ConfigError as exc:
        raise SystemExit(f"error: {exc}") from exc


if __name__ == "__main__":
    sys.exit(main())
