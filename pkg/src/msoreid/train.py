"""Joint training loop, learning-rate schedule, run manifests and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import platform
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .config import ConfigError, ExperimentConfig
from .data import (
    AugmentConfig,
    BatchSpec,
    DatasetError,
    ImageRecord,
    Modality,
    PKSampler,
    Split,
    SyntheticDatasetConfig,
    SysuSplitConfig,
    batch_tensors,
    generate_synthetic,
    load_manifest,
    load_regdb_layout,
    load_sysu_layout,
)
from .evaluation import EvalProtocol, MetricsReport, evaluate
from .losses import (
    LossReport,
    NonFiniteLossError,
    PerceptualNet,
    cmcc_loss,
    id_loss,
    pef_loss,
    total_loss,
    wrt_loss,
)
from .model import MSONet, ModelConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
STEP_LOG = "steps.jsonl"


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good_checkpoint: Path | None):
        super().__init__(f"{message}; last good checkpoint: {last_good_checkpoint}")
        self.last_good_checkpoint = last_good_checkpoint


def synthetic_config(cfg: ExperimentConfig) -> SyntheticDatasetConfig:
    d = cfg.dataset
    return SyntheticDatasetConfig(
        num_identities=d.num_identities,
        images_per_id_per_modality=d.images_per_id_per_modality,
        image_size=(d.image_height, d.image_width),
        noise_level=d.noise_level,
        jitter=d.jitter,
        clutter=d.clutter,
        num_test_identities=d.num_test_identities,
        seed=d.synthetic_seed,
    )


def load_records(cfg: ExperimentConfig) -> list[ImageRecord]:
    d = cfg.dataset
    if d.kind == "synthetic":
        return generate_synthetic(synthetic_config(cfg))
    if not d.root:
        raise DatasetError(f"dataset.root is required for kind={d.kind!r}")
    if d.kind == "manifest":
        return load_manifest(d.root)
    if d.kind == "sysu":
        return load_sysu_layout(d.root, SysuSplitConfig(strict=d.strict))
    if d.kind == "regdb":
        return load_regdb_layout(d.root, d.regdb_trial, strict=d.strict)
    raise DatasetError(f"unknown dataset kind {d.kind!r}")


def num_train_classes(records: Sequence[ImageRecord]) -> int:
    ids = sorted({r.identity for r in records if r.split is Split.TRAIN})
    if ids != list(range(len(ids))):
        raise DatasetError("train identities must be contiguous 0..N-1")
    return len(ids)


def model_config(cfg: ExperimentConfig, num_classes: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        backbone=m.backbone,
        stem_out_channels=m.stem_out_channels,
        trunk_stage_channels=m.trunk_stage_channels,
        last_stage_stride=m.last_stage_stride,
        nonlocal_positions=m.nonlocal_positions,
        embedding_dim=m.embedding_dim,
        num_classes=num_classes,
        gem_p_init=m.gem_p_init,
        fusion=cfg.loss.fusion,
        toy_scale=m.backbone == "toy",
    )


def eval_protocol(cfg: ExperimentConfig, num_trials: int | None = None) -> EvalProtocol:
    e = cfg.eval
    return EvalProtocol(e.mode, e.shot, num_trials or e.num_trials, e.seed)


def perceptual_net(cfg: ExperimentConfig) -> PerceptualNet:
    l = cfg.loss
    return PerceptualNet(l.perceptual_source, l.perceptual_channels, l.perceptual_convs_per_block,
                         l.perceptual_seed, l.perceptual_weights or None)


def lr_at(epoch: int, base_lr: float, milestones: Sequence[int], decay: float) -> float:
    """Step schedule over 0-based epochs: multiply by ``decay`` once per passed milestone."""
    return base_lr * decay ** sum(1 for m in milestones if epoch >= m)


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    config: dict
    code_version: str
    seeds: dict
    epochs: list[dict] = field(default_factory=list)
    metrics: dict | None = None
    checkpoints: dict = field(default_factory=dict)
    status: str = "running"
    environment: dict = field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / MANIFEST_FILE
        path.write_text(json.dumps(asdict(self), indent=2))
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILE
        return cls(**json.loads(path.read_text()))


def _losses_for_step(cfg: ExperimentConfig, model: MSONet, percep: PerceptualNet | None,
                     x_rgb: torch.Tensor, x_ir: torch.Tensor, labels: torch.Tensor,
                     modalities: torch.Tensor) -> tuple[torch.Tensor, LossReport]:
    taps = model(x_rgb, x_ir)
    l = cfg.loss
    parts: dict[str, torch.Tensor | None] = {}
    if l.pef:
        parts["pef"] = pef_loss(taps.stem[Modality.RGB], taps.edges[Modality.RGB],
                                taps.stem[Modality.IR], taps.edges[Modality.IR], percep, l.pef_adapter)
    if l.id:
        parts["id"] = id_loss(taps.logits, labels)
    if l.wrt:
        parts["wrt"] = wrt_loss(taps.pre_bn, labels)
    if l.cmcc:
        parts["cmcc"] = cmcc_loss(taps.normalized, labels, modalities)
    return total_loss(parts)


def validate(cfg: ExperimentConfig) -> None:
    l = cfg.loss
    if l.cmcc and cfg.train.num_identities_P < 2:
        raise ConfigError("CMCC requires >=2 identities per batch (train.num_identities_P)")
    if l.wrt and (cfg.train.num_identities_P < 2):
        raise ConfigError("WRT needs negatives: train.num_identities_P must be >= 2")
    if l.pef and l.fusion != "pef":
        raise ConfigError(f"PEF loss is its own fusion strategy; set loss.fusion = pef (got {l.fusion})")
    if cfg.train.optimizer.lower() != "adam":
        raise ConfigError(f"unsupported optimizer {cfg.train.optimizer!r}")


def train(cfg: ExperimentConfig, out_dir: str | Path, records: Sequence[ImageRecord] | None = None,
          progress: bool = False) -> RunManifest:
    """Train one model; writes checkpoints, ``steps.jsonl`` and ``manifest.json`` into ``out_dir``."""
    validate(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / "config.ini")
    t = cfg.train
    torch.set_num_threads(t.num_threads)
    torch.manual_seed(t.seed)
    rng = np.random.default_rng(t.seed)

    records = list(records) if records is not None else load_records(cfg)
    train_recs = [r for r in records if r.split is Split.TRAIN]
    test_recs = [r for r in records if r.split is not Split.TRAIN]
    model = MSONet(model_config(cfg, num_train_classes(records)))
    percep = perceptual_net(cfg) if cfg.loss.pef else None
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=t.lr, weight_decay=t.weight_decay)

    spec = BatchSpec(t.num_identities_P, t.images_per_modality_K)
    sampler = PKSampler(train_recs, spec)
    aug = AugmentConfig((t.input_height, t.input_width), t.crop_pad, t.flip_prob, t.augment)
    steps = t.batches_per_epoch or max(1, math.ceil(len(train_recs) / spec.batch_size))
    protocol = eval_protocol(cfg)

    manifest = RunManifest(
        config=cfg.to_dict(),
        code_version=_code_version(),
        seeds={"train": t.seed, "eval": cfg.eval.seed, "synthetic": cfg.dataset.synthetic_seed,
               "perceptual": cfg.loss.perceptual_seed},
        environment={"torch": torch.__version__, "numpy": np.__version__, "python": platform.python_version(),
                     "num_threads": t.num_threads, "mean": list(model.cfg.mean), "std": list(model.cfg.std)},
    )
    last_good: Path | None = None
    best_rank1 = -1.0
    step_log = (out_dir / STEP_LOG).open("w")
    global_step = 0
    try:
        for epoch in range(t.epochs):
            lr = lr_at(epoch, t.lr, t.lr_milestones, t.lr_decay)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            sums = LossReport()
            tic = time.perf_counter()
            for _ in range(steps):
                batch = sampler.sample(rng)
                x_rgb, x_ir = batch_tensors(batch, rng, aug, model.cfg.mean, model.cfg.std)
                labels = torch.from_numpy(batch.identities)
                mods = torch.from_numpy(batch.modalities)
                try:
                    loss, report = _losses_for_step(cfg, model, percep, x_rgb, x_ir, labels, mods)
                except NonFiniteLossError as exc:
                    manifest.status = f"aborted: {exc}"
                    manifest.write(out_dir)
                    raise TrainingAborted(str(exc), last_good) from exc
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                step_log.write(json.dumps({"step": global_step, "epoch": epoch, "lr": lr, **report.as_dict()}) + "\n")
                global_step += 1
                for k, v in report.as_dict().items():
                    setattr(sums, k, getattr(sums, k) + v)
            epoch_row = {"epoch": epoch, "lr": lr, "seconds": round(time.perf_counter() - tic, 3),
                         **{k: v / steps for k, v in sums.as_dict().items()}}
            rng_state = {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()}
            last_good = save_checkpoint(model, out_dir / "checkpoint_last.pt", epoch=epoch,
                                        extra={"rng": rng_state, "config_ini": cfg.to_ini()})
            manifest.checkpoints["last"] = str(last_good)
            if t.eval_every and test_recs and (epoch + 1) % t.eval_every == 0:
                r1 = evaluate(model, records, protocol, t.eval_batch_size, aug.size).rank1
                epoch_row["rank1"] = r1
                if r1 > best_rank1:
                    best_rank1 = r1
                    manifest.checkpoints["best"] = str(save_checkpoint(
                        model, out_dir / "checkpoint_best.pt", epoch=epoch, extra={"rank1": r1}))
            manifest.epochs.append(epoch_row)
            if progress:
                logger.info("epoch %d lr %.2e total %.4f (%.1fs)", epoch, lr, epoch_row["total"], epoch_row["seconds"])
        step_log.flush()
        if test_recs:
            report = evaluate(model, records, protocol, t.eval_batch_size, aug.size)
            manifest.metrics = report.to_dict()
            report.write_json(out_dir / "metrics.json")
            report.write_csv(out_dir / "metrics.csv")
            report.write_cmc_csv(out_dir / "cmc.csv")
        manifest.status = "complete"
        manifest.write(out_dir)
    finally:
        step_log.close()
    return manifest


def evaluate_checkpoint(checkpoint: str | Path, cfg: ExperimentConfig,
                        records: Sequence[ImageRecord] | None = None,
                        num_trials: int | None = None) -> MetricsReport:
    model, _ = load_checkpoint(checkpoint)
    records = list(records) if records is not None else load_records(cfg)
    return evaluate(model, records, eval_protocol(cfg, num_trials), cfg.train.eval_batch_size,
                    (cfg.train.input_height, cfg.train.input_width))
