"""Loss-term and edge-fusion ablation matrices with shared seeds."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .data import ImageRecord, Split
from .evaluation import embedding_geometry
from .model import load_checkpoint, extract_features
from .train import load_records, train

logger = logging.getLogger(__name__)

# cell label -> config overrides (section__key)
LOSS_MATRIX: dict[str, dict] = {
    "B": {"loss__pef": False, "loss__cmcc": False, "loss__fusion": "pef"},
    "B+PEF": {"loss__pef": True, "loss__cmcc": False, "loss__fusion": "pef"},
    "B+CMCC": {"loss__pef": False, "loss__cmcc": True, "loss__fusion": "pef"},
    "B+PEF+CMCC": {"loss__pef": True, "loss__cmcc": True, "loss__fusion": "pef"},
}

FUSION_MATRIX: dict[str, dict] = {
    "Directly Add Fusion": {"loss__pef": False, "loss__cmcc": True, "loss__fusion": "direct_add"},
    "Weighted Add Fusion": {"loss__pef": False, "loss__cmcc": True, "loss__fusion": "weighted_add"},
    "Concat Fusion": {"loss__pef": False, "loss__cmcc": True, "loss__fusion": "concat"},
    "PEF Loss Fusion": {"loss__pef": True, "loss__cmcc": True, "loss__fusion": "pef"},
    "Classic Feature Fusion": {"loss__pef": False, "loss__cmcc": True, "loss__fusion": "classic"},
}

MATRICES = {"loss": LOSS_MATRIX, "fusion": FUSION_MATRIX}
METRICS = ("r1", "r10", "r20", "map", "minp")


@dataclass
class CellResult:
    label: str
    overrides: dict
    per_seed: list[dict] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.per_seed], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def std(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0


@dataclass
class AblationResult:
    matrix: str
    seeds: list[int]
    cells: dict[str, CellResult]

    def table(self) -> str:
        head = f"{'cell':<24}" + "".join(f"{m.upper():>16}" for m in METRICS + ("d_intra", "d_inter"))
        lines = [head, "-" * len(head)]
        for label, cell in self.ranked():
            row = f"{label:<24}"
            for m in METRICS:
                row += f"{100 * cell.mean(m):>9.2f} ±{100 * cell.std(m):>5.2f}"
            for m in ("d_intra", "d_inter"):
                row += f"{cell.mean(m):>9.3f} ±{cell.std(m):>5.3f}"
            lines.append(row)
        return "\n".join(lines)

    def ranked(self) -> list[tuple[str, CellResult]]:
        return sorted(self.cells.items(), key=lambda kv: -kv[1].mean("r1"))

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        with (out_dir / "ablation.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "seed", *METRICS, "d_intra", "d_inter"])
            for label, cell in self.ranked():
                for seed, r in zip(self.seeds, cell.per_seed):
                    w.writerow([label, seed, *(r[m] for m in METRICS), r["d_intra"], r["d_inter"]])
        (out_dir / "ablation.txt").write_text(self.table() + "\n")


def cell_config(base: ExperimentConfig, overrides: dict, seed: int) -> ExperimentConfig:
    return base.replace(**overrides, train__seed=seed)


def run_ablation(base: ExperimentConfig, matrix: str | dict, seeds: Sequence[int], out_dir: str | Path,
                 records: Sequence[ImageRecord] | None = None,
                 cells: Sequence[str] | None = None) -> AblationResult:
    """Train and evaluate each cell for each seed; cells differ only in their overrides."""
    spec = MATRICES[matrix] if isinstance(matrix, str) else matrix
    if cells is not None:
        spec = {k: spec[k] for k in cells}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records) if records is not None else load_records(base)
    held_out = [r for r in records if r.split is not Split.TRAIN]

    audit = {}
    result = AblationResult(matrix if isinstance(matrix, str) else "custom", list(seeds), {})
    for label, overrides in spec.items():
        cell = CellResult(label, overrides)
        for seed in seeds:
            cfg = cell_config(base, overrides, seed)
            audit[f"{label}/seed{seed}"] = {k: [str(a), str(b)] for k, (a, b) in base.diff(cfg).items()}
            run_dir = out_dir / _slug(label) / f"seed{seed}"
            manifest = train(cfg, run_dir, records=records)
            row = dict(manifest.metrics["mean"])
            model, _ = load_checkpoint(manifest.checkpoints["last"])
            feats = extract_features(model, held_out, image_size=(cfg.train.input_height, cfg.train.input_width))
            row.update(embedding_geometry(feats, held_out))
            cell.per_seed.append(row)
            logger.info("%s seed %d: r1 %.4f", label, seed, row["r1"])
        result.cells[label] = cell
    (out_dir / "config_diff.json").write_text(json.dumps(audit, indent=2))
    result.write(out_dir)
    return result


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label).strip("_").lower()
