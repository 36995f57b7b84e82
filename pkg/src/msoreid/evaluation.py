"""Cross-modality retrieval protocol and CMC / mAP / mINP metrics."""
from __future__ import annotations

import csv
import enum
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import (
    SYSU_INDOOR_RGB_CAMERAS,
    SYSU_RGB_CAMERAS,
    ImageRecord,
    Modality,
    Split,
)

logger = logging.getLogger(__name__)

REPORT_RANKS = (1, 10, 20)
CSV_COLUMNS = ("mode", "shot", "trial", "r1", "r10", "r20", "map", "minp")


class EvalError(ValueError):
    pass


class EvalMode(str, enum.Enum):
    SYSU_ALL = "sysu_all"
    SYSU_INDOOR = "sysu_indoor"
    REGDB_V2T = "regdb_v2t"
    REGDB_T2V = "regdb_t2v"
    SYNTHETIC = "synthetic"


class Shot(str, enum.Enum):
    SINGLE = "single"
    MULTI = "multi"

    @property
    def per_cell(self) -> int:
        return 1 if self is Shot.SINGLE else 10


@dataclass(frozen=True)
class EvalProtocol:
    mode: EvalMode = EvalMode.SYNTHETIC
    shot: Shot = Shot.SINGLE
    num_trials: int = 10
    seed: int = 0
    trial_offset: int = 0

    @property
    def trial_indices(self) -> range:
        return range(self.trial_offset, self.trial_offset + self.num_trials)

    def __post_init__(self):
        object.__setattr__(self, "mode", EvalMode(self.mode))
        object.__setattr__(self, "shot", Shot(self.shot))
        if self.num_trials < 1:
            raise EvalError("num_trials must be >= 1")

    @property
    def sampled_gallery(self) -> bool:
        return self.mode in (EvalMode.SYSU_ALL, EvalMode.SYSU_INDOOR, EvalMode.SYNTHETIC)


def _test_records(records: Sequence[ImageRecord]) -> list[int]:
    return [i for i, r in enumerate(records) if r.split is not Split.TRAIN]


def query_indices(records: Sequence[ImageRecord], protocol: EvalProtocol) -> list[int]:
    """Indices of query records: test IR images, or test RGB for visible-to-thermal."""
    want = Modality.RGB if protocol.mode is EvalMode.REGDB_V2T else Modality.IR
    return [i for i in _test_records(records) if records[i].modality is want]


def sample_gallery(records: Sequence[ImageRecord], protocol: EvalProtocol, trial_index: int) -> list[int]:
    """Gallery indices for one trial.

    SYSU-style modes draw 1 (single-shot) or 10 (multi-shot) images per identity
    per gallery camera, seeded by (protocol.seed, trial_index); cells with fewer
    images contribute what they have, empty cells are skipped. RegDB modes use
    every test image of the gallery modality.
    """
    test = _test_records(records)
    if protocol.mode is EvalMode.REGDB_V2T:
        return [i for i in test if records[i].modality is Modality.IR]
    if protocol.mode is EvalMode.REGDB_T2V:
        return [i for i in test if records[i].modality is Modality.RGB]
    cams = SYSU_INDOOR_RGB_CAMERAS if protocol.mode is EvalMode.SYSU_INDOOR else SYSU_RGB_CAMERAS
    cells: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i in test:
        r = records[i]
        if r.modality is Modality.RGB and r.camera in cams:
            cells[(r.identity, r.camera)].append(i)
    rng = np.random.default_rng([protocol.seed, trial_index])
    gallery = []
    identities = sorted({records[i].identity for i in test})
    skipped = 0
    for pid in identities:
        for cam in cams:
            pool = cells.get((pid, cam))
            if not pool:
                skipped += 1
                continue
            take = min(protocol.shot.per_cell, len(pool))
            gallery.extend(int(j) for j in rng.choice(pool, size=take, replace=False))
    if skipped:
        logger.debug("gallery trial %d: %d (identity, camera) cells without images", trial_index, skipped)
    return gallery


@dataclass
class RankingResult:
    order: np.ndarray  # (q, g) gallery indices by ascending distance
    matches: np.ndarray  # (q, g) bool, positive mask in ranked order
    distances: np.ndarray  # (q, g) cosine distance matrix, gallery order


def cosine_distance(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    if (qn == 0).any() or (gn == 0).any():
        raise EvalError("zero-norm feature vector; cosine distance undefined")
    return 1.0 - (q / qn) @ (g / gn).T


def rank(query_features: np.ndarray, gallery_features: np.ndarray,
         query_ids: Sequence[int] | None = None, gallery_ids: Sequence[int] | None = None) -> RankingResult:
    """Ascending cosine-distance ranking; ties keep gallery index order."""
    dist = cosine_distance(query_features, gallery_features)
    order = np.argsort(dist, axis=1, kind="stable")
    if query_ids is None or gallery_ids is None:
        matches = np.zeros_like(order, dtype=bool)
    else:
        g = np.asarray(gallery_ids)
        matches = g[order] == np.asarray(query_ids)[:, None]
    return RankingResult(order, matches, dist)


@dataclass
class TrialMetrics:
    cmc: np.ndarray
    mAP: float
    mINP: float
    num_queries: int
    num_excluded: int = 0

    def rank_k(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def cmc_map_minp(ranking: RankingResult | np.ndarray) -> TrialMetrics:
    """CMC curve, mAP and mINP from a ranked positive mask (queries x gallery).

    AP averages precision at each positive's rank; INP is the positive count
    over the rank of the last positive. Queries with no positive are dropped.
    """
    matches = ranking.matches if isinstance(ranking, RankingResult) else np.asarray(ranking, dtype=bool)
    matches = np.atleast_2d(matches)
    valid = matches.any(axis=1)
    excluded = int((~valid).sum())
    if excluded:
        logger.info("excluded %d queries without a gallery positive", excluded)
    m = matches[valid].astype(np.float64)
    if m.shape[0] == 0:
        raise EvalError("no query has a positive in the gallery")
    hits = np.cumsum(m, axis=1)
    cmc = (hits > 0).mean(axis=0)
    positions = np.arange(1, m.shape[1] + 1, dtype=np.float64)
    num_pos = m.sum(axis=1)
    ap = (hits / positions * m).sum(axis=1) / num_pos
    last = m.shape[1] - np.argmax(m[:, ::-1], axis=1)
    inp = num_pos / last
    return TrialMetrics(cmc, float(ap.mean()), float(inp.mean()), int(m.shape[0]), excluded)


@dataclass
class MetricsReport:
    mode: str
    shot: str
    trials: list[TrialMetrics] = field(default_factory=list)

    @property
    def cmc(self) -> np.ndarray:
        n = min(len(t.cmc) for t in self.trials)
        return np.mean([t.cmc[:n] for t in self.trials], axis=0)

    @property
    def mAP(self) -> float:
        return float(np.mean([t.mAP for t in self.trials]))

    @property
    def mINP(self) -> float:
        return float(np.mean([t.mINP for t in self.trials]))

    def rank_k(self, k: int) -> float:
        return float(np.mean([t.rank_k(k) for t in self.trials]))

    @property
    def rank1(self) -> float:
        return self.rank_k(1)

    def rows(self) -> list[dict]:
        out = []
        for i, t in enumerate(self.trials):
            out.append({"mode": self.mode, "shot": self.shot, "trial": i,
                        "r1": t.rank_k(1), "r10": t.rank_k(10), "r20": t.rank_k(20),
                        "map": t.mAP, "minp": t.mINP})
        out.append({"mode": self.mode, "shot": self.shot, "trial": "mean",
                    "r1": self.rank_k(1), "r10": self.rank_k(10), "r20": self.rank_k(20),
                    "map": self.mAP, "minp": self.mINP})
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "shot": self.shot,
            "num_trials": len(self.trials),
            "mean": self.rows()[-1],
            "trials": self.rows()[:-1],
            "cmc": self.cmc.tolist(),
        }

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows())
        return path

    def write_cmc_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "cmc"])
            for k, v in enumerate(self.cmc, start=1):
                writer.writerow([k, float(v)])
        return path

    def summary(self) -> str:
        return (f"{self.mode}/{self.shot} ({len(self.trials)} trials): "
                f"R1 {100 * self.rank_k(1):.2f}  R10 {100 * self.rank_k(10):.2f}  "
                f"R20 {100 * self.rank_k(20):.2f}  mAP {100 * self.mAP:.2f}  mINP {100 * self.mINP:.2f}")


FeatureFn = Callable[[Sequence[ImageRecord]], np.ndarray]


def evaluate_features(features: np.ndarray, records: Sequence[ImageRecord], protocol: EvalProtocol,
                      trials: Sequence[int] | None = None) -> MetricsReport:
    """Run the protocol on precomputed features (one row per record)."""
    features = np.asarray(features)
    ids = np.array([r.identity for r in records])
    q = query_indices(records, protocol)
    if not q:
        raise EvalError("no query records for this protocol")
    report = MetricsReport(protocol.mode.value, protocol.shot.value)
    trial_ids = protocol.trial_indices if trials is None else trials
    for t in trial_ids:
        g = sample_gallery(records, protocol, t)
        if not g:
            raise EvalError("empty gallery")
        ranking = rank(features[q], features[g], ids[q], ids[g])
        report.trials.append(cmc_map_minp(ranking))
    return report


def evaluate(model, records: Sequence[ImageRecord], protocol: EvalProtocol,
             batch_size: int = 64, image_size: tuple[int, int] | None = None) -> MetricsReport:
    """Extract features once, then average metrics over ``protocol.num_trials`` galleries.

    ``model`` is an :class:`~msoreid.model.MSONet` or any callable mapping a list
    of records to a feature matrix.
    """
    from .model import MSONet, extract_features

    test = _test_records(records)
    test_records = [records[i] for i in test]
    if isinstance(model, MSONet):
        feats = extract_features(model, test_records, batch_size=batch_size, image_size=image_size)
    else:
        feats = np.asarray(model(test_records))
    return evaluate_features(feats, test_records, protocol)


def embedding_geometry(features: np.ndarray, records: Sequence[ImageRecord]) -> dict[str, float]:
    """Mean cross-modality center gap and mean nearest-other-center distance.

    Uses L2-normalized features and every identity that has both modalities.
    """
    import torch

    from .losses import modality_centers

    g = np.asarray(features, dtype=np.float64)
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    ids = torch.tensor([r.identity for r in records])
    mods = torch.tensor([0 if r.modality is Modality.RGB else 1 for r in records])
    keep = [k for k in torch.unique(ids) if {0, 1} <= set(mods[ids == k].tolist())]
    mask = torch.isin(ids, torch.stack(keep))
    cs = modality_centers(torch.from_numpy(g)[mask], ids[mask], mods[mask])
    return {"d_intra": float(cs.d_intra.mean()), "d_inter": float(cs.d_inter.mean()),
            "num_identities": len(keep)}
