"""Acceptance gate: one test per criterion, each recorded as PASS/FAIL in the summary.

The ablation criteria (AC7-AC9) share one session fixture that trains the loss
matrix and the fusion matrix on the desk configuration with three seeds. Set
MSOREID_ACCEPTANCE_OUT to keep the run directories. AC11 runs only when
MSOREID_SYSU_ROOT points at a SYSU-MM01 copy.
"""
import contextlib
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import conftest
from msoreid.ablation import FUSION_MATRIX, LOSS_MATRIX, run_ablation
from msoreid.config import apply_overrides, default_config, load_config
from msoreid.data import BatchSpec, Modality, PKSampler, Split, SyntheticDatasetConfig, filter_records, generate_synthetic
from msoreid.edge import sobel_edges, to_single_channel
from msoreid.evaluation import EvalMode, EvalProtocol, cmc_map_minp, evaluate
from msoreid.losses import PerceptualNet, cmcc_loss, id_loss, modality_centers, pef_loss, wrt_loss
from msoreid.train import load_records
from oracles import (
    all_masks,
    analytic_grad,
    cmcc_oracle,
    finite_difference_grad,
    id_oracle,
    metrics_oracle,
    pef_oracle,
    perceptual_blocks_numpy,
    relative_error,
    wrt_oracle,
)

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
SEEDS = (0, 1, 2)
CELL_BUDGET_SECONDS = 15 * 60


@contextlib.contextmanager
def criterion(key):
    """Record the outcome of one criterion; ``detail`` may be filled in by the body."""
    note = {"detail": ""}
    try:
        yield note
    except pytest.skip.Exception:
        conftest.ACCEPTANCE[key] = ("SKIP", note["detail"])
        raise
    except BaseException as exc:
        first = str(exc).splitlines()[0] if str(exc) else ""
        conftest.ACCEPTANCE[key] = ("FAIL", f"{note['detail']} [{type(exc).__name__}: {first}]".strip())
        raise
    conftest.ACCEPTANCE[key] = ("PASS", note["detail"])


@pytest.fixture(autouse=True)
def float64_default():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def _pk(rng, grad=False):
    P, K = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    dim = int(rng.integers(2, 9)) if not grad else int(rng.integers(2, 5))
    ids = np.repeat(rng.permutation(40)[:P], 2 * K)
    mods = np.tile(np.repeat([0, 1], K), P)
    return torch.from_numpy(rng.normal(size=(len(ids), dim))), torch.from_numpy(ids), torch.from_numpy(mods)


# --------------------------------------------------------------------- AC1


def test_ac1_loss_oracle_equivalence():
    with criterion("AC1") as note:
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(25):
            g, ids, mods = _pk(rng)
            worst = max(worst, abs(cmcc_loss(g, ids, mods).item() - cmcc_oracle(g.numpy(), ids.tolist(), mods.tolist())))
            worst = max(worst, abs(wrt_loss(g, ids).item() - wrt_oracle(g.numpy(), ids.tolist())))
            logits = torch.from_numpy(rng.normal(size=(len(ids), int(ids.max()) + 1)))
            worst = max(worst, abs(id_loss(logits, ids).item() - id_oracle(logits.numpy(), ids.tolist())))
        net = PerceptualNet("random", channels=(3, 4, 4, 5), seed=11, dtype=torch.float64)
        blocks = perceptual_blocks_numpy(net)
        for _ in range(4):
            n = int(rng.integers(1, 3))
            f = [torch.from_numpy(rng.normal(size=(n, 3, 16, 8))) for _ in range(2)]
            e = [torch.from_numpy(rng.normal(size=(n, 1, 32, 16))) for _ in range(2)]
            got = pef_loss(f[0], e[0], f[1], e[1], net).item()
            want = pef_oracle(f[0].numpy(), e[0].numpy(), f[1].numpy(), e[1].numpy(), blocks)
            worst = max(worst, abs(got - want))
        note["detail"] = f"max |code - oracle| = {worst:.2e} (tol 1e-10)"
        assert worst < 1e-10


# --------------------------------------------------------------------- AC2


def test_ac2_gradient_checks():
    with criterion("AC2") as note:
        tic = time.perf_counter()
        rng = np.random.default_rng(202)
        net = PerceptualNet("random", channels=(2, 3, 3, 3), seed=3, dtype=torch.float64)
        worst = {}
        for _ in range(20):
            g, ids, mods = _pk(rng, grad=True)
            logits = torch.from_numpy(rng.normal(size=(6, 4)))
            labels = torch.from_numpy(rng.integers(0, 4, 6))
            f = torch.from_numpy(rng.normal(size=(1, 2, 8, 8)))
            e = torch.from_numpy(rng.normal(size=(1, 1, 16, 16)))
            cases = {
                "cmcc": (lambda x: cmcc_loss(x, ids, mods), g),
                "wrt": (lambda x: wrt_loss(x, ids), g),
                "id": (lambda x: id_loss(x, labels), logits),
                "pef": (lambda x: pef_loss(x, e, x[:0], e[:0], net), f),
            }
            for name, (fn, x) in cases.items():
                err = relative_error(analytic_grad(fn, x), finite_difference_grad(fn, x))
                worst[name] = max(worst.get(name, 0.0), err)
        elapsed = time.perf_counter() - tic
        note["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol 1e-4, {elapsed:.0f}s)"
        assert max(worst.values()) < 1e-4
        assert elapsed < 60


# --------------------------------------------------------------------- AC3


def test_ac3_closed_forms():
    with criterion("AC3") as note:
        g = torch.tensor([[0.0, 1.0], [0.0, -1.0], [2.0, 1.0], [2.0, -1.0]])
        ids, mods = torch.tensor([0, 0, 1, 1]), torch.tensor([0, 1, 0, 1])
        cs = modality_centers(g, ids, mods)
        assert torch.equal(cs.d_intra, cs.d_inter)
        assert abs(cmcc_loss(g, ids, mods).item() - math.log(2)) < 1e-12

        x = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.75], [0.0, -0.75]])
        want = (2 * math.log1p(math.exp(2.0 - 1.25)) + 2 * math.log1p(math.exp(1.5 - 1.25))) / 4
        assert abs(wrt_loss(x, ids, normalize=False).item() - want) < 1e-12

        for n in (2, 395):
            assert abs(id_loss(torch.zeros(4, n), torch.tensor([0, 1, 1, n - 1])).item() - math.log(n)) < 1e-12

        net = PerceptualNet("random", channels=(3, 4, 4, 5), seed=0, dtype=torch.float64)
        e = torch.randn(2, 1, 16, 8)
        f = e.expand(-1, 5, -1, -1).clone()
        assert abs(pef_loss(f, e, f, e, net).item()) < 1e-12
        note["detail"] = "CMCC log 2, WRT singleton, ID ln N, PEF 0 (tol 1e-12)"


# --------------------------------------------------------------------- AC4


def test_ac4_metric_oracle():
    with criterion("AC4") as note:
        count = 0
        for mask in all_masks(6):
            if not any(mask):
                continue
            cmc, ap, inp = metrics_oracle(mask)
            got = cmc_map_minp(np.array([mask]))
            assert list(got.cmc) == cmc and got.mAP == ap and got.mINP == inp, mask
            count += 1
        hand = cmc_map_minp(np.array([[True, False, True]]))
        assert abs(hand.mAP - 5 / 6) < 1e-15 and abs(hand.mINP - 2 / 3) < 1e-15
        note["detail"] = f"{count} masks exact; (pos, neg, pos) AP {hand.mAP:.6f} INP {hand.mINP:.6f}"


# --------------------------------------------------------------------- AC5


def test_ac5_sobel_invariants():
    with criterion("AC5") as note:
        for value in (0.0, 0.5, 200.0):
            assert torch.count_nonzero(sobel_edges(torch.full((12, 6), value))) == 0
        rng = np.random.default_rng(5)
        x, y = (torch.from_numpy(rng.normal(size=(16, 8))) for _ in range(2))
        lin = float((sobel_edges(2.5 * x - 0.75 * y) - (2.5 * sobel_edges(x) - 0.75 * sobel_edges(y))).abs().max())
        assert lin < 1e-12
        recs = generate_synthetic(SyntheticDatasetConfig(num_identities=6, images_per_id_per_modality=4,
                                                         noise_level=0.0, seed=9))
        rgb = [r for r in recs if r.modality is Modality.RGB]
        ir = [r for r in recs if r.modality is Modality.IR]
        for a, b in zip(rgb, ir):
            ea = sobel_edges(torch.from_numpy(to_single_channel(a.image)))
            eb = sobel_edges(torch.from_numpy(to_single_channel(b.image)))
            assert torch.equal(ea, eb)
        note["detail"] = f"constant -> 0, linearity err {lin:.1e}, {len(rgb)} noise-free pairs identical"


# --------------------------------------------------------------------- AC6


def test_ac6_sampler_invariant():
    with criterion("AC6") as note:
        recs = generate_synthetic(SyntheticDatasetConfig(num_identities=20, images_per_id_per_modality=6,
                                                         num_test_identities=4, seed=6))
        train = filter_records(recs, split=Split.TRAIN)
        spec = BatchSpec(8, 4)
        sampler = PKSampler(train, spec)
        rng = np.random.default_rng(6)
        for _ in range(1000):
            b = sampler.sample(rng)
            pids = np.unique(b.identities)
            assert len(pids) == spec.num_identities_P
            for pid in pids:
                sel = b.identities == pid
                assert (b.modalities[sel] == 0).sum() == 4 and (b.modalities[sel] == 1).sum() == 4
        note["detail"] = "1000 batches, P=8 identities x (4 RGB + 4 IR)"


# --------------------------------------------------------------------- AC7-AC9


@pytest.fixture(scope="session")
def ablation(tmp_path_factory):
    out = Path(os.environ.get("MSOREID_ACCEPTANCE_OUT") or tmp_path_factory.mktemp("ablation"))
    base = load_config(DESK)
    records = load_records(base)
    timings = {}

    tic = time.perf_counter()
    loss = run_ablation(base, "loss", SEEDS, out / "loss", records=records)
    per_cell = (time.perf_counter() - tic) / len(LOSS_MATRIX)
    timings.update({label: per_cell for label in LOSS_MATRIX})

    # the PEF fusion cell is the full model, identical to B+PEF+CMCC
    assert FUSION_MATRIX["PEF Loss Fusion"] == LOSS_MATRIX["B+PEF+CMCC"]
    others = [c for c in FUSION_MATRIX if c != "PEF Loss Fusion"]
    tic = time.perf_counter()
    fusion = run_ablation(base, "fusion", SEEDS, out / "fusion", records=records, cells=others)
    per_cell = (time.perf_counter() - tic) / len(others)
    timings.update({label: per_cell for label in others})
    fusion.cells["PEF Loss Fusion"] = loss.cells["B+PEF+CMCC"]
    fusion.write(out / "fusion")
    print("\n" + loss.table() + "\n\n" + fusion.table())
    return {"loss": loss, "fusion": fusion, "timings": timings}


def _r1(result, label):
    cell = result.cells[label]
    return 100 * cell.mean("r1"), 100 * cell.std("r1")


@pytest.mark.slow
def test_ac7_loss_ablation_direction(ablation):
    with criterion("AC7") as note:
        loss = ablation["loss"]
        b, b_std = _r1(loss, "B")
        pef, _ = _r1(loss, "B+PEF")
        cmcc, _ = _r1(loss, "B+CMCC")
        full, _ = _r1(loss, "B+PEF+CMCC")
        note["detail"] = (f"R1 B {b:.2f}±{b_std:.2f}, B+PEF {pef:.2f}, B+CMCC {cmcc:.2f}, "
                          f"B+PEF+CMCC {full:.2f}; slowest cell {max(ablation['timings'].values()) / 60:.1f} min")
        assert max(ablation["timings"].values()) <= CELL_BUDGET_SECONDS
        assert full > b, "B+PEF+CMCC must beat B"
        assert cmcc > b, "B+CMCC must beat B"
        assert pef >= b - b_std, "B+PEF must stay within one std of B"


@pytest.mark.slow
def test_ac8_fusion_ordering(ablation):
    with criterion("AC8") as note:
        fusion = ablation["fusion"]
        rows = {label: _r1(fusion, label)[0] for label in FUSION_MATRIX}
        note["detail"] = ", ".join(f"{k.replace(' Fusion', '')} {v:.2f}" for k, v in rows.items())
        assert rows["PEF Loss Fusion"] >= rows["Classic Feature Fusion"]


@pytest.mark.slow
def test_ac9_held_out_geometry(ablation):
    with criterion("AC9") as note:
        full = ablation["loss"].cells["B+PEF+CMCC"]
        d_intra, d_inter = full.mean("d_intra"), full.mean("d_inter")
        note["detail"] = f"held-out mean d_intra {d_intra:.3f} vs d_inter {d_inter:.3f}"
        assert d_intra < d_inter


# --------------------------------------------------------------------- AC10


def test_ac10_protocol_determinism():
    with criterion("AC10") as note:
        recs = generate_synthetic(SyntheticDatasetConfig(num_identities=24, images_per_id_per_modality=6,
                                                         num_test_identities=16, seed=10))
        test = [r for r in recs if r.split is not Split.TRAIN]
        feats = np.random.default_rng(10).normal(size=(len(test), 32))
        lookup = {id(r): f for r, f in zip(test, feats)}
        model = lambda rs: np.stack([lookup[id(r)] for r in rs])  # noqa: E731
        proto = EvalProtocol(EvalMode.SYNTHETIC, num_trials=10, seed=3)
        a, b = evaluate(model, recs, proto), evaluate(model, recs, proto)
        assert a.to_dict() == b.to_dict()
        singles = [evaluate(model, recs, EvalProtocol(EvalMode.SYNTHETIC, num_trials=1, seed=3, trial_offset=t))
                   for t in range(10)]
        gap = max(abs(a.rank1 - np.mean([s.rank1 for s in singles])),
                  abs(a.mAP - np.mean([s.mAP for s in singles])),
                  abs(a.mINP - np.mean([s.mINP for s in singles])),
                  float(np.abs(a.cmc - np.mean([s.cmc for s in singles], axis=0)).max()))
        note["detail"] = f"repeat runs identical; 10-trial mean vs single trials gap {gap:.1e} (tol 1e-12)"
        assert gap < 1e-12


# --------------------------------------------------------------------- AC11


def test_ac11_full_scale_opt_in(tmp_path):
    with criterion("AC11") as note:
        root = os.environ.get("MSOREID_SYSU_ROOT")
        if not root:
            note["detail"] = "opt-in; set MSOREID_SYSU_ROOT (and optionally MSOREID_FULL_CONFIG) to run"
            pytest.skip(note["detail"])
        from msoreid.train import train

        cfg_path = os.environ.get("MSOREID_FULL_CONFIG")
        cfg = load_config(cfg_path) if cfg_path else default_config()
        cfg = apply_overrides(cfg, ["dataset.kind=sysu", f"dataset.root={root}"])
        out = Path(os.environ.get("MSOREID_ACCEPTANCE_OUT") or tmp_path) / "full_scale"
        manifest = train(cfg, out, progress=True)
        header = (out / "metrics.csv").read_text().splitlines()[0]
        note["detail"] = f"R1 {100 * manifest.metrics['mean']['r1']:.2f} mAP {100 * manifest.metrics['mean']['map']:.2f}"
        assert header == "mode,shot,trial,r1,r10,r20,map,minp"
        assert manifest.status == "complete"
