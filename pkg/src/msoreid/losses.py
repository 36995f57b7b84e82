"""Training losses: perceptual edge (PEF), cross-modality center (CMCC), ID, WRT."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .edge import resample_edge

LOSS_TERMS = ("pef", "id", "wrt", "cmcc")


class LossError(ValueError):
    pass


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


def _softplus(x: torch.Tensor) -> torch.Tensor:
    # exact log(1 + exp(x)); F.softplus linearizes above its threshold
    return torch.logaddexp(torch.zeros_like(x), x)


def _safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm with a zero (not NaN) subgradient at the origin."""
    sq = (x * x).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def pairwise_distances(x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
    y = x if y is None else y
    return _safe_norm(x[:, None, :] - y[None, :, :])


# --------------------------------------------------------------------------
# Perceptual edge features loss
# --------------------------------------------------------------------------


class PerceptualNet(nn.Module):
    """Four frozen sequential conv blocks; outputs are tapped after each block.

    ``source="random"`` builds a VGG-shaped net from a fixed seed (desk scale);
    ``source="vgg16"`` slices torchvision's VGG-16 features at relu1_2, relu2_2,
    relu3_3 and relu4_3 and loads ImageNet weights from ``weights_path`` or the
    torchvision cache.
    """

    def __init__(self, source: str = "random", channels: Sequence[int] = (8, 16, 32, 32),
                 convs_per_block: int = 1, seed: int = 0, weights_path: str | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.source = source
        if source == "random":
            if len(channels) != 4:
                raise ValueError("PerceptualNet needs exactly four blocks")
            gen = torch.Generator().manual_seed(seed)
            blocks = []
            cin = 3
            for t, cout in enumerate(channels):
                layers: list[nn.Module] = [nn.MaxPool2d(2)] if t > 0 else []
                for _ in range(convs_per_block):
                    conv = nn.Conv2d(cin, cout, 3, padding=1)
                    with torch.no_grad():
                        bound = math.sqrt(6.0 / (cin * 9))
                        conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                        conv.bias.copy_(torch.rand(cout, generator=gen) * 0.2 - 0.1)
                    layers += [conv, nn.ReLU()]
                    cin = cout
                blocks.append(nn.Sequential(*layers))
            self.blocks = nn.ModuleList(blocks)
        elif source == "vgg16":
            from torchvision.models import VGG16_Weights, vgg16

            if weights_path:
                net = vgg16(weights=None)
                net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            else:
                net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
            feats = net.features
            self.blocks = nn.ModuleList([feats[0:4], feats[4:9], feats[9:16], feats[16:23]])
        else:
            raise ValueError(f"unknown perceptual net source {source!r}")
        for p in self.parameters():
            p.requires_grad_(False)
        self.to(dtype)
        super().train(False)

    def train(self, mode: bool = True):
        return super().train(False)

    @property
    def min_input_size(self) -> int:
        return 2 ** (len(self.blocks) - 1)

    def check_input_size(self, size: Sequence[int]) -> None:
        if min(size) < self.min_input_size:
            raise LossError(
                f"feature maps of size {tuple(size)} are too small for {len(self.blocks)} perceptual "
                f"blocks (need >= {self.min_input_size} per side)")

    def forward(self, z: torch.Tensor) -> list[torch.Tensor]:
        self.check_input_size(z.shape[-2:])
        outs = []
        for block in self.blocks:
            z = block(z)
            outs.append(z)
        return outs


def pef_adapt(f: torch.Tensor, e: torch.Tensor, adapter: str = "mean") -> tuple[torch.Tensor, torch.Tensor]:
    """Bring stem features (N, C, h, w) and edge maps (N, 1, H, W) to 3-channel inputs.

    The feature map is reduced over channels and the edge map bilinearly resized
    to the feature resolution; both are then replicated to three channels.
    """
    if adapter == "mean":
        fz = f.mean(dim=1, keepdim=True)
    elif adapter == "max":
        fz = f.amax(dim=1, keepdim=True)
    else:
        raise ValueError(f"unknown PEF adapter {adapter!r}")
    ez = resample_edge(e.detach().to(f.dtype), tuple(f.shape[-2:]))
    return fz.expand(-1, 3, -1, -1), ez.expand(-1, 3, -1, -1)


def _pef_branch(f: torch.Tensor, e: torch.Tensor, net: PerceptualNet, adapter: str) -> torch.Tensor:
    if f.shape[0] != e.shape[0]:
        raise LossError("feature and edge batches differ in length")
    if f.shape[0] == 0:
        return f.new_zeros(())
    fz, ez = pef_adapt(f, e, adapter)
    with torch.no_grad():
        target = net(ez)
    total = f.new_zeros(f.shape[0])
    for pf, pe in zip(net(fz), target):
        total = total + ((pf - pe) ** 2).flatten(1).mean(dim=1)
    return total.mean()


def pef_loss(f_rgb: torch.Tensor, e_rgb: torch.Tensor, f_ir: torch.Tensor, e_ir: torch.Tensor,
             net: PerceptualNet, adapter: str = "mean") -> torch.Tensor:
    """Sum over both branches of the per-item perceptual MSE, averaged over items.

    Per item and branch: sum over blocks t of mean((phi_t(f) - phi_t(e))**2),
    i.e. ||.||_F^2 / (C_t H_t W_t). Gradients reach ``f`` only.
    """
    return _pef_branch(f_rgb, e_rgb, net, adapter) + _pef_branch(f_ir, e_ir, net, adapter)


# --------------------------------------------------------------------------
# Cross-modality contrastive-center loss
# --------------------------------------------------------------------------


@dataclass
class CenterSet:
    identities: torch.Tensor  # (n,)
    rgb: torch.Tensor  # (n, d)
    ir: torch.Tensor  # (n, d)
    center: torch.Tensor  # (n, d)
    d_intra: torch.Tensor  # (n,)
    d_inter: torch.Tensor  # (n,) nearest other-identity center distance


def modality_centers(g: torch.Tensor, identities: torch.Tensor, modalities: torch.Tensor) -> CenterSet:
    """Per-identity modality centers; ``modalities`` uses 0 = RGB, 1 = IR."""
    identities = torch.as_tensor(identities)
    modalities = torch.as_tensor(modalities)
    ids = torch.unique(identities, sorted=True)
    if len(ids) < 2:
        raise LossError("CMCC requires >=2 identities in the batch")
    rgb, ir = [], []
    for k in ids:
        m_rgb = (identities == k) & (modalities == 0)
        m_ir = (identities == k) & (modalities == 1)
        if not m_rgb.any() or not m_ir.any():
            raise LossError(f"identity {int(k)} lacks one modality in the batch")
        rgb.append(g[m_rgb].mean(dim=0))
        ir.append(g[m_ir].mean(dim=0))
    rgb_c, ir_c = torch.stack(rgb), torch.stack(ir)
    center = (rgb_c + ir_c) / 2
    d_intra = _safe_norm(rgb_c - ir_c)
    dist = pairwise_distances(center)
    eye = torch.eye(len(ids), dtype=torch.bool, device=g.device)
    d_inter = dist.masked_fill(eye, float("inf")).min(dim=1).values
    return CenterSet(ids, rgb_c, ir_c, center, d_intra, d_inter)


def cmcc_loss(g: torch.Tensor, identities: torch.Tensor, modalities: torch.Tensor) -> torch.Tensor:
    """mean_k log(1 + exp(d_intra(k) - min_{j != k} ||c_k - c_j||)) on normalized embeddings."""
    cs = modality_centers(g, identities, modalities)
    return _softplus(cs.d_intra - cs.d_inter).mean()


# --------------------------------------------------------------------------
# ID and WRT losses
# --------------------------------------------------------------------------


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, device=logits.device)
    n = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise LossError(f"labels must lie in [0, {n}); got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


def _masked_softmax(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    neg_inf = torch.full_like(values, float("-inf"))
    return torch.softmax(torch.where(mask, values, neg_inf), dim=1)


def wrt_loss(embeddings: torch.Tensor, labels: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Weighted regularization triplet loss, averaged over anchors.

    Per anchor: softplus(sum_P softmax(d) * d - sum_N softmax(-d) * d) over its
    positive set P and negative set N.
    """
    labels = torch.as_tensor(labels, device=embeddings.device)
    x = F.normalize(embeddings, dim=1) if normalize else embeddings
    dist = pairwise_distances(x)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=x.device)
    pos = same & ~eye
    neg = ~same
    if not pos.any(dim=1).all() or not neg.any(dim=1).all():
        raise LossError("every WRT anchor needs at least one positive and one negative")
    w_p = _masked_softmax(dist, pos)
    w_n = _masked_softmax(-dist, neg)
    zero = torch.zeros_like(dist)
    furthest_pos = torch.where(pos, w_p * dist, zero).sum(dim=1)
    closest_neg = torch.where(neg, w_n * dist, zero).sum(dim=1)
    return _softplus(furthest_pos - closest_neg).mean()


# --------------------------------------------------------------------------
# Total
# --------------------------------------------------------------------------


@dataclass
class LossReport:
    pef: float = 0.0
    id: float = 0.0
    wrt: float = 0.0
    cmcc: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def total_loss(parts: Mapping[str, torch.Tensor | None]) -> tuple[torch.Tensor, LossReport]:
    """Unit-weight sum of the enabled terms; ``None`` marks a disabled term."""
    unknown = set(parts) - set(LOSS_TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = None
    report = LossReport()
    for term in LOSS_TERMS:
        value = parts.get(term)
        if value is None:
            continue
        v = float(value.detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(term, v)
        setattr(report, term, v)
        total = value if total is None else total + value
    if total is None:
        raise LossError("no loss term enabled")
    report.total = float(total.detach())
    return total, report
