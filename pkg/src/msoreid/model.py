"""Two-stream network: unshared stems, shared trunk, GeM, BN neck, classifier."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DEFAULT_MEAN, DEFAULT_STD, ImageRecord, Modality, resize, to_tensor
from .edge import ClassicLateFusion, FusionKind, SobelEdge, apply_fusion, make_stem_fusion

PARTITIONS = ("rgb_stem", "ir_stem", "trunk", "neck", "classifier", "fusion")
CHECKPOINT_FORMAT = "msoreid-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    backbone: str = "toy"  # "toy" or "resnet50"
    stem_out_channels: int = 16
    trunk_stage_channels: tuple[int, ...] = (32, 64)
    last_stage_stride: int = 1
    nonlocal_positions: tuple[int, ...] = ()
    embedding_dim: int = 64
    num_classes: int = 16
    gem_p_init: float = 3.0
    fusion: str = FusionKind.PEF_LOSS.value
    toy_scale: bool = True
    mean: tuple[float, ...] = DEFAULT_MEAN
    std: tuple[float, ...] = DEFAULT_STD

    def __post_init__(self):
        self.trunk_stage_channels = tuple(self.trunk_stage_channels)
        self.nonlocal_positions = tuple(self.nonlocal_positions)
        self.mean, self.std = tuple(self.mean), tuple(self.std)
        if self.backbone == "resnet50":
            self.stem_out_channels = 64
            self.trunk_stage_channels = (256, 512, 1024, 2048)
            self.embedding_dim = 2048
            self.toy_scale = False
        elif self.backbone != "toy":
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.embedding_dim != self.trunk_stage_channels[-1]:
            raise ValueError("embedding_dim must equal the last trunk stage width")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.gem_p_init <= 0:
            raise ValueError("gem_p_init must be positive")
        FusionKind(self.fusion)
        bad = [i for i in self.nonlocal_positions if not 0 <= i < len(self.trunk_stage_channels)]
        if bad:
            raise ValueError(f"nonlocal_positions out of range: {bad}")

    @classmethod
    def full_scale(cls, num_classes: int = 395, **kw) -> "ModelConfig":
        return cls(backbone="resnet50", num_classes=num_classes, nonlocal_positions=(1, 2), **kw)


class GeM(nn.Module):
    """Generalized-mean pooling with a learnable exponent, clamped positive."""

    def __init__(self, p: float = 3.0, eps: float = 1e-6, min_p: float = 1e-2):
        super().__init__()
        self.p = nn.Parameter(torch.tensor(float(p)))
        self.eps = eps
        self.min_p = min_p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gem(x, self.p.clamp(min=self.min_p), self.eps)


def gem(x: torch.Tensor, p, eps: float = 1e-6) -> torch.Tensor:
    """(mean over spatial positions of x**p) ** (1/p), per channel; (N, C, H, W) -> (N, C)."""
    return x.clamp(min=eps).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)


class NonLocal(nn.Module):
    """Dot-product non-local block with a zero-initialized residual branch."""

    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        inter = max(channels // reduction, 1)
        self.g = nn.Conv2d(channels, inter, 1)
        self.theta = nn.Conv2d(channels, inter, 1)
        self.phi = nn.Conv2d(channels, inter, 1)
        self.out = nn.Sequential(nn.Conv2d(inter, channels, 1), nn.BatchNorm2d(channels))
        nn.init.zeros_(self.out[1].weight)
        nn.init.zeros_(self.out[1].bias)

    def forward(self, x):
        n, _, h, w = x.shape
        g = self.g(x).flatten(2).transpose(1, 2)
        theta = self.theta(x).flatten(2).transpose(1, 2)
        phi = self.phi(x).flatten(2)
        attn = theta @ phi / (h * w)
        y = (attn @ g).transpose(1, 2).reshape(n, -1, h, w)
        return x + self.out(y)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.down is None else self.down(x)))


def _toy_stem(cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, cout, 7, 2, 3, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, 2, 1),
    )


def _build_backbone(cfg: ModelConfig) -> tuple[nn.Module, nn.Module, list[nn.Module]]:
    if cfg.backbone == "resnet50":
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        stages = [net.layer1, net.layer2, net.layer3, net.layer4]
        if cfg.last_stage_stride == 1:
            stages[-1][0].conv2.stride = (1, 1)
            stages[-1][0].downsample[0].stride = (1, 1)
        return stem, copy.deepcopy(stem), stages
    stem = _toy_stem(cfg.stem_out_channels)
    stages = []
    cin = cfg.stem_out_channels
    last = len(cfg.trunk_stage_channels) - 1
    for i, cout in enumerate(cfg.trunk_stage_channels):
        stride = 1 if i == 0 else (cfg.last_stage_stride if i == last else 2)
        stages.append(BasicBlock(cin, cout, stride))
        cin = cout
    return stem, _toy_stem(cfg.stem_out_channels), stages


@dataclass
class TapPoints:
    """Named activations of one forward pass (RGB block first, then IR)."""

    stem: dict[Modality, torch.Tensor]
    edges: dict[Modality, torch.Tensor]
    pre_bn: torch.Tensor
    post_bn: torch.Tensor
    logits: torch.Tensor

    @property
    def normalized(self) -> torch.Tensor:
        return F.normalize(self.post_bn, dim=1)


class MSONet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rgb_stem, ir_stem, stages = _build_backbone(cfg)
        self.rgb_stem = rgb_stem
        self.ir_stem = ir_stem
        layers: list[nn.Module] = []
        for i, stage in enumerate(stages):
            layers.append(stage)
            if i in cfg.nonlocal_positions:
                layers.append(NonLocal(cfg.trunk_stage_channels[i]))
        self.trunk = nn.Sequential(*layers)
        self.gem = GeM(cfg.gem_p_init)
        self.neck = nn.BatchNorm1d(cfg.embedding_dim)
        self.neck.bias.requires_grad_(False)
        self.classifier = nn.Linear(cfg.embedding_dim, cfg.num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)
        self.sobel = SobelEdge(cfg.mean, cfg.std)

        kind = FusionKind(cfg.fusion)
        self.fusion = nn.ModuleDict()
        stem_fusion = make_stem_fusion(kind, cfg.stem_out_channels)
        if stem_fusion is not None:
            self.fusion["stem"] = stem_fusion
        if kind is FusionKind.CLASSIC:
            _, edge_stem, _ = _build_backbone(cfg)
            self.fusion["edge_stem"] = edge_stem
            self.fusion["late"] = ClassicLateFusion(cfg.embedding_dim)

    # ------------------------------------------------------------------
    def stem_forward(self, x: torch.Tensor, modality: Modality | str) -> torch.Tensor:
        modality = Modality(modality)
        stem = self.rgb_stem if modality is Modality.RGB else self.ir_stem
        return stem(x)

    def trunk_forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.gem(self.trunk(f))

    def neck_and_classify(self, pre_bn: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        post_bn = self.neck(pre_bn)
        return post_bn, self.classifier(post_bn)

    def edge_map(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.sobel(x)

    def _embed(self, x: torch.Tensor, modality: Modality, stem_out: dict, edge_out: dict) -> torch.Tensor:
        f = self.stem_forward(x, modality)
        stem_out[modality] = f
        kind = FusionKind(self.cfg.fusion)
        need_edge = kind is not FusionKind.PEF_LOSS or self.training
        e = self.edge_map(x) if need_edge else None
        if e is not None:
            edge_out[modality] = e
        if kind.modifies_stem:
            f = apply_fusion(self.fusion["stem"], f, e)
        pooled = self.trunk_forward(f)
        if kind is FusionKind.CLASSIC:
            edge_img = e.expand(-1, 3, -1, -1)
            edge_vec = self.trunk_forward(self.fusion["edge_stem"](edge_img))
            pooled = self.fusion["late"](pooled, edge_vec)
        return pooled

    def forward(self, x_rgb: torch.Tensor | None = None, x_ir: torch.Tensor | None = None) -> TapPoints:
        stem_out: dict = {}
        edge_out: dict = {}
        parts = []
        if x_rgb is not None and len(x_rgb):
            parts.append(self._embed(x_rgb, Modality.RGB, stem_out, edge_out))
        if x_ir is not None and len(x_ir):
            parts.append(self._embed(x_ir, Modality.IR, stem_out, edge_out))
        if not parts:
            raise ValueError("empty forward pass")
        pre_bn = torch.cat(parts)
        post_bn, logits = self.neck_and_classify(pre_bn)
        return TapPoints(stem_out, edge_out, pre_bn, post_bn, logits)

    # ------------------------------------------------------------------
    def partition_of(self, name: str) -> str:
        head = name.split(".", 1)[0]
        if head in ("rgb_stem", "ir_stem", "neck", "classifier", "fusion"):
            return head
        if head in ("trunk", "gem"):
            return "trunk"
        if head == "sobel":
            return "fixed"
        raise KeyError(name)

    def parameter_partition(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {k: [] for k in PARTITIONS}
        for name, _ in self.named_parameters():
            groups[self.partition_of(name)].append(name)
        return groups


@torch.no_grad()
def extract_features(model: MSONet, records: Sequence[ImageRecord], batch_size: int = 64,
                     image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Post-BN embeddings in eval mode, one row per record in input order."""
    was_training = model.training
    model.eval()
    cfg = model.cfg
    out = np.zeros((len(records), cfg.embedding_dim), dtype=np.float32)
    try:
        for modality in (Modality.RGB, Modality.IR):
            idx = [i for i, r in enumerate(records) if r.modality is modality]
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                imgs = [records[i].pixels() for i in chunk]
                if image_size is not None:
                    imgs = [resize(im, image_size) for im in imgs]
                x = to_tensor(imgs, cfg.mean, cfg.std)
                taps = model(x, None) if modality is Modality.RGB else model(None, x)
                out[chunk] = taps.post_bn.numpy()
    finally:
        model.train(was_training)
    return out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(model: MSONet, path: str | Path, *, epoch: int, extra: dict | None = None) -> Path:
    """Parameters and buffers grouped by partition, plus a config snapshot."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups: dict[str, dict[str, torch.Tensor]] = {}
    for name, tensor in model.state_dict().items():
        groups.setdefault(model.partition_of(name), {})[name] = tensor.detach().clone()
    groups.pop("fixed", None)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "epoch": epoch,
        "params": groups,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[MSONet, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported")
    model = MSONet(ModelConfig(**payload["model_config"]))
    state = {}
    for group in payload["params"].values():
        state.update(group)
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [m for m in missing if not m.startswith("sobel.")]
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    model.eval()
    return model, payload
