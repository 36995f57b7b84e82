"""Sobel edge extraction and the edge-fusion strategies."""
from __future__ import annotations

import enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Horizontal, vertical, 45 and 135 degree Sobel operators. Every kernel sums to
# zero; with replicate padding a constant image has no response anywhere.
SOBEL_KERNELS = np.array(
    [
        [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],
        [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],
        [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]],
        [[-2, -1, 0], [-1, 0, 1], [0, 1, 2]],
    ],
    dtype=np.int64,
)

# Integer BT.601 luma approximation; dyadic, so integer inputs reduce exactly.
LUMA_WEIGHTS = (77 / 256, 150 / 256, 29 / 256)


def to_single_channel(image):
    """Luminance reduction.

    Accepts an HxWx3 numpy array (channel-last) or an (N, 3, H, W) / (3, H, W)
    tensor (channel-first); the channel axis is dropped for numpy input and
    kept as size 1 for tensors.
    """
    if isinstance(image, torch.Tensor):
        w = torch.tensor(LUMA_WEIGHTS, dtype=image.dtype, device=image.device)
        return (image * w.view(3, 1, 1)).sum(dim=-3, keepdim=True)
    arr = np.asarray(image, dtype=np.float64)
    return arr @ np.asarray(LUMA_WEIGHTS)


def _as_nchw(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    if x.dim() == 2:
        return x[None, None], 2
    if x.dim() == 3:
        return x[:, None], 3
    if x.dim() == 4 and x.shape[1] == 1:
        return x, 4
    raise ValueError(f"expected (H, W), (N, H, W) or (N, 1, H, W); got {tuple(x.shape)}")


def sobel_responses(image: torch.Tensor) -> torch.Tensor:
    """Four directional responses, (N, 4, H, W), replicate-padded 'same' convolution."""
    x, _ = _as_nchw(torch.as_tensor(image))
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ValueError(f"Sobel input must be at least 3x3, got {tuple(x.shape[-2:])}")
    k = torch.as_tensor(SOBEL_KERNELS, dtype=x.dtype, device=x.device)[:, None]
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k)


def sobel_edges(image: torch.Tensor) -> torch.Tensor:
    """Edge map: sum of the four directional responses, same shape as the input."""
    x = torch.as_tensor(image)
    _, rank = _as_nchw(x)
    e = sobel_responses(x).sum(dim=1, keepdim=True)
    if rank == 2:
        return e[0, 0]
    if rank == 3:
        return e[:, 0]
    return e


class SobelEdge(nn.Module):
    """Frozen Sobel module: normalized image batch in, (N, 1, H, W) edge maps out.

    The network input is de-normalized to [0, 1] and reduced to luminance before
    the kernels are applied, so edges line up with what the stems see.
    """

    def __init__(self, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225)):
        super().__init__()
        self.register_buffer("kernels", torch.as_tensor(SOBEL_KERNELS, dtype=torch.float32)[:, None])
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raw = x * self.std.to(x.dtype) + self.mean.to(x.dtype)
        lum = F.pad(to_single_channel(raw), (1, 1, 1, 1), mode="replicate")
        return F.conv2d(lum, self.kernels.to(x.dtype)).sum(dim=1, keepdim=True)


# --------------------------------------------------------------------------
# Fusion strategies
# --------------------------------------------------------------------------


class FusionKind(str, enum.Enum):
    DIRECT_ADD = "direct_add"
    WEIGHTED_ADD = "weighted_add"
    CONCAT = "concat"
    PEF_LOSS = "pef"
    CLASSIC = "classic"

    @property
    def modifies_stem(self) -> bool:
        return self in (FusionKind.DIRECT_ADD, FusionKind.WEIGHTED_ADD, FusionKind.CONCAT)


def resample_edge(edge: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if edge.dim() != 4 or edge.shape[1] != 1:
        raise ValueError(f"edge map must be (N, 1, H, W), got {tuple(edge.shape)}")
    if tuple(edge.shape[-2:]) == tuple(size):
        return edge
    return F.interpolate(edge, size=size, mode="bilinear", align_corners=False)


class DirectAddFusion(nn.Module):
    def forward(self, f, edge):
        return f + edge


class WeightedAddFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))

    def forward(self, f, edge):
        return f + self.weight.view(1, -1, 1, 1) * edge


class ConcatFusion(nn.Module):
    """Concatenate the 1-channel edge map and project back with a 1x1 conv."""

    def __init__(self, channels: int, identity_init: bool = False):
        super().__init__()
        self.proj = nn.Conv2d(channels + 1, channels, kernel_size=1, bias=False)
        if identity_init:
            with torch.no_grad():
                self.proj.weight.zero_()
                self.proj.weight[:, :channels, 0, 0] = torch.eye(channels)

    def forward(self, f, edge):
        return self.proj(torch.cat([f, edge], dim=1))


def apply_fusion(strategy: nn.Module, stem_features: torch.Tensor, edge: torch.Tensor) -> torch.Tensor:
    """Fuse an input-resolution edge map into stem features of the same batch."""
    if stem_features.dim() != 4 or edge.shape[0] != stem_features.shape[0]:
        raise ValueError(
            f"incompatible shapes: features {tuple(stem_features.shape)}, edge {tuple(edge.shape)}")
    if isinstance(strategy, WeightedAddFusion) and strategy.weight.numel() != stem_features.shape[1]:
        raise ValueError("weighted-add fusion channel count does not match the features")
    e = resample_edge(edge.to(stem_features.dtype), tuple(stem_features.shape[-2:]))
    out = strategy(stem_features, e)
    assert out.shape == stem_features.shape
    return out


class ClassicLateFusion(nn.Module):
    """Concatenate image and edge-stream embeddings, project back with an FC layer."""

    def __init__(self, dim: int, identity_init: bool = False):
        super().__init__()
        self.dim = dim
        self.fc = nn.Linear(2 * dim, dim, bias=False)
        if identity_init:
            with torch.no_grad():
                self.fc.weight.zero_()
                self.fc.weight[:, :dim] = torch.eye(dim)

    def forward(self, img: torch.Tensor, edge: torch.Tensor) -> torch.Tensor:
        return classic_late_fusion(self, img, edge)


def classic_late_fusion(module: ClassicLateFusion, trunk_features_img: torch.Tensor,
                        trunk_features_edge: torch.Tensor) -> torch.Tensor:
    if trunk_features_img.shape != trunk_features_edge.shape or trunk_features_img.shape[-1] != module.dim:
        raise ValueError(
            f"late fusion expects two (N, {module.dim}) embeddings, got "
            f"{tuple(trunk_features_img.shape)} and {tuple(trunk_features_edge.shape)}")
    return module.fc(torch.cat([trunk_features_img, trunk_features_edge], dim=-1))


def make_stem_fusion(kind: FusionKind, channels: int) -> nn.Module | None:
    kind = FusionKind(kind)
    if kind is FusionKind.DIRECT_ADD:
        return DirectAddFusion()
    if kind is FusionKind.WEIGHTED_ADD:
        return WeightedAddFusion(channels)
    if kind is FusionKind.CONCAT:
        return ConcatFusion(channels)
    return None
