"""On-the-fly semantic map prediction for the 11 facial regions.

A small two-path network: a spatial-detail path at 1/8 resolution and a
deeper context path with attention refinement, fused and decoded to 11
logits per pixel. Trained separately and frozen during inpainter training.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pngio import NUM_REGIONS


class SemanticsError(ValueError):
    pass


def validate_semantics(L: np.ndarray) -> None:
    """Raise SemanticsError unless every pixel has exactly one channel set."""
    L = np.asarray(L)
    if L.ndim != 3 or L.shape[2] != NUM_REGIONS:
        raise SemanticsError(f"expected H*W*{NUM_REGIONS} map, got shape {L.shape}")
    binary = (L == 0) | (L == 1)
    sums = L.sum(axis=2)
    bad = ~(binary.all(axis=2) & (sums == 1))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise SemanticsError(f"not one-hot at pixel ({r},{c})")


class _ConvNormAct(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class _AttentionRefine(nn.Module):
    """Gates features with a global-context sigmoid attention vector."""

    def __init__(self, channels):
        super().__init__()
        self.gate = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        ctx = F.adaptive_avg_pool2d(x, 1)
        return x * torch.sigmoid(self.gate(ctx))


class SegmenterModel(nn.Module):
    def __init__(self, resolution: int = 64, base_channels: int = 24, num_classes: int = NUM_REGIONS):
        super().__init__()
        self.resolution = resolution
        self.num_classes = num_classes
        c = base_channels
        # spatial detail path: full -> 1/8
        self.spatial = nn.Sequential(
            _ConvNormAct(3, c, stride=2),
            _ConvNormAct(c, 2 * c, stride=2),
            _ConvNormAct(2 * c, 4 * c, stride=2),
        )
        # context path: full -> 1/16 with attention refinement
        self.context = nn.Sequential(
            _ConvNormAct(3, c, stride=2),
            _ConvNormAct(c, 2 * c, stride=2),
            _ConvNormAct(2 * c, 4 * c, stride=2),
            _ConvNormAct(4 * c, 4 * c, stride=2),
        )
        self.refine = _AttentionRefine(4 * c)
        self.fuse = _ConvNormAct(8 * c, 4 * c)
        self.head = nn.Conv2d(4 * c, num_classes, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(
                f"resolution mismatch: model expects {self.resolution}, got {tuple(x.shape[-2:])}"
            )
        sp = self.spatial(x)
        cx = self.refine(self.context(x))
        cx = F.interpolate(cx, size=sp.shape[-2:], mode="nearest")
        fused = self.fuse(torch.cat([sp, cx], dim=1))
        logits = self.head(fused)
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


def segment(model: SegmenterModel, x_masked: torch.Tensor):
    """Returns (one-hot map B*C*H*W, logits); argmax ties go to the lowest index."""
    squeeze = x_masked.dim() == 3
    if squeeze:
        x_masked = x_masked.unsqueeze(0)
    with torch.no_grad():
        logits = model(x_masked)
    idx = torch.argmax(logits, dim=1)
    onehot = F.one_hot(idx, model.num_classes).permute(0, 3, 1, 2).to(logits.dtype)
    if squeeze:
        return onehot[0], logits[0]
    return onehot, logits


def segmenter_loss(logits: torch.Tensor, l_gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel softmax cross-entropy against a one-hot target."""
    if logits.shape != l_gt.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(l_gt.shape)}")
    logp = F.log_softmax(logits, dim=-3)
    return -(l_gt.to(logits.dtype) * logp).sum(dim=-3).mean()
