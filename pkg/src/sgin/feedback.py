"""Fusion feedback: recover detail the style bottleneck discarded.

The coarse prediction is compared against the masked input; the per-pixel
L2 discrepancy (gated to the known region) plus the coarse image are
encoded down to the generator's middle block, whose input receives the
result additively. The encoder's final layer starts at zero, so an
untrained feedback path is exactly a no-op.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import Generator, generate


# 2^-20: sqrt(ss + EPS^2) - EPS is exactly 0 at ss=0 (both are exact powers
# of two in IEEE arithmetic) yet keeps the gradient finite there.
_NORM_EPS = 2.0 ** -20


def residual_map(x_gen: torch.Tensor, x_masked: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Per-pixel Euclidean distance across channels, zero inside the hole.

    The hole pixels of x_masked are zeros; without the (1-m) gate they
    would contribute |x_gen| as spurious "error".
    """
    if x_gen.shape != x_masked.shape:
        raise ValueError(f"shape mismatch: {tuple(x_gen.shape)} vs {tuple(x_masked.shape)}")
    if m.shape[-2:] != x_gen.shape[-2:]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match images")
    ss = ((x_gen - x_masked) ** 2).sum(dim=-3, keepdim=True)
    d = torch.sqrt(ss + _NORM_EPS * _NORM_EPS) - _NORM_EPS
    keep = 1.0 - m.to(d.dtype)
    if keep.dim() == d.dim() - 1:
        keep = keep.unsqueeze(-3)
    return d * keep


class FeedbackNet(nn.Module):
    """Small encoder from (coarse image, residual map) to middle-block features.

    The final convolution is zero-initialized (weights and bias), making the
    injected features exactly zero before training.
    """

    def __init__(self, resolution: int, target_size: int, out_channels: int, width: int = 32):
        super().__init__()
        if resolution % target_size != 0:
            raise ValueError(f"target size {target_size} must divide resolution {resolution}")
        n_down = int(math.log2(resolution // target_size))
        self.resolution = resolution
        self.target_size = target_size
        layers: list[nn.Module] = []
        cin = 4
        for _ in range(n_down):
            layers += [nn.Conv2d(cin, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = width
        layers += [nn.Conv2d(cin, width, 3, padding=1), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(width, out_channels, 3, padding=1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x_gen: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        if x_gen.shape[-1] != self.resolution:
            raise ValueError(f"expected resolution {self.resolution}, got {x_gen.shape[-1]}")
        if d.shape[-2:] != x_gen.shape[-2:]:
            raise ValueError("residual map size does not match image")
        out = self.proj(self.body(torch.cat([x_gen, d], dim=-3)))
        return out


def encode_feedback(net: FeedbackNet, x_gen: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    return net(x_gen, d)


def build_feedback_net(generator: Generator, width: int = 32) -> FeedbackNet:
    return FeedbackNet(generator.resolution, generator.feedback_size,
                       generator.feedback_channels, width=width)


def refine(models, x_masked: torch.Tensor, L: torch.Tensor, S, m: torch.Tensor):
    """Two-pass generation: coarse, then feedback-conditioned refinement."""
    generator, net = models
    x_coarse, _ = generate(generator, S, L)
    d = residual_map(x_coarse, x_masked, m)
    fb = encode_feedback(net, x_coarse, d)
    x_refined, _ = generate(generator, S, L, feedback=fb)
    return x_coarse, x_refined
