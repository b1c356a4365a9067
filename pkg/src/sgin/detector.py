"""Occlusion detector: predicts the binary mask from an occluded image.

Five downsampling conv blocks, five upsampling blocks with additive skip
connections, one sigmoid probability channel. Masking follows the
convention 1 = occluded; masked pixels are zeroed exactly.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_EPS = 1e-7


def apply_mask(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """x * (1 - m) broadcast over channels; masked pixels become exactly 0."""
    x = np.asarray(x)
    m = np.asarray(m)
    if x.shape[:2] != m.shape:
        raise ValueError(f"shape mismatch: image {x.shape} vs mask {m.shape}")
    keep = (m == 0)
    if x.ndim == 3:
        keep = keep[..., None]
    return np.where(keep, x, 0).astype(x.dtype)


def apply_mask_t(x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Torch version for B*C*H*W images and B*H*W masks."""
    return x * (1.0 - m).unsqueeze(1)


class _Down(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm = nn.InstanceNorm2d(cout)

    def forward(self, x):
        x = self.conv(x)
        # instance stats are undefined over a single spatial element
        if x.shape[-2] * x.shape[-1] > 1:
            x = self.norm(x)
        return F.leaky_relu(x, 0.2)


class _Up(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = nn.InstanceNorm2d(cout)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class DetectorModel(nn.Module):
    """5-stage encoder/decoder with skip connections and a sigmoid head."""

    def __init__(self, resolution: int = 64, base_channels: int = 24):
        super().__init__()
        if resolution % 32 != 0:
            raise ValueError("detector needs resolution divisible by 32")
        self.resolution = resolution
        c = base_channels
        widths = [c, 2 * c, 4 * c, 4 * c, 4 * c]
        # decoder widths mirror the encoder so skip connections add directly
        up_widths = widths[-2::-1] + [c]
        downs, ups = [], []
        cin = 3
        for w in widths:
            downs.append(_Down(cin, w))
            cin = w
        cin = widths[-1]
        for w in up_widths:
            ups.append(_Up(cin, w))
            cin = w
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(up_widths[-1], 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(
                f"resolution mismatch: model expects {self.resolution}, got {tuple(x.shape[-2:])}"
            )
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        for i, up in enumerate(self.ups):
            x = up(x)
            skip = skips[len(self.downs) - 2 - i] if i < len(self.ups) - 1 else None
            if skip is not None:
                x = x + skip
        return torch.sigmoid(self.head(x)).squeeze(1)


def detect(model: DetectorModel, x_occ: torch.Tensor, threshold: float = 0.5):
    """Returns (binary mask, probability map); the >= comparison is inclusive."""
    squeeze = x_occ.dim() == 3
    if squeeze:
        x_occ = x_occ.unsqueeze(0)
    with torch.no_grad():
        prob = model(x_occ)
    mask = (prob >= threshold).to(prob.dtype)
    if squeeze:
        return mask[0], prob[0]
    return mask, prob


def dilate_mask(mask: np.ndarray, pixels: int) -> np.ndarray:
    if pixels <= 0:
        return mask
    from scipy.ndimage import binary_dilation

    return binary_dilation(mask.astype(bool), iterations=pixels).astype(mask.dtype)


def detector_loss(prob_map: torch.Tensor, m_gt: torch.Tensor) -> torch.Tensor:
    """BCE + (1 - soft Dice); robust to thin masks, non-negative."""
    if prob_map.shape != m_gt.shape:
        raise ValueError(f"shape mismatch: {tuple(prob_map.shape)} vs {tuple(m_gt.shape)}")
    p = prob_map.clamp(PROB_EPS, 1.0 - PROB_EPS)
    g = m_gt.to(p.dtype)
    bce = -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()
    smooth = 1.0
    dice = (2 * (p * g).sum() + smooth) / (p.sum() + g.sum() + smooth)
    return bce + (1 - dice)
