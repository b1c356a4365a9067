"""Per-level, per-region style codes from the masked image and semantic map.

A feature pyramid over the 14-channel (image + semantics) input yields N
levels at 1/4, 1/8, ... resolution; contextual attention fills hole
features at the coarsest level by matching background patches; region-wise
average pooling collapses each level to one code per region.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .pngio import NUM_REGIONS


@dataclass
class StyleCodeSet:
    """codes: B*N*C*D style vectors; presence: B*N*C flags (0 => zero code)."""

    codes: torch.Tensor
    presence: torch.Tensor

    @property
    def n_levels(self) -> int:
        return self.codes.shape[1]

    @property
    def n_regions(self) -> int:
        return self.codes.shape[2]

    def clone(self) -> "StyleCodeSet":
        return StyleCodeSet(self.codes.clone(), self.presence.clone())


def contextual_attention(feat: torch.Tensor, m_low: torch.Tensor, temperature: float = 10.0) -> torch.Tensor:
    """Replace hole features by similarity-weighted background features.

    Each foreground (m=1) location is matched by cosine similarity of its
    3x3 patch against every background 3x3 patch; its output is the softmax
    (scaled by `temperature`) weighted sum of background feature vectors.
    Background locations pass through unchanged.
    """
    squeeze = feat.dim() == 3
    if squeeze:
        feat = feat.unsqueeze(0)
        m_low = m_low.unsqueeze(0)
    B, D, H, W = feat.shape
    if m_low.shape[-2:] != (H, W):
        raise ValueError(f"mask shape {tuple(m_low.shape[-2:])} does not match features {(H, W)}")
    out = feat.clone()
    patches = F.unfold(feat, kernel_size=3, padding=1)  # B x D*9 x H*W
    for b in range(B):
        m = m_low[b].reshape(-1) > 0.5
        fg = torch.nonzero(m, as_tuple=False).squeeze(1)
        bg = torch.nonzero(~m, as_tuple=False).squeeze(1)
        if bg.numel() == 0:
            raise ValueError("no background context")
        if fg.numel() == 0:
            continue
        p = patches[b].transpose(0, 1)  # H*W x D*9
        norms = p.norm(dim=1).clamp_min(1e-8)
        sim = (p[fg] @ p[bg].t()) / (norms[fg][:, None] * norms[bg][None, :])
        weights = torch.softmax(temperature * sim, dim=1)
        bg_feats = feat[b].reshape(D, -1)[:, bg].t()  # n_bg x D
        out[b].view(D, -1)[:, fg] = (weights @ bg_feats).t()
    if squeeze:
        return out[0]
    return out


class _ConvAct(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class StyleEncoder(nn.Module):
    """Feature pyramid over concat(masked image, semantic map)."""

    def __init__(
        self,
        resolution: int = 64,
        n_levels: int = 3,
        style_dim: int = 128,
        base_channels: int = 24,
        num_regions: int = NUM_REGIONS,
        use_attention: bool = True,
        attention_temperature: float = 10.0,
    ):
        super().__init__()
        # coarsest level must keep at least a 2x2 map (instance stats, attention)
        if resolution % (2 ** (n_levels + 1)) != 0 or resolution < 2 ** (n_levels + 2):
            raise ValueError(f"resolution {resolution} too small for {n_levels} pyramid levels")
        self.resolution = resolution
        self.n_levels = n_levels
        self.style_dim = style_dim
        self.num_regions = num_regions
        self.use_attention = use_attention
        self.attention_temperature = attention_temperature

        c = base_channels
        self.stem = _ConvAct(3 + num_regions, c, stride=2)
        stages, laterals, smooths = [], [], []
        cin = c
        for i in range(n_levels):
            cout = min(4 * c, c * (i + 2))
            stages.append(nn.Sequential(_ConvAct(cin, cout, stride=2), _ConvAct(cout, cout)))
            laterals.append(nn.Conv2d(cout, style_dim, 1))
            smooths.append(nn.Conv2d(style_dim, style_dim, 3, padding=1))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList(laterals)
        self.smooths = nn.ModuleList(smooths)

    def forward(self, x_masked: torch.Tensor, L: torch.Tensor, m: torch.Tensor | None = None,
                use_attention: bool | None = None) -> list[torch.Tensor]:
        """Returns N feature maps, finest (res/4) first."""
        if x_masked.shape[-1] != self.resolution:
            raise ValueError(
                f"resolution mismatch: encoder expects {self.resolution}, got {x_masked.shape[-1]}"
            )
        attn = self.use_attention if use_attention is None else use_attention
        x = torch.cat([x_masked, L.to(x_masked.dtype)], dim=1)
        x = self.stem(x)
        bottoms = []
        for stage in self.stages:
            x = stage(x)
            bottoms.append(x)
        levels: list[torch.Tensor | None] = [None] * self.n_levels
        top = None
        for i in reversed(range(self.n_levels)):
            lat = self.laterals[i](bottoms[i])
            if top is not None:
                lat = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            top = lat
            levels[i] = self.smooths[i](lat)
        if attn:
            if m is None:
                raise ValueError("attention requires the occlusion mask")
            m_low = F.interpolate(m.to(x_masked.dtype).unsqueeze(1), size=levels[-1].shape[-2:],
                                  mode="nearest").squeeze(1)
            levels[-1] = contextual_attention(levels[-1], m_low, self.attention_temperature)
        return levels


def encode_pyramid(encoder: StyleEncoder, x_masked, L, use_attention: bool, m) -> list[torch.Tensor]:
    return encoder(x_masked, L, m, use_attention=use_attention)


def region_average_pool(feat: torch.Tensor, L_n: torch.Tensor, norm: str = "region"):
    """Pool a feature map into one style vector per region.

    norm="region" divides by each region's pixel count; norm="global"
    divides by the full spatial area. Empty regions get a zero vector and a
    presence flag of 0. Returns (codes B*C*D, presence B*C).
    """
    if norm not in ("region", "global"):
        raise ValueError(f"norm must be 'region' or 'global', got {norm!r}")
    squeeze = feat.dim() == 3
    if squeeze:
        feat = feat.unsqueeze(0)
        L_n = L_n.unsqueeze(0)
    if feat.shape[-2:] != L_n.shape[-2:]:
        raise ValueError(f"spatial mismatch: features {tuple(feat.shape[-2:])} vs labels {tuple(L_n.shape[-2:])}")
    Lf = L_n.to(feat.dtype)
    sums = torch.einsum("bdhw,bchw->bcd", feat, Lf)
    counts = Lf.sum(dim=(2, 3))  # B x C
    presence = counts > 0
    if norm == "region":
        codes = sums / counts.clamp_min(1.0).unsqueeze(-1)
    else:
        area = float(feat.shape[-2] * feat.shape[-1])
        codes = sums / area
    if squeeze:
        return codes[0], presence[0]
    return codes, presence


def encode_styles(encoder: StyleEncoder, x_masked, L, m, rap_norm: str = "region",
                  use_attention: bool | None = None) -> StyleCodeSet:
    """Full style path: pyramid features -> per-level region codes."""
    squeeze = x_masked.dim() == 3
    if squeeze:
        x_masked = x_masked.unsqueeze(0)
        L = L.unsqueeze(0)
        m = m.unsqueeze(0) if m is not None else None
    levels = encoder(x_masked, L, m, use_attention=use_attention)
    codes, presence = [], []
    for feat in levels:
        L_n = F.interpolate(L.to(feat.dtype), size=feat.shape[-2:], mode="nearest")
        c, p = region_average_pool(feat, L_n, norm=rap_norm)
        codes.append(c)
        presence.append(p)
    out = StyleCodeSet(torch.stack(codes, dim=1), torch.stack(presence, dim=1))
    if squeeze:
        return StyleCodeSet(out.codes[0], out.presence[0])
    return out
