"""Semantics-guided modulated generator.

A learned 4x4 constant is grown by K = log2(resolution) - 2 SGI blocks.
Block b (1-based) operates at spatial size min(4*2^b, resolution): each
block first brings its input up to that size with 2x nearest upsampling
(a no-op once the cap is reached, so the final block skips it), then runs
two rounds of instance norm -> region-adaptive denorm -> conv -> leaky
relu with a residual connection. Region style codes enter only through
the denormalizers; the semantic map is never fed to the convolutions.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .pngio import NUM_REGIONS
from .style_encoder import StyleCodeSet


def instance_normalize(h: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel (h - mean) / sqrt(var + eps) over space."""
    mean = h.mean(dim=(-2, -1), keepdim=True)
    var = h.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (h - mean) / torch.sqrt(var + eps)


class SeanDenorm(nn.Module):
    """Region-adaptive denormalization.

    Per-region style codes map through per-region affine producers to
    (gamma_s, beta_s) maps, broadcast over each region's pixels; a small
    conv net over the one-hot layout yields (gamma_l, beta_l). The two are
    blended by the block's alpha: out = gamma * h_norm + beta.

    Parameter layout: the first `channels` outputs of each producer are
    gamma, the rest beta; gamma biases start at 1, beta at 0.
    """

    def __init__(self, channels: int, style_dim: int, num_regions: int = NUM_REGIONS,
                 layout_hidden: int | None = None):
        super().__init__()
        self.channels = channels
        self.num_regions = num_regions
        self.style_weight = nn.Parameter(0.02 * torch.randn(num_regions, style_dim, 2 * channels))
        bias = torch.zeros(num_regions, 2 * channels)
        bias[:, :channels] = 1.0
        self.style_bias = nn.Parameter(bias)
        hidden = layout_hidden if layout_hidden is not None else max(16, channels // 2)
        # 3x3 for boundary context, then a cheap 1x1 projection to 2*channels
        self.layout_conv1 = nn.Conv2d(num_regions, hidden, 3, padding=1)
        self.layout_conv2 = nn.Conv2d(hidden, 2 * channels, 1)
        with torch.no_grad():
            self.layout_conv2.bias[:channels] = 1.0
            self.layout_conv2.bias[channels:] = 0.0

    def style_params(self, S: torch.Tensor, L: torch.Tensor):
        """S: B*C*D codes, L: B*C*h*w one-hot -> (gamma, beta) maps."""
        params = torch.einsum("bcd,cde->bce", S, self.style_weight) + self.style_bias
        maps = torch.einsum("bce,bchw->behw", params, L.to(S.dtype))
        return maps[:, : self.channels], maps[:, self.channels :]

    def layout_params(self, L: torch.Tensor):
        h = F.leaky_relu(self.layout_conv1(L), 0.2)
        maps = self.layout_conv2(h)
        return maps[:, : self.channels], maps[:, self.channels :]

    def forward(self, h_norm: torch.Tensor, S: torch.Tensor, L: torch.Tensor,
                alpha: torch.Tensor) -> torch.Tensor:
        if h_norm.shape[-2:] != L.shape[-2:]:
            raise ValueError(
                f"layout size {tuple(L.shape[-2:])} does not match features {tuple(h_norm.shape[-2:])}"
            )
        L = L.to(h_norm.dtype)
        g_s, b_s = self.style_params(S, L)
        g_l, b_l = self.layout_params(L)
        gamma = alpha * g_s + (1.0 - alpha) * g_l
        beta = alpha * b_s + (1.0 - alpha) * b_l
        return gamma * h_norm + beta


def sean_denormalize(denorm: SeanDenorm, h_norm, S, L, alpha) -> torch.Tensor:
    return denorm(h_norm, S, L, alpha)


class SgiBlock(nn.Module):
    """Two (instance norm -> denorm -> conv -> lrelu) rounds + residual."""

    def __init__(self, cin: int, cout: int, style_dim: int, num_regions: int = NUM_REGIONS,
                 accepts_feedback: bool = False):
        super().__init__()
        self.cin = cin
        self.cout = cout
        self.accepts_feedback = accepts_feedback
        self.alpha = nn.Parameter(torch.tensor(0.5))
        self.sean1 = SeanDenorm(cin, style_dim, num_regions)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.sean2 = SeanDenorm(cout, style_dim, num_regions)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, bias=False) if cin != cout else None

    def forward(self, h: torch.Tensor, S: torch.Tensor, L_b: torch.Tensor,
                feedback: torch.Tensor | None = None) -> torch.Tensor:
        if feedback is not None:
            if not self.accepts_feedback:
                raise ValueError("feedback supplied to a non-middle block")
            if feedback.shape[1:] != h.shape[1:]:
                raise ValueError(
                    f"feedback shape {tuple(feedback.shape[1:])} does not match block input {tuple(h.shape[1:])}"
                )
            h = h + feedback
        y = self.sean1(instance_normalize(h), S, L_b, self.alpha)
        y = F.leaky_relu(self.conv1(y), 0.2)
        y = self.sean2(instance_normalize(y), S, L_b, self.alpha)
        y = F.leaky_relu(self.conv2(y), 0.2)
        skip = h if self.skip is None else self.skip(h)
        return (y + skip) / math.sqrt(2.0)


class Generator(nn.Module):
    def __init__(self, resolution: int = 64, n_levels: int = 3, style_dim: int = 128,
                 base_channels: int = 32, channels_max: int = 128,
                 num_regions: int = NUM_REGIONS):
        super().__init__()
        k = int(math.log2(resolution)) - 2
        if 2 ** (k + 2) != resolution or k < 1:
            raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")
        self.resolution = resolution
        self.n_blocks = k
        self.n_levels = n_levels
        self.style_dim = style_dim
        self.num_regions = num_regions
        widths = [min(channels_max, base_channels * 2 ** (k - 1 - i)) for i in range(k)]
        self.widths = widths
        self.middle_index = math.ceil(k / 2) - 1  # 0-based
        self.const = nn.Parameter(torch.randn(1, widths[0], 4, 4))
        blocks = []
        for i in range(k):
            cin = widths[i - 1] if i > 0 else widths[0]
            blocks.append(SgiBlock(cin, widths[i], style_dim, num_regions,
                                   accepts_feedback=(i == self.middle_index)))
        self.blocks = nn.ModuleList(blocks)
        self.out_conv = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def block_size(self, i: int) -> int:
        """Operating spatial size of block i (0-based)."""
        return min(4 * 2 ** (i + 1), self.resolution)

    @property
    def feedback_size(self) -> int:
        return self.block_size(self.middle_index)

    @property
    def feedback_channels(self) -> int:
        i = self.middle_index
        return self.widths[i - 1] if i > 0 else self.widths[0]

    def level_for_block(self, i: int) -> int:
        """Coarsest style level feeds the earliest blocks, in N contiguous groups."""
        n, k = self.n_levels, self.n_blocks
        return n - 1 - min(n - 1, (i * n) // k)

    def forward(self, S: StyleCodeSet, L: torch.Tensor, feedback: torch.Tensor | None = None,
                return_trace: bool = False):
        if L.shape[-1] != self.resolution or L.shape[-3] != self.num_regions:
            raise ValueError(
                f"semantic map shape {tuple(L.shape[-3:])} does not match generator config"
            )
        codes = S.codes
        if codes.dim() == 3:
            codes = codes.unsqueeze(0)
        if L.dim() == 3:
            L = L.unsqueeze(0)
        if codes.shape[1] != self.n_levels or codes.shape[-1] != self.style_dim:
            raise ValueError(
                f"style codes {tuple(codes.shape[1:])} do not match generator config"
            )
        B = codes.shape[0]
        Lf = L.to(codes.dtype)
        h = self.const.expand(B, -1, -1, -1).to(codes.dtype)
        trace = []
        for i, block in enumerate(self.blocks):
            size = self.block_size(i)
            if h.shape[-1] < size:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            L_b = Lf if size == self.resolution else F.interpolate(Lf, size=(size, size), mode="nearest")
            fb = feedback if i == self.middle_index else None
            h = block(h, codes[:, self.level_for_block(i)], L_b, feedback=fb)
            trace.append(h)
        img = torch.tanh(self.out_conv(F.leaky_relu(h, 0.2)))
        if return_trace:
            return img, trace
        return img


def generate(model: Generator, S: StyleCodeSet, L: torch.Tensor,
             feedback: torch.Tensor | None = None):
    """Full generator pass; returns (image in [-1,1], per-block feature trace)."""
    return model(S, L, feedback=feedback, return_trace=True)
