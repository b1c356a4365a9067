"""Training losses and the multi-scale patch discriminator.

Generator loss is the weighted sum of self-distillation, discriminator
feature matching, deep perceptual distance, and a non-saturating
adversarial term; the discriminator trains on the standard cross-entropy
objective. The deep feature extractor behind the perceptual term is
pluggable and defaults to a frozen random conv stack so runs stay fully
self-contained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    sd: float = 10.0
    feat: float = 10.0
    per: float = 10.0
    adv: float = 1.0

    def __post_init__(self):
        for name in ("sd", "feat", "per", "adv"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


class PatchDiscriminator(nn.Module):
    """Strided conv stack -> patch logit map; intermediate features exposed.

    4 downsampling layers at 64px and above; fewer at tiny inputs so the
    bottom feature map keeps at least 2x2 spatial extent for its norm.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 24, input_size: int = 64):
        super().__init__()
        c = base_channels
        n_layers = max(1, min(4, int(math.log2(input_size)) - 1))
        widths = [min(4 * c, c * 2 ** i) for i in range(n_layers)]
        layers = []
        cin = in_channels
        for i, w in enumerate(widths):
            block = [nn.Conv2d(cin, w, 4, stride=2, padding=1)]
            if i > 0:
                block.append(nn.InstanceNorm2d(w))
            block.append(nn.LeakyReLU(0.2))
            layers.append(nn.Sequential(*block))
            cin = w
        self.stages = nn.ModuleList(layers)
        self.head = nn.Conv2d(cin, 1, 3, padding=1)

    def forward(self, x: torch.Tensor):
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return self.head(h), feats


class MultiScaleDiscriminator(nn.Module):
    """The same patch discriminator applied at full and half resolution."""

    def __init__(self, in_channels: int = 3, base_channels: int = 24, n_scales: int = 2,
                 resolution: int = 64):
        super().__init__()
        self.scales = nn.ModuleList(
            PatchDiscriminator(in_channels, base_channels, input_size=resolution // 2 ** i)
            for i in range(n_scales)
        )

    def forward(self, x: torch.Tensor):
        logits, feats = [], []
        h = x
        for i, d in enumerate(self.scales):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            lg, ft = d(h)
            logits.append(lg)
            feats.extend(ft)
        return logits, feats


def _mean_log_prob(logits: list[torch.Tensor], of_real: bool) -> torch.Tensor:
    """E[log p] (or log(1-p)) averaged over patches, then over scales."""
    terms = []
    for lg in logits:
        p = torch.sigmoid(lg).clamp(PROB_EPS, 1.0 - PROB_EPS)
        terms.append(torch.log(p if of_real else 1.0 - p).mean())
    return torch.stack(terms).mean()


def discriminator_loss(logits_real: list[torch.Tensor], logits_fake: list[torch.Tensor]) -> torch.Tensor:
    return -(_mean_log_prob(logits_real, True) + _mean_log_prob(logits_fake, False))


def generator_adversarial_loss(logits_fake: list[torch.Tensor]) -> torch.Tensor:
    # non-saturating form: maximize log D(fake) instead of minimizing log(1-D)
    return -_mean_log_prob(logits_fake, True)


def adversarial_losses(D: MultiScaleDiscriminator, x_real: torch.Tensor, x_fake: torch.Tensor):
    """(loss_G, loss_D) for one real/fake pair."""
    logits_real, _ = D(x_real)
    logits_fake_d, _ = D(x_fake.detach())
    loss_d = discriminator_loss(logits_real, logits_fake_d)
    logits_fake_g, _ = D(x_fake)
    loss_g = generator_adversarial_loss(logits_fake_g)
    return loss_g, loss_d


def self_distillation_loss(trace_gt, trace_m) -> torch.Tensor:
    """Sum over blocks of the Euclidean norm of the flattened feature gap."""
    if len(trace_gt) != len(trace_m):
        raise ValueError(f"trace length mismatch: {len(trace_gt)} vs {len(trace_m)}")
    total = None
    for f_gt, f_m in zip(trace_gt, trace_m):
        if f_gt.shape != f_m.shape:
            raise ValueError(f"trace shape mismatch: {tuple(f_gt.shape)} vs {tuple(f_m.shape)}")
        term = torch.linalg.vector_norm(f_gt.detach() - f_m)
        total = term if total is None else total + term
    return total


def perceptual_loss(extractor, x_pred: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    """Sum over extractor layers of mean squared feature distance."""
    feats_pred = extractor(x_pred)
    with torch.no_grad():
        feats_gt = extractor(x_gt)
    total = None
    for fp, fg in zip(feats_pred, feats_gt):
        term = ((fp - fg) ** 2).mean()
        total = term if total is None else total + term
    return total


def feature_matching_loss(feats_real: list[torch.Tensor], feats_fake: list[torch.Tensor]) -> torch.Tensor:
    if len(feats_real) != len(feats_fake):
        raise ValueError(f"feature list length mismatch: {len(feats_real)} vs {len(feats_fake)}")
    total = None
    for fr, ff in zip(feats_real, feats_fake):
        term = (fr.detach() - ff).abs().mean()
        total = term if total is None else total + term
    return total


def total_generator_loss(parts: dict, w: LossWeights) -> torch.Tensor:
    return (w.sd * parts["sd"] + w.feat * parts["feat"]
            + w.per * parts["per"] + w.adv * parts["adv"])


class RandomFeatureExtractor(nn.Module):
    """Frozen conv stack with seeded random weights.

    Serves as the deep feature function for the perceptual loss, LPIPS and
    FID when no pretrained backbone is available. Weight draws come from a
    private generator so the identifier fully determines the features.
    """

    def __init__(self, seed: int = 17, in_channels: int = 3, widths=(32, 64, 64)):
        super().__init__()
        self.identifier = f"random-conv-{len(widths)}l-seed{seed}"
        g = torch.Generator().manual_seed(seed)
        convs = []
        cin = in_channels
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / fan_in ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            cin = w
        self.convs = nn.ModuleList(convs)
        self.out_dim = widths[-1]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Global average of the deepest layer; one vector per sample."""
        return self.forward(x)[-1].mean(dim=(-2, -1))


def build_extractor(kind: str = "random", seed: int = 17) -> RandomFeatureExtractor:
    if kind != "random":
        raise ValueError(f"unknown feature extractor {kind!r}")
    return RandomFeatureExtractor(seed=seed)
