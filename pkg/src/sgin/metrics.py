"""Image-quality metrics and the dual whole / masked-only scoring protocol.

All pixel metrics are computed in [0,255] space after a linear (unrounded,
unclamped) mapping from the model's [-1,1] domain. Masked-only scoring
zeroes the unmasked region of BOTH images in the [-1,1] domain first, so
an all-ones mask reproduces the whole-image score exactly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

PIXEL_METRICS = ("psnr", "ssim", "ms_ssim", "rmse")
ALL_METRICS = ("psnr", "ssim", "ms_ssim", "rmse", "lpips", "fid")
_PSNR_CAP = 100.0
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def to_255(x: np.ndarray) -> np.ndarray:
    """Linear [-1,1] -> [0,255]; deliberately no rounding or clipping."""
    return (x.astype(np.float64) + 1.0) * 127.5


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected H*W*3 images, got {a.shape}")


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_K = _gaussian_kernel()


def _ssim_stats(a: np.ndarray, b: np.ndarray):
    """Per-channel windowed (luminance, contrast-structure) means."""
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    lum, cs = [], []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = convolve2d(x, _SSIM_K, mode="valid")
        my = convolve2d(y, _SSIM_K, mode="valid")
        sxx = convolve2d(x * x, _SSIM_K, mode="valid") - mx * mx
        syy = convolve2d(y * y, _SSIM_K, mode="valid") - my * my
        sxy = convolve2d(x * y, _SSIM_K, mode="valid") - mx * my
        lum.append(((2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)).mean())
        cs.append(((2 * sxy + c2) / (sxx + syy + c2)).mean())
    return float(np.mean(lum)), float(np.mean(cs))


def _ssim(a: np.ndarray, b: np.ndarray) -> float:
    lum, cs = _ssim_stats(a, b)
    return lum * cs


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2, x.shape[1] // 2
    return x[: 2 * h, : 2 * w].reshape(h, 2, w, 2, -1).mean(axis=(1, 3))


def ms_ssim_scales(h: int, w: int) -> int:
    """Largest s <= 5 with min(H,W)/2^(s-1) >= 11 (window must fit at every scale)."""
    s = 1
    while s < 5 and min(h, w) / 2 ** s >= 11:
        s += 1
    return s


def _ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    s = ms_ssim_scales(a.shape[0], a.shape[1])
    weights = np.asarray(_MSSSIM_WEIGHTS[:s])
    weights = weights / weights.sum()
    value = 1.0
    x, y = a, b
    for i in range(s):
        lum, cs = _ssim_stats(x, y)
        if i < s - 1:
            value *= max(cs, 0.0) ** weights[i]
            x, y = _downsample2(x), _downsample2(y)
        else:
            value *= max(lum * cs, 0.0) ** weights[i]
    return float(value)


def pixel_metric(kind: str, a: np.ndarray, b: np.ndarray) -> float:
    """PSNR / SSIM / MS-SSIM / RMSE between two [-1,1] images."""
    _check_pair(a, b)
    a255, b255 = to_255(a), to_255(b)
    if kind == "psnr":
        mse = float(np.mean((a255 - b255) ** 2))
        if mse < 255.0 ** 2 * 1e-10:
            return _PSNR_CAP
        return 10.0 * math.log10(255.0 ** 2 / mse)
    if kind == "rmse":
        return float(np.sqrt(np.mean((a255 - b255) ** 2)))
    if kind == "ssim":
        return _ssim(a255, b255)
    if kind == "ms_ssim":
        return _ms_ssim(a255, b255)
    raise ValueError(f"unknown pixel metric {kind!r}")


def _to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).float().unsqueeze(0)


def lpips(extractor, a: np.ndarray, b: np.ndarray) -> float:
    """Deep feature distance with unit-normalized channels, identity calibration."""
    _check_pair(a, b)
    with torch.no_grad():
        fa = extractor(_to_tensor(a))
        fb = extractor(_to_tensor(b))
    total = 0.0
    for x, y in zip(fa, fb):
        xn = x / torch.sqrt((x ** 2).sum(dim=1, keepdim=True) + 1e-10)
        yn = y / torch.sqrt((y ** 2).sum(dim=1, keepdim=True) + 1e-10)
        total += float(((xn - yn) ** 2).sum(dim=1).mean())
    return total


def _moments(feats: np.ndarray):
    n, d = feats.shape
    mu = feats.mean(axis=0)
    if n == 1:
        sigma = np.zeros((d, d))
    else:
        sigma = np.cov(feats, rowvar=False, ddof=1)
        sigma = np.atleast_2d(sigma)
    if n < d + 1:
        sigma = sigma + 1e-6 * np.eye(d)
    return mu, sigma


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim == 1:
        feats_a = feats_a[:, None]
    if feats_b.ndim == 1:
        feats_b = feats_b[:, None]
    if feats_a.shape[0] == 0 or feats_b.shape[0] == 0:
        raise ValueError("empty set")
    mu_a, sig_a = _moments(feats_a)
    mu_b, sig_b = _moments(feats_b)
    root_a = _sqrtm_psd(sig_a)
    inner = root_a @ sig_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(sig_a) + np.trace(sig_b) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def masked_region_score(kind: str, pred: np.ndarray, gt: np.ndarray, m: np.ndarray,
                        extractor=None) -> float:
    """Zero the unmasked region of both images, then score the pair."""
    _check_pair(pred, gt)
    if m.shape != pred.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match images")
    mf = (m > 0).astype(pred.dtype)
    if mf.sum() == 0:
        raise ValueError("empty mask region")
    pz = pred * mf[:, :, None]
    gz = gt * mf[:, :, None]
    if kind == "lpips":
        return lpips(extractor, pz, gz)
    return pixel_metric(kind, pz, gz)


@dataclass
class MetricReport:
    values: dict  # metric -> (whole, masked_only)
    n_samples: int
    extractor_id: str
    config: dict = field(default_factory=dict)
    per_sample: list = field(default_factory=list)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "whole", "masked_only"])
            for metric in ALL_METRICS:
                whole, masked = self.values[metric]
                w.writerow([metric, f"{whole:.6f}", f"{masked:.6f}"])


def score_pair(pred: np.ndarray, gt: np.ndarray, m: np.ndarray, extractor) -> dict:
    """All per-sample metrics (FID excluded), both modes."""
    out = {}
    for kind in PIXEL_METRICS:
        out[kind] = (pixel_metric(kind, pred, gt),
                     masked_region_score(kind, pred, gt, m))
    out["lpips"] = (lpips(extractor, pred, gt),
                    masked_region_score("lpips", pred, gt, m, extractor=extractor))
    return out


def evaluate(models, manifest, config, predict_fn=None, csv_path=None) -> MetricReport:
    """Score the val split: pipeline prediction vs ground truth, both modes.

    `predict_fn(sample) -> image` overrides the model pipeline (used for
    baselines); samples are dicts with x_gt, x_occ, m, L keys.
    """
    from .data_forge import load_sample  # local import keeps module deps acyclic

    if predict_fn is None:
        if models is None:
            raise ValueError("needs models or predict_fn")
        from .service import make_predictor
        predict_fn = make_predictor(models)
    extractor = getattr(models, "extractor", None)
    if extractor is None:
        from .objectives import build_extractor
        extractor = build_extractor(getattr(config, "feature_extractor", "random"),
                                    getattr(config, "extractor_seed", 17))
    ids = manifest.val
    if not ids:
        raise ValueError("val split is empty")
    sums = {k: np.zeros(2) for k in PIXEL_METRICS + ("lpips",)}
    per_sample = []
    preds_whole, gts_whole, preds_masked, gts_masked = [], [], [], []
    with torch.no_grad():
        for sid in ids:
            sample = load_sample(manifest, sid)
            pred = np.asarray(predict_fn(sample), dtype=np.float32)
            gt = sample["x_gt"]
            m = sample["m"]
            scores = score_pair(pred, gt, m, extractor)
            per_sample.append({"id": sid, **{k: v for k, v in scores.items()}})
            for k, v in scores.items():
                sums[k] += np.asarray(v)
            mf = (m > 0).astype(np.float32)[:, :, None]
            preds_whole.append(extractor.pooled(_to_tensor(pred))[0].numpy())
            gts_whole.append(extractor.pooled(_to_tensor(gt))[0].numpy())
            preds_masked.append(extractor.pooled(_to_tensor(pred * mf))[0].numpy())
            gts_masked.append(extractor.pooled(_to_tensor(gt * mf))[0].numpy())
    values = {k: tuple(sums[k] / len(ids)) for k in sums}
    values["fid"] = (fid(np.stack(preds_whole), np.stack(gts_whole)),
                     fid(np.stack(preds_masked), np.stack(gts_masked)))
    report = MetricReport(values=values, n_samples=len(ids),
                          extractor_id=getattr(extractor, "identifier", "custom"),
                          config=config.to_dict() if hasattr(config, "to_dict") else dict(config or {}),
                          per_sample=per_sample)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report
