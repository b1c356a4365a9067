"""Procedural occluded-face data synthesis and evaluation mask families.

Faces are drawn as layered ellipses/polygons over 11 regions (background,
skin, brows, eyes, glasses, ears, nose, lips, mouth interior, hair, neck)
with per-sample colors and mild textures, so region styles carry real
signal at desk scale. Occluders are composited hard (no feathering) and
the ground-truth mask is exactly the composited alpha support.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import pngio
from .pngio import NUM_REGIONS, REGION_NAMES

BACKGROUND, SKIN, BROWS, EYES, GLASSES, EARS, NOSE, LIPS, MOUTH, HAIR, NECK = range(11)

SUPPORTED_RESOLUTIONS = (32, 64, 128, 256)

MASK_KINDS = ("object", "hand", "half", "center70")


class OccluderOutOfFrameError(ValueError):
    pass


@dataclass
class OccluderSprite:
    """Image patch with a binary alpha support, pasted over faces."""

    pixels: np.ndarray  # h*w*3 float32 in [-1, 1]
    alpha: np.ndarray   # h*w uint8 in {0, 1}


@dataclass
class DatasetManifest:
    ids: list[str]
    train: list[str]
    val: list[str]
    paths: dict[str, dict[str, str]]
    resolution: int = 0
    seed: int = 0
    root: str = ""  # set on build/load, not serialized

    def to_json(self) -> str:
        payload = {
            "ids": self.ids,
            "split": {"train": self.train, "val": self.val},
            "paths": self.paths,
            "resolution": self.resolution,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            ids=d["ids"],
            train=d["split"]["train"],
            val=d["split"]["val"],
            paths=d["paths"],
            resolution=d.get("resolution", 0),
            seed=d.get("seed", 0),
        )


@dataclass
class ForgeConfig:
    root: str
    n_samples: int
    resolution: int = 64
    seed: int = 0
    train_fraction: float = 0.888  # 22300:2800


def _grid(resolution: int):
    c = (np.arange(resolution) + 0.5) / resolution
    return np.meshgrid(c, c, indexing="ij")  # yy, xx in (0, 1)


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    ct, st = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * ct + dy * st) / max(rx, 1e-6)
    v = (-dx * st + dy * ct) / max(ry, 1e-6)
    return u * u + v * v <= 1.0


def _rect(yy, xx, y0, y1, x0, x1):
    return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)


def _sample_color(rng, lo=-0.9, hi=0.9):
    return rng.uniform(lo, hi, size=3)


def _skin_tone(rng):
    r = rng.uniform(0.15, 0.85)
    g = r - rng.uniform(0.1, 0.35)
    b = g - rng.uniform(0.05, 0.3)
    return np.array([r, g, b])


def synth_face(seed: int, resolution: int):
    """Draw one procedural face; returns (image H*W*3 in [-1,1], one-hot H*W*11)."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS}")
    rng = np.random.default_rng(seed)

    # Geometry draws happen before rasterization, so the draw sequence does
    # not depend on resolution.
    cy = 0.48 + rng.uniform(-0.02, 0.02)
    cx = 0.50 + rng.uniform(-0.03, 0.03)
    ry = 0.30 + rng.uniform(-0.03, 0.03)
    rx = 0.22 + rng.uniform(-0.025, 0.025)
    tilt = rng.uniform(-0.08, 0.08)
    long_hair = rng.random() < 0.5
    has_glasses = rng.random() < 0.35
    mouth_open = rng.random() < 0.4
    has_ears = rng.random() < 0.8
    eye_y = cy - ry * 0.22 + rng.uniform(-0.015, 0.015)
    eye_dx = rx * (0.42 + rng.uniform(-0.05, 0.05))
    eye_r = 0.034 + rng.uniform(-0.006, 0.008)
    brow_dy = 0.055 + rng.uniform(-0.01, 0.015)
    nose_len = ry * (0.26 + rng.uniform(-0.05, 0.05))
    mouth_y = cy + ry * (0.52 + rng.uniform(-0.06, 0.06))
    mouth_w = rx * (0.45 + rng.uniform(-0.08, 0.1))
    fringe_frac = rng.uniform(0.45, 0.65)

    colors = np.zeros((NUM_REGIONS, 3))
    skin = _skin_tone(rng)
    hair = _sample_color(rng)
    colors[SKIN] = skin
    colors[EARS] = np.clip(skin * 0.92 - 0.03, -1, 1)
    colors[NECK] = np.clip(skin * 0.95 - 0.05, -1, 1)
    colors[HAIR] = hair
    colors[BROWS] = np.clip(hair * 0.7 - 0.1, -1, 1)
    colors[EYES] = rng.uniform(-0.9, 0.4, size=3)
    colors[GLASSES] = rng.uniform(-0.95, 0.2, size=3)
    colors[NOSE] = np.clip(skin * 0.9 + rng.uniform(-0.12, 0.04, size=3), -1, 1)
    colors[LIPS] = np.array([rng.uniform(0.0, 0.9), rng.uniform(-0.8, -0.1), rng.uniform(-0.8, 0.0)])
    colors[MOUTH] = np.array([rng.uniform(-0.7, -0.2), rng.uniform(-0.95, -0.5), rng.uniform(-0.95, -0.5)])

    bg_a = _sample_color(rng)
    bg_b = _sample_color(rng)
    bg_angle = rng.uniform(0, 2 * math.pi)
    hair_freq = rng.uniform(25, 70)
    hair_phase = rng.uniform(0, 2 * math.pi)
    hair_amp = rng.uniform(0.05, 0.16)
    hair_dir = rng.uniform(0, math.pi)
    skin_shade = rng.uniform(0.05, 0.18)
    noise_amp = rng.uniform(0.015, 0.05)
    noise = rng.normal(0.0, 1.0, size=(resolution, resolution, 3))

    yy, xx = _grid(resolution)
    labels = np.zeros((resolution, resolution), dtype=np.uint8)

    def paint(mask, region):
        labels[mask] = region

    paint(_rect(yy, xx, cy + ry * 0.75, 1.0, cx - rx * 0.42, cx + rx * 0.42), NECK)
    if has_ears:
        ear_y = eye_y + 0.03
        paint(_ellipse(yy, xx, ear_y, cx - rx - 0.015, 0.055, 0.03), EARS)
        paint(_ellipse(yy, xx, ear_y, cx + rx + 0.015, 0.055, 0.03), EARS)
    if long_hair:
        paint(_ellipse(yy, xx, cy + 0.05, cx, ry * 1.45, rx * 1.5, tilt), HAIR)
    paint(_ellipse(yy, xx, cy - ry * 0.35, cx, ry * 0.95, rx * 1.3, tilt), HAIR)
    face = _ellipse(yy, xx, cy, cx, ry, rx, tilt)
    paint(face, SKIN)
    fringe = _ellipse(yy, xx, cy - ry * 0.42, cx, ry * 0.8, rx * 1.22, tilt) & (yy < cy - ry * fringe_frac)
    paint(fringe, HAIR)

    for sgn in (-1.0, 1.0):
        ex = cx + sgn * eye_dx
        paint(_ellipse(yy, xx, eye_y - brow_dy, ex, 0.012, eye_r * 1.5, sgn * 0.15), BROWS)
        paint(_ellipse(yy, xx, eye_y, ex, eye_r * 0.62, eye_r), EYES)
    if has_glasses:
        for sgn in (-1.0, 1.0):
            ex = cx + sgn * eye_dx
            outer = _ellipse(yy, xx, eye_y, ex, eye_r * 1.75, eye_r * 1.95)
            inner = _ellipse(yy, xx, eye_y, ex, eye_r * 1.3, eye_r * 1.5)
            paint(outer & ~inner, GLASSES)
        paint(_rect(yy, xx, eye_y - 0.008, eye_y + 0.008, cx - eye_dx, cx + eye_dx), GLASSES)
        for sgn in (-1.0, 1.0):
            ex = cx + sgn * eye_dx
            x0, x1 = sorted((ex + sgn * eye_r * 1.9, cx + sgn * rx))
            paint(_rect(yy, xx, eye_y - 0.007, eye_y + 0.007, x0, x1), GLASSES)
    paint(_ellipse(yy, xx, cy + ry * 0.1, cx, nose_len, rx * 0.16, tilt), NOSE)
    paint(_ellipse(yy, xx, mouth_y, cx, 0.028, mouth_w), LIPS)
    if mouth_open:
        paint(_ellipse(yy, xx, mouth_y, cx, 0.013, mouth_w * 0.6), MOUTH)

    img = colors[labels].astype(np.float64)
    # background gradient
    proj = (yy - 0.5) * math.cos(bg_angle) + (xx - 0.5) * math.sin(bg_angle) + 0.5
    bg_px = bg_a[None, None, :] * (1 - proj[..., None]) + bg_b[None, None, :] * proj[..., None]
    is_bg = labels == BACKGROUND
    img[is_bg] = bg_px[is_bg]
    # hair stripes (high-frequency content the style codes cannot carry)
    stripes = hair_amp * np.sin((yy * math.cos(hair_dir) + xx * math.sin(hair_dir)) * hair_freq + hair_phase)
    is_hair = labels == HAIR
    img[is_hair] += stripes[is_hair, None]
    # radial shading on skin-like regions
    rad = np.sqrt(((yy - cy) / max(ry, 1e-6)) ** 2 + ((xx - cx) / max(rx, 1e-6)) ** 2)
    shade = skin_shade * (1 - np.clip(rad, 0, 1.4))
    for region in (SKIN, EARS, NECK):
        sel = labels == region
        img[sel] += shade[sel, None]
    img += noise_amp * noise
    img = np.clip(img, -1.0, 1.0).astype(np.float32)

    onehot = pngio.indices_to_onehot(labels)
    return img, onehot


def _transform_sprite(sprite: OccluderSprite, scale: float, rotation: float):
    """Scale+rotate the sprite about its center with nearest sampling."""
    h, w = sprite.alpha.shape
    theta = math.radians(rotation)
    ct, st = abs(math.cos(theta)), abs(math.sin(theta))
    h2 = max(1, int(math.ceil(scale * (h * ct + w * st))))
    w2 = max(1, int(math.ceil(scale * (h * st + w * ct))))
    iy, ix = np.meshgrid(np.arange(h2), np.arange(w2), indexing="ij")
    py = iy + 0.5 - h2 / 2.0
    px = ix + 0.5 - w2 / 2.0
    c, s = math.cos(theta), math.sin(theta)
    qy = (c * py + s * px) / scale + h / 2.0
    qx = (-s * py + c * px) / scale + w / 2.0
    sy = np.floor(qy).astype(np.int64)
    sx = np.floor(qx).astype(np.int64)
    inside = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    sy_c = np.clip(sy, 0, h - 1)
    sx_c = np.clip(sx, 0, w - 1)
    alpha = np.where(inside, sprite.alpha[sy_c, sx_c], 0).astype(np.uint8)
    pixels = np.where(inside[..., None], sprite.pixels[sy_c, sx_c], 0.0).astype(np.float32)
    return pixels, alpha


def compose_occlusion(face: np.ndarray, sprite: OccluderSprite, placement):
    """Paste a transformed sprite over a face; returns (occluded image, mask).

    placement is (row, col, scale, rotation_degrees), row/col the top-left
    corner of the transformed sprite box. Raises OccluderOutOfFrameError when
    the transformed alpha support does not intersect the image.
    """
    H, W = face.shape[:2]
    h, w = sprite.alpha.shape
    if h >= H or w >= W:
        raise ValueError(f"sprite {h}x{w} must be smaller than face {H}x{W}")
    row, col, scale, rotation = placement
    if scale <= 0:
        raise ValueError("scale must be positive")
    pix2, alpha2 = _transform_sprite(sprite, float(scale), float(rotation))
    h2, w2 = alpha2.shape
    row, col = int(row), int(col)

    y0, y1 = max(row, 0), min(row + h2, H)
    x0, x1 = max(col, 0), min(col + w2, W)
    if y0 >= y1 or x0 >= x1:
        raise OccluderOutOfFrameError("occluder out of frame")
    sub_a = alpha2[y0 - row : y1 - row, x0 - col : x1 - col]
    sub_p = pix2[y0 - row : y1 - row, x0 - col : x1 - col]
    if sub_a.sum() == 0:
        raise OccluderOutOfFrameError("occluder out of frame")

    occluded = face.copy()
    mask = np.zeros((H, W), dtype=np.uint8)
    sel = sub_a.astype(bool)
    occluded[y0:y1, x0:x1][sel] = sub_p[sel]
    mask[y0:y1, x0:x1][sel] = 1
    return occluded, mask


def _fill_convex(resolution: int, pts: np.ndarray) -> np.ndarray:
    """Rasterize a convex polygon given CCW-ordered vertices (row, col)."""
    yy, xx = np.meshgrid(np.arange(resolution) + 0.5, np.arange(resolution) + 0.5, indexing="ij")
    inside = np.ones((resolution, resolution), dtype=bool)
    n = len(pts)
    for i in range(n):
        y0, x0 = pts[i]
        y1, x1 = pts[(i + 1) % n]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= cross >= 0
    return inside


def _convex_blob(rng, resolution: int) -> np.ndarray:
    cy = rng.uniform(0.2, 0.8) * resolution
    cx = rng.uniform(0.2, 0.8) * resolution
    ra = rng.uniform(0.10, 0.28) * resolution
    rb = rng.uniform(0.10, 0.28) * resolution
    rot = rng.uniform(0, math.pi)
    npts = int(rng.integers(6, 11))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=npts))
    # points on an ellipse in angle order form a convex (CCW) polygon
    py = cy + ra * np.sin(angles) * math.cos(rot) + rb * np.cos(angles) * math.sin(rot)
    px = cx + rb * np.cos(angles) * math.cos(rot) - ra * np.sin(angles) * math.sin(rot)
    return _fill_convex(resolution, np.stack([py, px], axis=1))


def _hand_blob(rng, resolution: int) -> np.ndarray:
    yy, xx = _grid(resolution)
    cy = rng.uniform(0.35, 0.65)
    cx = rng.uniform(0.35, 0.65)
    phi = rng.uniform(0, 2 * math.pi)
    palm_ry = rng.uniform(0.13, 0.18)
    palm_rx = palm_ry * rng.uniform(0.7, 0.85)
    mask = _ellipse(yy, xx, cy, cx, palm_ry, palm_rx, phi)
    n_fingers = int(rng.integers(4, 6))
    spread = rng.uniform(0.18, 0.26)
    for i in range(n_fingers):
        a = phi + (i - (n_fingers - 1) / 2.0) * spread + rng.uniform(-0.04, 0.04)
        length = rng.uniform(0.14, 0.24)
        fy = cy - (palm_ry * 0.8 + length / 2) * math.cos(a)
        fx = cx + (palm_ry * 0.8 + length / 2) * math.sin(a)
        mask |= _ellipse(yy, xx, fy, fx, length / 2, 0.032, -a)
    return mask


def make_mask(kind: str, resolution: int, seed: int) -> np.ndarray:
    """One evaluation mask: object blobs, hand silhouette, half, or center 70%."""
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    rng = np.random.default_rng(seed)
    mask = np.zeros((resolution, resolution), dtype=np.uint8)
    if kind == "half":
        top = rng.random() < 0.5
        half = resolution // 2
        if top:
            mask[:half] = 1
        else:
            mask[resolution - half :] = 1
    elif kind == "center70":
        side = int(round(math.sqrt(0.7) * resolution))
        start = (resolution - side) // 2
        mask[start : start + side, start : start + side] = 1
    elif kind == "object":
        n = int(rng.integers(1, 4))
        acc = np.zeros((resolution, resolution), dtype=bool)
        for _ in range(n):
            acc |= _convex_blob(rng, resolution)
        mask = acc.astype(np.uint8)
    else:  # hand
        mask = _hand_blob(rng, resolution).astype(np.uint8)
    return mask


def synth_sprite(seed: int, size: int) -> OccluderSprite:
    """Procedural occluder patch: colored blob / bar / hand-like silhouette."""
    rng = np.random.default_rng(seed)
    kind = rng.choice(["blob", "bar", "hand"])
    yy, xx = _grid(size)
    if kind == "blob":
        alpha = _convex_blob(rng, size)
    elif kind == "bar":
        ang = rng.uniform(0, math.pi)
        width = rng.uniform(0.12, 0.3)
        proj = (yy - 0.5) * math.cos(ang) + (xx - 0.5) * math.sin(ang)
        perp = -(yy - 0.5) * math.sin(ang) + (xx - 0.5) * math.cos(ang)
        alpha = (np.abs(proj) < width / 2) & (np.abs(perp) < 0.46)
    else:
        alpha = _hand_blob(rng, size)
    base = _sample_color(rng)
    second = _sample_color(rng)
    freq = rng.uniform(8, 30)
    phase = rng.uniform(0, 2 * math.pi)
    ang2 = rng.uniform(0, math.pi)
    t = 0.5 + 0.5 * np.sin((yy * math.cos(ang2) + xx * math.sin(ang2)) * freq + phase)
    pixels = base[None, None] * (1 - t[..., None]) + second[None, None] * t[..., None]
    pixels += rng.normal(0, 0.03, size=pixels.shape)
    pixels = np.clip(pixels, -1, 1).astype(np.float32)
    pixels[~alpha] = 0.0
    return OccluderSprite(pixels=pixels, alpha=alpha.astype(np.uint8))


def _sample_seed(base_seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([base_seed, index, stream]).generate_state(1)[0])


def build_dataset(cfg: ForgeConfig) -> DatasetManifest:
    """Write the images/semantics/masks/occluded tree plus manifest.json."""
    root = cfg.root
    for sub in ("images", "semantics", "masks", "occluded"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)

    ids, paths = [], {}
    for i in range(cfg.n_samples):
        sid = f"{i:05d}"
        face, onehot = synth_face(_sample_seed(cfg.seed, i, 0), cfg.resolution)
        rng = np.random.default_rng(_sample_seed(cfg.seed, i, 1))
        occluded = mask = None
        for _attempt in range(20):
            size = int(rng.uniform(0.3, 0.55) * cfg.resolution)
            sprite = synth_sprite(_sample_seed(cfg.seed, i, 2 + _attempt), max(8, size))
            row = int(rng.uniform(0.05, 0.75) * cfg.resolution)
            col = int(rng.uniform(0.05, 0.75) * cfg.resolution)
            scale = rng.uniform(0.8, 1.3)
            rot = rng.uniform(0, 360)
            try:
                occluded, mask = compose_occlusion(face, sprite, (row, col, scale, rot))
                break
            except OccluderOutOfFrameError:
                continue
        if occluded is None:
            raise RuntimeError(f"could not place occluder for sample {sid}")

        rel = {
            "image": f"images/{sid}.png",
            "semantics": f"semantics/{sid}.png",
            "mask": f"masks/{sid}.png",
            "occluded": f"occluded/{sid}.png",
        }
        pngio.save_image(os.path.join(root, rel["image"]), face)
        pngio.save_semantics(os.path.join(root, rel["semantics"]), pngio.onehot_to_indices(onehot))
        pngio.save_mask(os.path.join(root, rel["mask"]), mask)
        pngio.save_image(os.path.join(root, rel["occluded"]), occluded)
        ids.append(sid)
        paths[sid] = rel

    n_train = int(math.floor(cfg.n_samples * cfg.train_fraction))
    manifest = DatasetManifest(
        ids=ids,
        train=ids[:n_train],
        val=ids[n_train:],
        paths=paths,
        resolution=cfg.resolution,
        seed=cfg.seed,
        root=root,
    )
    with open(os.path.join(root, "manifest.json"), "w") as f:
        f.write(manifest.to_json())
    return manifest


def load_manifest(root: str) -> DatasetManifest:
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = DatasetManifest.from_json(f.read())
    manifest.root = root
    for sid in manifest.ids:
        for key, rel in manifest.paths[sid].items():
            if not os.path.exists(os.path.join(root, rel)):
                raise FileNotFoundError(f"manifest entry {sid}/{key} missing: {rel}")
    return manifest


def load_sample(manifest: DatasetManifest, sid: str) -> dict:
    """One sample as numpy arrays: x_gt, x_occ (H*W*3 [-1,1]), m (H*W), L (H*W*C one-hot)."""
    rel = manifest.paths[sid]
    root = manifest.root
    x_gt = pngio.load_image(os.path.join(root, rel["image"]))
    x_occ = pngio.load_image(os.path.join(root, rel["occluded"]))
    m = pngio.load_mask(os.path.join(root, rel["mask"]))
    L = pngio.indices_to_onehot(pngio.load_semantics(os.path.join(root, rel["semantics"])))
    return {"id": sid, "x_gt": x_gt, "x_occ": x_occ, "m": m, "L": L}


def dataset_digest(root: str) -> str:
    """Stable content hash of every file in a dataset tree."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as f:
                h.update(f.read())
    return h.hexdigest()
