"""PNG serialization for the dataset layout and service payloads.

Conventions: images are float32 H*W*3 in [-1, 1] and stored as 8-bit sRGB
PNG via x255 = round((x + 1) * 127.5). Semantic maps are stored as 8-bit
palette-indexed PNG with indices 0..10, masks as 1-bit PNG (1 = occluded).
"""
from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image as PILImage

NUM_REGIONS = 11

REGION_NAMES = (
    "background",
    "skin",
    "brows",
    "eyes",
    "glasses",
    "ears",
    "nose",
    "lips",
    "mouth_interior",
    "hair",
    "neck",
)

# Fixed display palette for the 11 region indices (shared with the UI legend).
REGION_PALETTE = (
    (0, 0, 0),        # background
    (255, 204, 153),  # skin
    (139, 69, 19),    # brows
    (0, 102, 255),    # eyes
    (64, 64, 64),     # glasses
    (255, 153, 102),  # ears
    (255, 102, 0),    # nose
    (204, 0, 51),     # lips
    (102, 0, 25),     # mouth_interior
    (153, 102, 51),   # hair
    (255, 178, 128),  # neck
)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] float image -> uint8 via round((x + 1) * 127.5)."""
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """uint8 image -> float32 in [-1, 1]."""
    return (arr.astype(np.float32) / 127.5) - 1.0


def image_to_png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes) -> np.ndarray:
    pil = PILImage.open(io.BytesIO(data)).convert("RGB")
    return from_uint8(np.asarray(pil))


def save_image(path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(image_to_png_bytes(img))


def load_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        return image_from_png_bytes(f.read())


def _palette_flat() -> list[int]:
    flat = [v for rgb in REGION_PALETTE for v in rgb]
    flat += [0] * (768 - len(flat))
    return flat


def semantics_to_png_bytes(indices: np.ndarray) -> bytes:
    """Label index matrix (H*W, values 0..10) -> palette PNG bytes."""
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise ValueError(f"expected H*W index matrix, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= NUM_REGIONS:
        raise ValueError("semantic indices out of range 0..10")
    pil = PILImage.fromarray(idx.astype(np.uint8), mode="P")
    pil.putpalette(_palette_flat())
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def semantics_from_png_bytes(data: bytes) -> np.ndarray:
    pil = PILImage.open(io.BytesIO(data))
    if pil.mode != "P":
        raise ValueError(f"semantic map must be a palette PNG, got mode {pil.mode}")
    idx = np.asarray(pil).astype(np.uint8)
    bad = np.argwhere(idx >= NUM_REGIONS)
    if bad.size:
        r, c = (int(v) for v in bad[0])
        raise ValueError(f"semantic index {int(idx[r, c])} out of range 0..10 at pixel ({r},{c})")
    return idx


def save_semantics(path, indices: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(semantics_to_png_bytes(indices))


def load_semantics(path) -> np.ndarray:
    with open(path, "rb") as f:
        return semantics_from_png_bytes(f.read())


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"expected H*W mask, got shape {m.shape}")
    buf = io.BytesIO()
    PILImage.fromarray(m.astype(bool)).save(buf, format="PNG", bits=1)
    return buf.getvalue()


def mask_from_png_bytes(data: bytes) -> np.ndarray:
    pil = PILImage.open(io.BytesIO(data)).convert("1")
    return np.asarray(pil).astype(np.uint8)


def save_mask(path, mask: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(mask_to_png_bytes(mask))


def load_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        return mask_from_png_bytes(f.read())


def indices_to_onehot(indices: np.ndarray, num_classes: int = NUM_REGIONS) -> np.ndarray:
    """H*W index matrix -> H*W*C one-hot (uint8)."""
    return np.eye(num_classes, dtype=np.uint8)[np.asarray(indices).astype(np.int64)]


def onehot_to_indices(onehot: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(onehot), axis=-1).astype(np.uint8)


def b64_encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64_decode(payload: str) -> bytes:
    return base64.b64decode(payload.encode("ascii"))
