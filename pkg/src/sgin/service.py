"""User-facing orchestration: inpainting pipeline, edits, style swaps, HTTP.

Inputs that do not match the model resolution are resized: images with
antialiased bicubic interpolation (clamped back to [-1,1]), masks and
semantic maps with nearest-neighbor so labels stay crisp and one-hot.
All inference runs under no_grad against frozen bundle weights, so
responses are deterministic for a given checkpoint digest.
"""
from __future__ import annotations

import binascii
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import pngio
from .detector import apply_mask_t, detect
from .feedback import refine
from .generator import generate
from .segmenter import SemanticsError, segment, validate_semantics
from .style_encoder import StyleCodeSet, encode_styles
from .trainer import ModelBundle, load_bundle

SERVICE_VERSION = "0.1.0"


def _img_to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def _tensor_to_img(t: torch.Tensor) -> np.ndarray:
    return t.squeeze(0).permute(1, 2, 0).numpy().astype(np.float32)


def _resize_image_t(t: torch.Tensor, res: int) -> torch.Tensor:
    if t.shape[-1] == res and t.shape[-2] == res:
        return t
    out = F.interpolate(t, size=(res, res), mode="bicubic", align_corners=False, antialias=True)
    return out.clamp(-1.0, 1.0)


def _resize_nearest_t(t: torch.Tensor, res: int) -> torch.Tensor:
    if t.shape[-1] == res and t.shape[-2] == res:
        return t
    return F.interpolate(t, size=(res, res), mode="nearest")


def _style_digest(S: StyleCodeSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(S.codes.detach().numpy(), dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(S.presence.detach().numpy(), dtype=np.uint8).tobytes())
    return h.hexdigest()


@dataclass
class InpaintResult:
    x_masked: np.ndarray    # H*W*3 [-1,1]
    semantics: np.ndarray   # H*W*C one-hot uint8
    x_coarse: np.ndarray
    x_refined: np.ndarray
    mask: np.ndarray        # H*W uint8
    style_digest: str


def _prepare_semantics(bundle: ModelBundle, semantics: np.ndarray | None,
                       x_masked_t: torch.Tensor) -> torch.Tensor:
    res = bundle.config.resolution
    if semantics is not None:
        validate_semantics(np.asarray(semantics))
        L = torch.from_numpy(np.asarray(semantics).transpose(2, 0, 1).astype(np.float32))
        return _resize_nearest_t(L.unsqueeze(0), res)
    if bundle.segmenter is None:
        raise ValueError("no semantics available: supply an override or a segmenter checkpoint")
    onehot, _ = segment(bundle.segmenter, x_masked_t)
    return onehot.float()


def _prepare_mask(bundle: ModelBundle, mask: np.ndarray | None,
                  x_t: torch.Tensor) -> torch.Tensor:
    res = bundle.config.resolution
    if mask is not None:
        m = torch.from_numpy((np.asarray(mask) > 0).astype(np.float32))
        m = _resize_nearest_t(m[None, None], res).squeeze(1)
        return m
    if bundle.detector is not None:
        with torch.no_grad():
            return detect(bundle.detector, x_t).float()
    return torch.zeros(1, res, res)


def inpaint(bundle: ModelBundle, x_occ: np.ndarray, mask: np.ndarray | None = None,
            semantics: np.ndarray | None = None) -> InpaintResult:
    """Full pipeline on one image; overrides replace the detector/segmenter."""
    res = bundle.config.resolution
    with torch.no_grad():
        x_t = _resize_image_t(_img_to_tensor(x_occ), res)
        m_t = _prepare_mask(bundle, mask, x_t)
        x_masked_t = apply_mask_t(x_t, m_t)
        L_t = _prepare_semantics(bundle, semantics, x_masked_t)
        S = encode_styles(bundle.encoder, x_masked_t, L_t, m_t, bundle.config.rap_norm)
        if bundle.feedback_net is not None:
            x_coarse_t, x_refined_t = refine((bundle.generator, bundle.feedback_net),
                                             x_masked_t, L_t, S, m_t)
        else:
            x_coarse_t, _ = generate(bundle.generator, S, L_t)
            x_refined_t = x_coarse_t
    return InpaintResult(
        x_masked=_tensor_to_img(x_masked_t),
        semantics=L_t.squeeze(0).permute(1, 2, 0).numpy().astype(np.uint8),
        x_coarse=_tensor_to_img(x_coarse_t),
        x_refined=_tensor_to_img(x_refined_t),
        mask=m_t.squeeze(0).numpy().astype(np.uint8),
        style_digest=_style_digest(S),
    )


def manipulate(bundle: ModelBundle, x: np.ndarray, L_edit: np.ndarray,
               m: np.ndarray) -> np.ndarray:
    """Re-synthesize under an edited semantic layout."""
    return inpaint(bundle, x, mask=m, semantics=L_edit).x_refined


def style_swap(S_src: StyleCodeSet, S_ref: StyleCodeSet, regions) -> StyleCodeSet:
    """Copy the reference's codes (and presence) for the given regions."""
    if S_src.codes.shape != S_ref.codes.shape:
        raise ValueError(
            f"style code shapes differ: {tuple(S_src.codes.shape)} vs {tuple(S_ref.codes.shape)}"
        )
    n_regions = S_src.codes.shape[-2]
    out = S_src.clone()
    for r in regions:
        r = int(r)
        if r < 0 or r >= n_regions:
            raise ValueError(f"region index {r} out of range for {n_regions} regions")
        out.codes[..., r, :] = S_ref.codes[..., r, :]
        out.presence[..., r] = S_ref.presence[..., r]
    return out


def swap_styles_and_generate(bundle: ModelBundle, source: np.ndarray,
                             reference: np.ndarray, regions) -> np.ndarray:
    """Inpaint the source with the reference's styles on selected regions.

    The source mask comes from the detector when present (else no hole);
    the reference is treated as clean (zero mask).
    """
    res = bundle.config.resolution
    with torch.no_grad():
        src_t = _resize_image_t(_img_to_tensor(source), res)
        ref_t = _resize_image_t(_img_to_tensor(reference), res)
        m_src = _prepare_mask(bundle, None, src_t)
        m_ref = torch.zeros(1, res, res)
        x_masked_t = apply_mask_t(src_t, m_src)
        L_src = _prepare_semantics(bundle, None, x_masked_t)
        L_ref = _prepare_semantics(bundle, None, ref_t)
        S_src = encode_styles(bundle.encoder, x_masked_t, L_src, m_src, bundle.config.rap_norm)
        S_ref = encode_styles(bundle.encoder, ref_t, L_ref, m_ref, bundle.config.rap_norm)
        S = style_swap(S_src, S_ref, regions)
        if bundle.feedback_net is not None:
            _, x_refined_t = refine((bundle.generator, bundle.feedback_net),
                                    x_masked_t, L_src, S, m_src)
        else:
            x_refined_t, _ = generate(bundle.generator, S, L_src)
    return _tensor_to_img(x_refined_t)


def make_predictor(bundle: ModelBundle):
    """predict(sample) -> refined image, honoring the config's mask/semantics mode."""
    cfg = bundle.config

    def predict(sample: dict) -> np.ndarray:
        mask = sample["m"] if cfg.mask_source == "oracle" else None
        sem = sample["L"] if cfg.semantics == "oracle" else None
        return inpaint(bundle, sample["x_occ"], mask=mask, semantics=sem).x_refined

    return predict


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

def create_app(bundle: ModelBundle):
    from fastapi import FastAPI, HTTPException
    from pydantic import BaseModel

    class SegmentRequest(BaseModel):
        image: str

    class InpaintRequest(BaseModel):
        image: str
        mask: str | None = None
        semantics: str | None = None

    class ManipulateRequest(BaseModel):
        image: str
        semantics: str
        mask: str

    class StyleSwapRequest(BaseModel):
        source_image: str
        reference_image: str
        regions: list[int]

    app = FastAPI(title="facial inpainting service", version=SERVICE_VERSION)
    decode_errors = (ValueError, KeyError, OSError, binascii.Error)

    def _image(b64: str) -> np.ndarray:
        return pngio.image_from_png_bytes(pngio.b64_decode(b64))

    def _semantics(b64: str) -> np.ndarray:
        idx = pngio.semantics_from_png_bytes(pngio.b64_decode(b64))
        return pngio.indices_to_onehot(idx)

    def _mask(b64: str) -> np.ndarray:
        return pngio.mask_from_png_bytes(pngio.b64_decode(b64))

    def _img_b64(img: np.ndarray) -> str:
        return pngio.b64_encode(pngio.image_to_png_bytes(img))

    @app.get("/health")
    def health():
        return {"status": "ok", "version": SERVICE_VERSION,
                "checkpoint_digest": bundle.digest}

    @app.post("/segment")
    def segment_endpoint(req: SegmentRequest):
        if bundle.segmenter is None:
            raise HTTPException(status_code=503, detail="segmenter not loaded")
        try:
            x = _image(req.image)
            with torch.no_grad():
                x_t = _resize_image_t(_img_to_tensor(x), bundle.config.resolution)
                onehot, _ = segment(bundle.segmenter, x_t)
            idx = onehot.squeeze(0).argmax(dim=0).numpy().astype(np.uint8)
            return {"semantics": pngio.b64_encode(pngio.semantics_to_png_bytes(idx))}
        except decode_errors as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.post("/inpaint")
    def inpaint_endpoint(req: InpaintRequest):
        try:
            x = _image(req.image)
            mask = _mask(req.mask) if req.mask is not None else None
            sem = _semantics(req.semantics) if req.semantics is not None else None
            result = inpaint(bundle, x, mask=mask, semantics=sem)
        except decode_errors as e:
            raise HTTPException(status_code=422, detail=str(e))
        idx = pngio.onehot_to_indices(result.semantics)
        return {
            "masked": _img_b64(result.x_masked),
            "coarse": _img_b64(result.x_coarse),
            "refined": _img_b64(result.x_refined),
            "semantics": pngio.b64_encode(pngio.semantics_to_png_bytes(idx)),
            "mask": pngio.b64_encode(pngio.mask_to_png_bytes(result.mask)),
        }

    @app.post("/manipulate")
    def manipulate_endpoint(req: ManipulateRequest):
        try:
            x = _image(req.image)
            sem = _semantics(req.semantics)
            mask = _mask(req.mask)
            refined = manipulate(bundle, x, sem, mask)
        except (SemanticsError, *decode_errors) as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"refined": _img_b64(refined)}

    @app.post("/style-swap")
    def style_swap_endpoint(req: StyleSwapRequest):
        try:
            src = _image(req.source_image)
            ref = _image(req.reference_image)
            refined = swap_styles_and_generate(bundle, src, ref, req.regions)
        except decode_errors as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"refined": _img_b64(refined)}

    return app


def serve(checkpoint_path: str, port: int = 8000, host: str = "127.0.0.1",
          detector_path: str | None = None, segmenter_path: str | None = None):
    import uvicorn

    bundle = load_bundle(checkpoint_path, detector_path, segmenter_path)
    app = create_app(bundle)
    uvicorn.run(app, host=host, port=port)
