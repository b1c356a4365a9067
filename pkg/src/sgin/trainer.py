"""Training orchestration: main two-pass pipeline, aux nets, checkpoints.

One train step runs mask -> apply_mask -> semantics -> style encoding ->
coarse/refined generation -> one discriminator update, then one generator
update. All randomness is derived from the config seed (model init from
torch.manual_seed, batch order from a per-step generator), so two runs of
the same config produce the same loss trajectory.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ExperimentConfig
from .data_forge import DatasetManifest, load_manifest, load_sample
from .detector import DetectorModel, apply_mask_t, detect, detector_loss
from .feedback import FeedbackNet, build_feedback_net, encode_feedback, residual_map
from .generator import Generator, generate
from .objectives import (LossWeights, MultiScaleDiscriminator, build_extractor,
                         discriminator_loss, feature_matching_loss,
                         generator_adversarial_loss, perceptual_loss,
                         self_distillation_loss, total_generator_loss)
from .pngio import NUM_REGIONS
from .segmenter import SegmenterModel, segment, segmenter_loss
from .style_encoder import StyleEncoder, encode_styles

CHECKPOINT_MAGIC = b"SGIN1"
FORMAT_VERSION = 1
LOSS_CSV_FIELDS = ("step", "l_sd", "l_feat", "l_per", "l_adv", "l_total", "d_loss")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class LossReport:
    step: int
    l_sd: float
    l_feat: float
    l_per: float
    l_adv: float
    l_total: float
    d_loss: float

    def csv_row(self):
        return [self.step, f"{self.l_sd:.6f}", f"{self.l_feat:.6f}", f"{self.l_per:.6f}",
                f"{self.l_adv:.6f}", f"{self.l_total:.6f}", f"{self.d_loss:.6f}"]

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainState:
    config: ExperimentConfig
    encoder: StyleEncoder
    generator: Generator
    feedback_net: FeedbackNet | None
    discriminator: MultiScaleDiscriminator
    extractor: object
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    detector: DetectorModel | None = None
    segmenter: SegmenterModel | None = None

    def generator_forward_count(self):
        """Number of generator forwards per train step under this config."""
        n = 1
        if self.config.fusion_feedback:
            n += 1
        if self.config.self_distill:
            n += 1
        return n


def build_models(config: ExperimentConfig):
    """Construct all modules in a fixed order (deterministic under the seed)."""
    torch.manual_seed(config.seed)
    encoder = StyleEncoder(config.resolution, config.n_levels, config.style_dim,
                           config.enc_channels, use_attention=config.use_attention)
    generator = Generator(config.resolution, config.n_levels, config.style_dim,
                          config.gen_channels, config.gen_channels_max)
    feedback_net = (build_feedback_net(generator, config.feedback_channels)
                    if config.fusion_feedback else None)
    discriminator = MultiScaleDiscriminator(3, config.disc_channels,
                                            resolution=config.resolution)
    extractor = build_extractor(config.feature_extractor, config.extractor_seed)
    return encoder, generator, feedback_net, discriminator, extractor


def init_state(config: ExperimentConfig) -> TrainState:
    encoder, generator, feedback_net, discriminator, extractor = build_models(config)
    g_params = list(encoder.parameters()) + list(generator.parameters())
    if feedback_net is not None:
        g_params += list(feedback_net.parameters())
    opt_g = torch.optim.Adam(g_params, lr=config.lr_g, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr_d,
                             betas=(config.beta1, config.beta2))
    state = TrainState(config=config, encoder=encoder, generator=generator,
                       feedback_net=feedback_net, discriminator=discriminator,
                       extractor=extractor, opt_g=opt_g, opt_d=opt_d)
    if config.mask_source == "detector":
        if not config.detector_checkpoint:
            raise ValueError("mask_source 'detector' requires detector_checkpoint")
        state.detector = load_detector(config.detector_checkpoint)
    if config.semantics == "predicted":
        if not config.segmenter_checkpoint:
            raise ValueError("semantics 'predicted' requires segmenter_checkpoint")
        state.segmenter = load_segmenter(config.segmenter_checkpoint)
    return state


@dataclass
class TrainData:
    x_gt: torch.Tensor    # N*3*H*W float32
    x_occ: torch.Tensor   # N*3*H*W float32
    m: torch.Tensor       # N*H*W float32
    labels: torch.Tensor  # N*H*W int64 region indices

    def __len__(self):
        return self.x_gt.shape[0]


def _to_chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def load_training_data(manifest: DatasetManifest, split: str = "train") -> TrainData:
    ids = manifest.train if split == "train" else manifest.val
    xs, xo, ms, ls = [], [], [], []
    for sid in ids:
        s = load_sample(manifest, sid)
        xs.append(_to_chw(s["x_gt"]))
        xo.append(_to_chw(s["x_occ"]))
        ms.append(torch.from_numpy(s["m"].astype(np.float32)))
        ls.append(torch.from_numpy(s["L"].argmax(axis=-1).astype(np.int64)))
    return TrainData(torch.stack(xs), torch.stack(xo), torch.stack(ms), torch.stack(ls))


def sample_batch(data: TrainData, batch_size: int, seed: int, step: int):
    g = torch.Generator().manual_seed(seed * 1_000_003 + step)
    idx = torch.randint(len(data), (batch_size,), generator=g)
    L = F.one_hot(data.labels[idx], NUM_REGIONS).permute(0, 3, 1, 2).float()
    return data.x_gt[idx], data.x_occ[idx], data.m[idx], L


def _dilate(m: torch.Tensor, radius: int) -> torch.Tensor:
    if radius <= 0:
        return m
    k = 2 * radius + 1
    return F.max_pool2d(m.unsqueeze(1), k, stride=1, padding=radius).squeeze(1)


def _check_finite(name: str, value: torch.Tensor):
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteLossError(f"non-finite loss component: {name}")


def train_step(state: TrainState, batch) -> tuple[TrainState, LossReport]:
    cfg = state.config
    x_gt, x_occ, m_gt, L_gt = batch
    w = LossWeights(cfg.lambda_sd, cfg.lambda_feat, cfg.lambda_per, cfg.lambda_adv)

    # -- mask and conditioning (aux nets frozen) --
    if cfg.mask_source == "oracle":
        m = m_gt.float()
    else:
        with torch.no_grad():
            m = detect(state.detector, x_occ).float()
        m = _dilate(m, cfg.mask_dilate)
    x_masked = apply_mask_t(x_occ, m)
    if cfg.semantics == "oracle":
        L = L_gt.float()
    else:
        with torch.no_grad():
            L = segment(state.segmenter, x_masked)[0].float()

    # -- teacher pass: unmasked ground truth through the same pipeline --
    trace_t = None
    if cfg.self_distill and cfg.lambda_sd > 0:
        with torch.no_grad():
            zeros = torch.zeros_like(m)
            S_t = encode_styles(state.encoder, x_gt, L, zeros, cfg.rap_norm)
            _, trace_t = generate(state.generator, S_t, L)

    # -- student passes --
    S = encode_styles(state.encoder, x_masked, L, m, cfg.rap_norm)
    x_coarse, trace_c = generate(state.generator, S, L)
    if cfg.fusion_feedback:
        d = residual_map(x_coarse, x_masked, m)
        fb = encode_feedback(state.feedback_net, x_coarse, d)
        x_refined, _ = generate(state.generator, S, L, feedback=fb)
    else:
        x_refined = x_coarse

    # -- discriminator update --
    logits_real, _ = state.discriminator(x_gt)
    logits_fake, _ = state.discriminator(x_refined.detach())
    d_loss = discriminator_loss(logits_real, logits_fake)
    _check_finite("d_loss", d_loss)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_d.step()

    # -- generator update (fresh discriminator forwards) --
    zero = torch.zeros(())
    l_adv = l_feat = zero
    if cfg.lambda_adv > 0 or cfg.lambda_feat > 0:
        logits_g, feats_fake = state.discriminator(x_refined)
        if cfg.lambda_adv > 0:
            l_adv = generator_adversarial_loss(logits_g)
        if cfg.lambda_feat > 0:
            with torch.no_grad():
                _, feats_real = state.discriminator(x_gt)
            l_feat = feature_matching_loss(feats_real, feats_fake)
    l_per = perceptual_loss(state.extractor, x_refined, x_gt) if cfg.lambda_per > 0 else zero
    l_sd = self_distillation_loss(trace_t, trace_c) if trace_t is not None else zero
    parts = {"sd": l_sd, "feat": l_feat, "per": l_per, "adv": l_adv}
    for name, value in parts.items():
        _check_finite(f"l_{name}", value)
    total = total_generator_loss(parts, w)
    _check_finite("l_total", total)
    if total.requires_grad:
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()

    state.step += 1
    report = LossReport(step=state.step, l_sd=float(l_sd.detach()), l_feat=float(l_feat.detach()),
                        l_per=float(l_per.detach()), l_adv=float(l_adv.detach()),
                        l_total=float(total.detach()), d_loss=float(d_loss.detach()))
    return state, report


# ---------------------------------------------------------------------------
# checkpoint format: 5-byte magic "SGIN1" + a torch archive of plain dicts
# ---------------------------------------------------------------------------

def _write_payload(payload: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_payload(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(len(CHECKPOINT_MAGIC))
        if head != CHECKPOINT_MAGIC:
            raise ValueError(f"checkpoint version mismatch: expected header {CHECKPOINT_MAGIC!r}")
        return torch.load(io.BytesIO(f.read()), map_location="cpu", weights_only=True)


def save_checkpoint(state: TrainState, path) -> Path:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "sgin",
        "config": state.config.to_dict(),
        "step": state.step,
        "modules": {
            "encoder": state.encoder.state_dict(),
            "generator": state.generator.state_dict(),
            "discriminator": state.discriminator.state_dict(),
        },
        "optimizers": {"g": state.opt_g.state_dict(), "d": state.opt_d.state_dict()},
    }
    if state.feedback_net is not None:
        payload["modules"]["feedback_net"] = state.feedback_net.state_dict()
    return _write_payload(payload, path)


def load_checkpoint(path, config: ExperimentConfig | None = None) -> TrainState:
    payload = load_payload(path)
    if payload.get("kind") != "sgin":
        raise ValueError(f"not a training checkpoint: kind={payload.get('kind')!r}")
    cfg = config if config is not None else ExperimentConfig.from_dict(payload["config"])
    state = init_state(cfg)
    state.encoder.load_state_dict(payload["modules"]["encoder"])
    state.generator.load_state_dict(payload["modules"]["generator"])
    state.discriminator.load_state_dict(payload["modules"]["discriminator"])
    if state.feedback_net is not None:
        state.feedback_net.load_state_dict(payload["modules"]["feedback_net"])
    state.opt_g.load_state_dict(payload["optimizers"]["g"])
    state.opt_d.load_state_dict(payload["optimizers"]["d"])
    state.step = int(payload["step"])
    return state


def _save_aux(kind: str, model, config: ExperimentConfig, step: int, path) -> Path:
    payload = {"format_version": FORMAT_VERSION, "kind": kind, "config": config.to_dict(),
               "step": step, "model": model.state_dict()}
    return _write_payload(payload, path)


def load_detector(path) -> DetectorModel:
    payload = load_payload(path)
    if payload.get("kind") != "detector":
        raise ValueError(f"not a detector checkpoint: kind={payload.get('kind')!r}")
    cfg = ExperimentConfig.from_dict(payload["config"])
    model = DetectorModel(cfg.resolution)
    model.load_state_dict(payload["model"])
    model.eval()
    return model


def load_segmenter(path) -> SegmenterModel:
    payload = load_payload(path)
    if payload.get("kind") != "segmenter":
        raise ValueError(f"not a segmenter checkpoint: kind={payload.get('kind')!r}")
    cfg = ExperimentConfig.from_dict(payload["config"])
    model = SegmenterModel(cfg.resolution)
    model.load_state_dict(payload["model"])
    model.eval()
    return model


@dataclass
class ModelBundle:
    """Inference-side view of a checkpoint (all modules frozen, eval mode)."""

    config: ExperimentConfig
    encoder: StyleEncoder
    generator: Generator
    feedback_net: FeedbackNet | None
    extractor: object
    detector: DetectorModel | None = None
    segmenter: SegmenterModel | None = None
    digest: str = ""


def load_bundle(path, detector_path: str | None = None,
                segmenter_path: str | None = None) -> ModelBundle:
    payload = load_payload(path)
    if payload.get("kind") != "sgin":
        raise ValueError(f"not a training checkpoint: kind={payload.get('kind')!r}")
    cfg = ExperimentConfig.from_dict(payload["config"])
    encoder, generator, feedback_net, _disc, extractor = build_models(cfg)
    encoder.load_state_dict(payload["modules"]["encoder"])
    generator.load_state_dict(payload["modules"]["generator"])
    if feedback_net is not None:
        feedback_net.load_state_dict(payload["modules"]["feedback_net"])
    for mod in (encoder, generator, feedback_net):
        if mod is not None:
            mod.eval()
            for p in mod.parameters():
                p.requires_grad_(False)
    det_path = detector_path or cfg.detector_checkpoint
    seg_path = segmenter_path or cfg.segmenter_checkpoint
    detector = load_detector(det_path) if det_path and os.path.exists(det_path) else None
    segmenter = load_segmenter(seg_path) if seg_path and os.path.exists(seg_path) else None
    with open(path, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    return ModelBundle(config=cfg, encoder=encoder, generator=generator,
                       feedback_net=feedback_net, extractor=extractor,
                       detector=detector, segmenter=segmenter, digest=digest)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _loss_csv(path, resume: bool):
    exists = os.path.exists(path)
    f = open(path, "a" if resume and exists else "w", newline="")
    writer = csv.writer(f)
    if not (resume and exists):
        writer.writerow(LOSS_CSV_FIELDS)
    return f, writer


def fit(config: ExperimentConfig, resume_from: str | None = None,
        manifest: DatasetManifest | None = None) -> Path:
    """Train to total_steps; returns the final checkpoint path."""
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = ckpt_dir / "checkpoint.sgin"
    if resume_from is not None:
        state = load_checkpoint(resume_from, config)
    else:
        state = init_state(config)
    if manifest is None:
        manifest = load_manifest(config.data_root)
    if manifest.resolution != config.resolution:
        raise ValueError(
            f"dataset resolution {manifest.resolution} != config resolution {config.resolution}"
        )
    data = load_training_data(manifest, "train")
    log_file, log = _loss_csv(ckpt_dir / "losses.csv", resume=resume_from is not None)
    try:
        # a non-finite loss raises out of train_step before any save,
        # so the last good checkpoint survives the abort
        while state.step < config.total_steps:
            batch = sample_batch(data, config.batch_size, config.seed, state.step)
            state, report = train_step(state, batch)
            log.writerow(report.csv_row())
            if report.step % config.log_every == 0:
                log_file.flush()
            if report.step % config.checkpoint_every == 0 and report.step < config.total_steps:
                save_checkpoint(state, ckpt_path)
        save_checkpoint(state, ckpt_path)
    finally:
        log_file.close()
    return ckpt_path


def _aux_loop(config: ExperimentConfig, model, loss_fn, csv_name: str, kind: str,
              manifest: DatasetManifest | None, steps: int | None) -> Path:
    torch.manual_seed(config.seed + (1 if kind == "detector" else 2))
    if manifest is None:
        manifest = load_manifest(config.data_root)
    data = load_training_data(manifest, "train")
    opt = torch.optim.Adam(model.parameters(), lr=2e-4, betas=(0.5, 0.99))
    total = steps if steps is not None else config.total_steps
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    with open(ckpt_dir / csv_name, "w", newline="") as f:
        log = csv.writer(f)
        log.writerow(["step", "loss"])
        for step in range(total):
            batch = sample_batch(data, config.batch_size, config.seed + 7, step)
            loss = loss_fn(batch)
            if not bool(torch.isfinite(loss)):
                raise NonFiniteLossError(f"non-finite loss component: {kind}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.writerow([step + 1, f"{float(loss):.6f}"])
    model.eval()
    path = ckpt_dir / f"{kind}.sgin"
    return _save_aux(kind, model, config, total, path)


def fit_detector(config: ExperimentConfig, manifest: DatasetManifest | None = None,
                 steps: int | None = None) -> Path:
    model = DetectorModel(config.resolution)

    def loss_fn(batch):
        x_gt, x_occ, m_gt, L = batch
        prob = model(x_occ)
        return detector_loss(prob, m_gt)

    return _aux_loop(config, model, loss_fn, "detector_losses.csv", "detector",
                     manifest, steps)


def fit_segmenter(config: ExperimentConfig, manifest: DatasetManifest | None = None,
                  steps: int | None = None) -> Path:
    model = SegmenterModel(config.resolution)

    def loss_fn(batch):
        x_gt, x_occ, m_gt, L = batch
        x_masked = apply_mask_t(x_occ, m_gt)
        logits = model(x_masked)
        return segmenter_loss(logits, L)

    return _aux_loop(config, model, loss_fn, "segmenter_losses.csv", "segmenter",
                     manifest, steps)


# ---------------------------------------------------------------------------
# ablation plumbing
# ---------------------------------------------------------------------------

def _param_count(module) -> int:
    return sum(p.numel() for p in module.parameters())


def apply_ablation(config: ExperimentConfig) -> dict:
    """Structural descriptor of the model graph a config produces."""
    encoder, generator, feedback_net, discriminator, _ = build_models(config)
    modules = [
        {"name": "style_encoder", "parameters": _param_count(encoder)},
        {"name": "generator", "parameters": _param_count(generator)},
        {"name": "discriminator", "parameters": _param_count(discriminator)},
    ]
    if feedback_net is not None:
        modules.insert(2, {"name": "feedback_net", "parameters": _param_count(feedback_net)})
    return {
        "flags": {
            "fusion_feedback": config.fusion_feedback,
            "use_attention": config.use_attention,
            "self_distill": config.self_distill,
            "semantics": config.semantics,
            "mask_source": config.mask_source,
            "rap_norm": config.rap_norm,
        },
        "modules": modules,
        "total_parameters": sum(m["parameters"] for m in modules),
    }


def descriptor_json(descriptor: dict) -> str:
    return json.dumps(descriptor, sort_keys=True, indent=2)


def run_ablation(config_paths, out_csv) -> list[dict]:
    """Train + evaluate each config; emit variant-by-metric rows with deltas from FULL."""
    from .config import load_config
    from .metrics import ALL_METRICS, evaluate

    variants = {}
    for p in config_paths:
        name = Path(p).stem
        cfg = load_config(p)
        ckpt = fit(cfg)
        bundle = load_bundle(ckpt)
        manifest = load_manifest(cfg.data_root)
        variants[name] = evaluate(bundle, manifest, cfg)
    if "full" not in variants:
        raise ValueError("ablation set must include a config named full")
    base = variants["full"].values
    rows = []
    for name in sorted(variants):
        for metric in ALL_METRICS:
            whole, masked = variants[name].values[metric]
            rows.append({
                "variant": name, "metric": metric,
                "whole": whole, "masked_only": masked,
                "whole_delta": whole - base[metric][0],
                "masked_delta": masked - base[metric][1],
            })
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["variant", "metric", "whole", "masked_only",
                                          "whole_delta", "masked_delta"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows
