"""Experiment configuration: dataclass plus the flat key-value file format.

Config files are plain text, one `key = value` per line, `#` comments.
Keys match the ExperimentConfig field names exactly (see README for the
full list and defaults).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass
class ExperimentConfig:
    # core geometry
    resolution: int = 64
    n_levels: int = 3
    style_dim: int = 64
    # architecture toggles (ablation axes)
    rap_norm: str = "region"        # region | global
    use_attention: bool = True
    fusion_feedback: bool = True
    self_distill: bool = True
    semantics: str = "oracle"       # predicted | oracle
    mask_source: str = "oracle"     # detector | oracle
    mask_dilate: int = 0
    # loss weights
    lambda_sd: float = 10.0
    lambda_feat: float = 10.0
    lambda_per: float = 10.0
    lambda_adv: float = 1.0
    # optimizer
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.99
    # schedule
    batch_size: int = 8
    total_steps: int = 2000
    seed: int = 0
    # model widths (desk-scale defaults)
    enc_channels: int = 16
    gen_channels: int = 24
    gen_channels_max: int = 96
    disc_channels: int = 16
    feedback_channels: int = 24
    extractor_seed: int = 17
    feature_extractor: str = "random"
    # paths / housekeeping
    data_root: str = "data"
    checkpoint_dir: str = "runs/default"
    detector_checkpoint: str = ""
    segmenter_checkpoint: str = ""
    checkpoint_every: int = 500
    log_every: int = 10

    def __post_init__(self):
        if self.resolution < 32 or (self.resolution & (self.resolution - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 32, got {self.resolution}")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        for name in ("lambda_sd", "lambda_feat", "lambda_per", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.rap_norm not in ("region", "global"):
            raise ValueError(f"rap_norm must be 'region' or 'global', got {self.rap_norm!r}")
        if self.semantics not in ("predicted", "oracle"):
            raise ValueError(f"semantics must be 'predicted' or 'oracle', got {self.semantics!r}")
        if self.mask_source not in ("detector", "oracle"):
            raise ValueError(f"mask_source must be 'detector' or 'oracle', got {self.mask_source!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _parse_value(field_type, raw: str):
    raw = raw.strip()
    if field_type is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if field_type is int:
        return int(raw)
    if field_type is float:
        return float(raw)
    return raw


def load_config(path: str) -> ExperimentConfig:
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    # dataclass field types may be strings under `from __future__ import annotations`
    type_map = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise KeyError(f"{path}:{lineno}: unknown config key {key!r}")
            ftype = types[key]
            if isinstance(ftype, str):
                ftype = type_map[ftype]
            values[key] = _parse_value(ftype, raw)
    return ExperimentConfig(**values)


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        for fld in dataclasses.fields(ExperimentConfig):
            f.write(f"{fld.name} = {getattr(cfg, fld.name)}\n")
