import pytest

from sgin.config import ExperimentConfig, load_config, save_config


def test_defaults_construct():
    cfg = ExperimentConfig()
    assert cfg.resolution == 64
    assert cfg.semantics == "oracle"


def test_save_load_round_trip(tmp_path):
    cfg = ExperimentConfig(resolution=128, lambda_sd=2.5, use_attention=False,
                           data_root="/tmp/x", seed=42)
    p = tmp_path / "exp.cfg"
    save_config(cfg, str(p))
    assert load_config(str(p)) == cfg


def test_load_partial_file_uses_defaults(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("resolution = 128\nbatch_size = 2  # small batch\n\n")
    cfg = load_config(str(p))
    assert cfg.resolution == 128 and cfg.batch_size == 2
    assert cfg.total_steps == ExperimentConfig().total_steps


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("resolutoin = 64\n")
    with pytest.raises(KeyError, match="resolutoin"):
        load_config(str(p))


def test_malformed_line_rejected(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("resolution 64\n")
    with pytest.raises(ValueError, match="key = value"):
        load_config(str(p))


@pytest.mark.parametrize("kwargs", [
    {"resolution": 48},
    {"resolution": 16},
    {"total_steps": 0},
    {"lambda_adv": -1.0},
    {"rap_norm": "mean"},
    {"semantics": "auto"},
    {"mask_source": "predicted"},
    {"n_levels": 0},
])
def test_invalid_values_rejected(kwargs):
    with pytest.raises((ValueError, KeyError)):
        ExperimentConfig(**kwargs)


def test_from_dict_rejects_unknown():
    d = ExperimentConfig().to_dict()
    d["typo_key"] = 1
    with pytest.raises(KeyError, match="typo_key"):
        ExperimentConfig.from_dict(d)


def test_bool_parsing(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("use_attention = off\nfusion_feedback = yes\n")
    cfg = load_config(str(p))
    assert cfg.use_attention is False and cfg.fusion_feedback is True
