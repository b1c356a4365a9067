import numpy as np
import pytest

from sgin import data_forge as forge
from sgin.data_forge import (
    DatasetManifest,
    ForgeConfig,
    OccluderOutOfFrameError,
    OccluderSprite,
    build_dataset,
    compose_occlusion,
    load_manifest,
    load_sample,
    make_mask,
    synth_face,
    synth_sprite,
)


# ---------------------------------------------------------------- synth_face

def test_synth_face_deterministic():
    a_img, a_sem = synth_face(7, 64)
    b_img, b_sem = synth_face(7, 64)
    assert np.array_equal(a_img, b_img)
    assert np.array_equal(a_sem, b_sem)


def test_synth_face_seed_changes_pixels():
    a_img, _ = synth_face(7, 64)
    b_img, _ = synth_face(8, 64)
    assert not np.array_equal(a_img, b_img)


def test_synth_face_semantics_one_hot():
    for seed in range(100):
        _, sem = synth_face(seed, 32)
        assert (sem.sum(axis=-1) == 1).all()


def test_synth_face_range_and_shapes():
    img, sem = synth_face(3, 64)
    assert img.shape == (64, 64, 3) and sem.shape == (64, 64, 11)
    assert img.min() >= -1.0 and img.max() <= 1.0


def test_synth_face_rejects_bad_resolution():
    with pytest.raises(ValueError, match="unsupported resolution"):
        synth_face(0, 48)


# ---------------------------------------------------- compose_occlusion

def _checker_sprite(h, w):
    pix = np.zeros((h, w, 3), dtype=np.float32)
    pix[..., 0] = 0.5
    alpha = np.ones((h, w), dtype=np.uint8)
    return OccluderSprite(pixels=pix, alpha=alpha)


def test_compose_empty_alpha_is_rejected():
    face, _ = synth_face(1, 32)
    sprite = OccluderSprite(pixels=np.zeros((4, 4, 3), np.float32), alpha=np.zeros((4, 4), np.uint8))
    with pytest.raises(OccluderOutOfFrameError, match="out of frame"):
        compose_occlusion(face, sprite, (10, 10, 1.0, 0.0))


def test_compose_near_full_frame():
    face, _ = synth_face(1, 32)
    sprite = _checker_sprite(31, 31)
    occ, mask = compose_occlusion(face, sprite, (0, 0, 1.0, 0.0))
    assert mask.sum() == 31 * 31
    assert np.allclose(occ[:31, :31], sprite.pixels)


def test_compose_small_sprite_exact_support():
    face, _ = synth_face(2, 32)
    sprite = _checker_sprite(2, 2)
    occ, mask = compose_occlusion(face, sprite, (0, 0, 1.0, 0.0))
    assert mask.sum() == 4
    assert mask[:2, :2].all()


def test_compose_out_of_frame_error():
    face, _ = synth_face(2, 32)
    sprite = _checker_sprite(3, 3)
    with pytest.raises(OccluderOutOfFrameError):
        compose_occlusion(face, sprite, (40, 40, 1.0, 0.0))


def test_compose_never_leaks_outside_mask():
    face, _ = synth_face(5, 64)
    for seed in range(10):
        sprite = synth_sprite(seed, 20)
        if sprite.alpha.sum() == 0:
            continue
        try:
            occ, mask = compose_occlusion(face, sprite, (10 + seed, 8, 1.1, seed * 33.0))
        except OccluderOutOfFrameError:
            continue
        outside = mask == 0
        assert np.array_equal(occ[outside], face[outside])


def test_compose_rejects_oversized_sprite():
    face, _ = synth_face(1, 32)
    with pytest.raises(ValueError, match="smaller than face"):
        compose_occlusion(face, _checker_sprite(32, 8), (0, 0, 1.0, 0.0))


# ------------------------------------------------------------- make_mask

def test_half_mask_exact_count():
    m = make_mask("half", 100, 3)
    assert m.sum() == 5000
    # exactly the top or bottom half rows
    rows = m.sum(axis=1)
    assert set(rows.tolist()) == {0, 100}


def test_center70_mask_100():
    m = make_mask("center70", 100, 0)
    assert m.sum() == 7056  # side 84
    ys, xs = np.nonzero(m)
    assert ys.max() - ys.min() + 1 == 84 and xs.max() - xs.min() + 1 == 84


@pytest.mark.parametrize("res", [32, 64, 100, 128, 256])
def test_center70_area_fraction(res):
    m = make_mask("center70", res, 0)
    frac = m.sum() / (res * res)
    assert 0.69 <= frac <= 0.72


def test_object_mask_deterministic_and_binary():
    a = make_mask("object", 64, 11)
    b = make_mask("object", 64, 11)
    assert np.array_equal(a, b)
    assert set(np.unique(a)).issubset({0, 1})


def test_hand_mask_binary_nonempty():
    m = make_mask("hand", 64, 5)
    assert set(np.unique(m)) == {0, 1}


def test_make_mask_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown mask kind"):
        make_mask("spiral", 64, 0)


# ---------------------------------------------------------- build_dataset

@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("forge")
    cfg = ForgeConfig(root=str(root), n_samples=10, resolution=32, seed=4, train_fraction=0.9)
    return build_dataset(cfg), str(root)


def test_split_rule(tiny_dataset):
    manifest, _ = tiny_dataset
    assert len(manifest.train) == 9 and len(manifest.val) == 1
    assert set(manifest.train).isdisjoint(manifest.val)


def test_all_ids_resolve_to_files(tiny_dataset):
    _, root = tiny_dataset
    manifest = load_manifest(root)  # raises if any file is missing
    assert len(manifest.ids) == 10
    assert manifest.root == root


def test_rebuild_same_seed_identical(tmp_path):
    cfg_a = ForgeConfig(root=str(tmp_path / "a"), n_samples=3, resolution=32, seed=9)
    cfg_b = ForgeConfig(root=str(tmp_path / "b"), n_samples=3, resolution=32, seed=9)
    build_dataset(cfg_a)
    build_dataset(cfg_b)
    assert forge.dataset_digest(str(tmp_path / "a")) == forge.dataset_digest(str(tmp_path / "b"))


def test_load_sample_round_trip(tiny_dataset):
    manifest, _ = tiny_dataset
    s = load_sample(manifest, manifest.ids[0])
    assert s["x_gt"].shape == (32, 32, 3)
    assert s["x_occ"].shape == (32, 32, 3)
    assert s["m"].shape == (32, 32) and set(np.unique(s["m"])).issubset({0, 1})
    assert s["L"].shape == (32, 32, 11) and (s["L"].sum(axis=-1) == 1).all()
    # occluder pixels must sit exactly where the mask says
    outside = s["m"] == 0
    assert np.allclose(s["x_occ"][outside], s["x_gt"][outside], atol=1 / 127.5)


def test_manifest_json_round_trip(tiny_dataset):
    manifest, _ = tiny_dataset
    back = DatasetManifest.from_json(manifest.to_json())
    assert back.ids == manifest.ids
    assert back.train == manifest.train and back.val == manifest.val
    assert back.resolution == manifest.resolution and back.seed == manifest.seed
