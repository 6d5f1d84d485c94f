import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtmpar.data.augment import augment, crop, mirror
from dtmpar.data.dataset import Dataset, Sample
from dtmpar.data.io import load_annotations, load_dataset, load_keypoints, read_image, save_dataset, write_ppm
from dtmpar.data.synthetic import SynthConfig, blob_colour, gen_synthetic, render_sample
from dtmpar.errors import DimensionError, FormatError, SchemaMismatchError
from dtmpar.schema import FLIP_PERMUTATION, JOINT_INDEX, default_schema
from dtmpar.supervision import KeypointSet, positive_ratios

SMALL = dict(n_train=40, n_val=10, n_test=10)


@pytest.fixture(scope="module")
def small_splits():
    return gen_synthetic(SynthConfig(seed=3, **SMALL))


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- generator ------------------------------------------------------------------------


def test_same_seed_gives_byte_identical_files(tmp_path):
    for name in ("a", "b"):
        save_dataset(tmp_path / name, gen_synthetic(SynthConfig(seed=11, **SMALL)))
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    save_dataset(tmp_path / "c", gen_synthetic(SynthConfig(seed=12, **SMALL)))
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_splits_are_disjoint(small_splits):
    ids = [set(ds.ids) for ds in small_splits.values()]
    assert sum(map(len, ids)) == len(set.union(*ids)) == 60


def test_positive_rate_within_tolerance():
    ds = gen_synthetic(SynthConfig(n_train=2000, n_val=1, n_test=1, seed=9))["train"]
    rates = np.asarray(SynthConfig().positive_rates)
    cols = np.flatnonzero(rates == 0.3)
    assert len(cols) > 0
    assert np.all(np.abs(ds.labels[:, cols].mean(axis=0) - 0.3) <= 0.03)


def test_indivisible_dims_rejected():
    with pytest.raises(DimensionError):
        SynthConfig(height=100)


def _colour_near(img, centre, colour, radius):
    """True when some pixel within ``radius`` of ``centre`` carries the fill colour (up to noise and tint)."""
    x, y = int(centre[0]), int(centre[1])
    patch = img[:, max(0, y - radius) : y + radius + 1, max(0, x - radius) : x + radius + 1].astype(float)
    diff = np.abs(patch - np.asarray(colour)[:, None, None] * 255).max(axis=0)
    return bool((diff < 60).any())


def test_blob_self_check():
    cfg = SynthConfig(**SMALL)
    schema = cfg.schema
    rng = np.random.default_rng(0)
    for _ in range(200):
        labels = (rng.uniform(size=schema.J) < 0.6).astype(np.uint8)
        img, xy, vis, centres = render_sample(cfg, schema, labels, rng)
        for j in schema.local_indices:
            if not labels[j]:
                assert j not in centres
                continue
            k = centres[j]
            assert k in schema.attributes[j].keypoint_ids and vis[k]
            assert _colour_near(img, xy[k], blob_colour(schema, j), cfg.blob_radius)


def test_config_dict_round_trip():
    cfg = SynthConfig(seed=4, distractor_prob=0.2)
    assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- files -------------------------------------------------------------------------------


def test_round_trip(tmp_path, small_splits):
    save_dataset(tmp_path, small_splits)
    loaded = load_dataset(tmp_path)
    assert set(loaded) == {"train", "val", "test"}
    for name, ds in small_splits.items():
        assert loaded[name].equals(ds)
        assert loaded[name].warnings == []


def test_loaded_ratios_match_generator(tmp_path, small_splits):
    save_dataset(tmp_path, small_splits)
    loaded = load_dataset(tmp_path)["train"]
    np.testing.assert_array_equal(positive_ratios(loaded.labels), positive_ratios(small_splits["train"].labels))


def test_empty_annotation_file(tmp_path):
    path = tmp_path / "annotations.csv"
    path.write_text("")
    names, ids, labels = load_annotations(path)
    assert ids == [] and labels.shape[0] == 0


def test_empty_dataset_loads(tmp_path, small_splits):
    empty = {"train": Dataset.empty(default_schema(), 128, 96)}
    save_dataset(tmp_path, empty)
    ds = load_dataset(tmp_path)["train"]
    assert len(ds) == 0 and ds.labels.shape == (0, 12)


def test_column_count_mismatch(tmp_path):
    path = tmp_path / "annotations.csv"
    path.write_text("a,b,c\nx1,0,1\n")
    with pytest.raises(SchemaMismatchError):
        load_annotations(path)
    path.write_text("a,b\nx1,0,1\n")
    with pytest.raises(SchemaMismatchError):
        load_annotations(path, expected_names=["a", "c"])


def test_malformed_rows_report_line(tmp_path):
    path = tmp_path / "annotations.csv"
    path.write_text("id,a,b\nx1,0,1\nx2,0,q\n")
    with pytest.raises(FormatError, match=":3:"):
        load_annotations(path)
    kp = tmp_path / "keypoints.csv"
    kp.write_text("x1," + ",".join(["1"] * 51) + "\nx2,1,2\n")
    with pytest.raises(FormatError, match=":2:"):
        load_keypoints(kp)


def test_missing_keypoints_and_ids(tmp_path, small_splits):
    save_dataset(tmp_path, small_splits)
    kp_lines = (tmp_path / "keypoints.csv").read_text().splitlines()
    (tmp_path / "keypoints.csv").write_text("\n".join(kp_lines[2:]) + "\n")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["splits"]["train"].append("ghost")
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))

    train = load_dataset(tmp_path)["train"]
    assert len(train) == 40
    assert not train.keypoints_visible[0].any() and not train.keypoints_visible[1].any()
    assert any("ghost" in w for w in train.warnings)
    assert any("2 samples without keypoints" in w for w in train.warnings)


def test_foreign_image_is_resized(tmp_path):
    from PIL import Image

    img = np.random.default_rng(0).integers(0, 256, size=(64, 48, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "big.png")
    assert read_image(tmp_path / "big.png").shape == (3, 64, 48)
    write_ppm(tmp_path / "a.ppm", img.transpose(2, 0, 1))
    np.testing.assert_array_equal(read_image(tmp_path / "a.ppm"), img.transpose(2, 0, 1))


# -- augmentation -----------------------------------------------------------------------


def _sample(seed=0, h=128, w=96):
    rng = np.random.default_rng(seed)
    kp = KeypointSet(rng.uniform([0, 0], [w - 1, h - 1], size=(17, 2)).round(), rng.uniform(size=17) < 0.8)
    img = rng.integers(0, 256, size=(3, h, w), dtype=np.uint8)
    return Sample("x", img, rng.integers(0, 2, size=12).astype(np.uint8), kp)


def test_double_mirror_is_identity():
    s = _sample()
    img, kp = mirror(*mirror(s.image, s.keypoints))
    np.testing.assert_array_equal(img, s.image)
    np.testing.assert_array_equal(kp.xy, s.keypoints.xy)
    np.testing.assert_array_equal(kp.visible, s.keypoints.visible)


def test_mirror_left_wrist():
    xy = np.zeros((17, 2))
    vis = np.zeros(17, dtype=bool)
    xy[JOINT_INDEX["left_wrist"]] = (10, 50)
    vis[JOINT_INDEX["left_wrist"]] = True
    _, kp = mirror(np.zeros((3, 128, 96)), KeypointSet(xy, vis))
    rw = JOINT_INDEX["right_wrist"]
    assert kp.visible[rw] and not kp.visible[JOINT_INDEX["left_wrist"]]
    assert tuple(kp.xy[rw]) == (85, 50)


def test_zero_pad_crop_is_identity():
    s = _sample(1)
    img, kp = crop(s.image, s.keypoints, 0, 0, 0)
    np.testing.assert_array_equal(img, s.image)
    assert kp == s.keypoints


def test_crop_shifts_and_hides_joints():
    xy = np.zeros((17, 2))
    xy[0] = (2, 3)
    xy[1] = (50, 60)
    vis = np.zeros(17, dtype=bool)
    vis[:2] = True
    img = np.arange(3 * 8 * 6, dtype=np.uint8).reshape(3, 8, 6)
    out, kp = crop(img, KeypointSet(xy, vis), 4, 8, 8)
    assert tuple(kp.xy[0]) == (-2, -1) and not kp.visible[0]
    # replicate border: bottom-right corner value fills the padded region
    assert out[0, -1, -1] == img[0, -1, -1]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_augment_keeps_labels_and_shape(seed):
    s = _sample(seed)
    out = augment(s, np.random.default_rng(seed))
    np.testing.assert_array_equal(out.labels, s.labels)
    assert out.image.shape == s.image.shape
    xy, vis = out.keypoints.xy, out.keypoints.visible
    assert np.all((xy[vis] >= 0) & (xy[vis] < [96, 128]))


def test_mirrored_keypoints_track_blobs():
    cfg = SynthConfig(**SMALL)
    schema = cfg.schema
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(20):
        labels = (rng.uniform(size=schema.J) < 0.5).astype(np.uint8)
        img, xy, vis, centres = render_sample(cfg, schema, labels, rng)
        s = Sample("x", img, labels, KeypointSet(xy, vis))
        out = augment(s, rng, mirror_prob=1.0)
        for j, k in centres.items():
            # the mirror swaps left/right, so joint k now lives at its flip partner
            k_new = FLIP_PERMUTATION[k]
            if not out.keypoints.visible[k_new]:
                continue
            assert _colour_near(out.image, out.keypoints.xy[k_new], blob_colour(schema, j), cfg.blob_radius)
            checked += 1
    assert checked > 20
