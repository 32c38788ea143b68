import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from rorkit.data import (
    ChannelStats,
    Dataset,
    ManifestError,
    assign_folds,
    augment_image,
    holdout_folds,
    latent_class_accuracy,
    latent_threshold_accuracy,
    load_manifest,
    parse_overlap,
    preprocess,
    sample_crop,
    synth_dataset,
    write_manifest,
)


@pytest.fixture(scope="module")
def synth():
    return synth_dataset(4, 20, 16, seed=0)


def write_csv(tmp_path, text):
    p = tmp_path / "m.csv"
    p.write_text(text)
    return p


# -- manifests ------------------------------------------------------------------

def test_manifest_roundtrip(tmp_path, synth):
    path = write_manifest(synth, tmp_path / "d")
    back = load_manifest(path)
    assert len(back) == len(synth)
    np.testing.assert_array_equal(back.age, synth.age)
    np.testing.assert_array_equal(back.gender, synth.gender)
    assert back.subjects == synth.subjects
    # 8-bit quantization is the only loss
    assert np.max(np.abs(back.images - synth.images.clip(0, 1))) <= 0.5 / 255 + 1e-6


def test_manifest_optional_labels(tmp_path):
    Image.new("RGB", (4, 4), (10, 20, 30)).save(tmp_path / "a.png")
    p = write_csv(tmp_path, "image_path,age_group,gender,subject_id\na.png,3,,s1\na.png,,2,s2\n")
    d = load_manifest(p)
    assert list(d.age) == [3, 0] and list(d.gender) == [0, 2]
    assert len(d.with_label("age")) == 1
    assert d[0].gender is None and d[1].age_group is None
    np.testing.assert_allclose(d.images[0, :, 0, 0], np.array([10, 20, 30]) / 255, rtol=1e-6)


@pytest.mark.parametrize("body,line", [
    ("path,age,gender,subject\n", 1),
    ("image_path,age_group,gender,subject_id\na.png,1,1\n", 2),
    ("image_path,age_group,gender,subject_id\na.png,1,1,s\na.png,x,1,s\n", 3),
    ("image_path,age_group,gender,subject_id\na.png,0,1,s\n", 2),
    ("image_path,age_group,gender,subject_id\na.png,,,s\n", 2),
    ("image_path,age_group,gender,subject_id\na.png,1,1,\n", 2),
])
def test_manifest_errors_name_line(tmp_path, body, line):
    Image.new("RGB", (4, 4)).save(tmp_path / "a.png")
    with pytest.raises(ManifestError, match=f"line {line}"):
        load_manifest(write_csv(tmp_path, body))


def test_unreadable_image_skipped(tmp_path, caplog):
    Image.new("RGB", (4, 4)).save(tmp_path / "a.png")
    (tmp_path / "bad.png").write_bytes(b"not a png")
    p = write_csv(tmp_path, "image_path,age_group,gender,subject_id\na.png,1,1,s1\nbad.png,2,1,s2\n"
                            "missing.png,2,1,s3\n")
    with caplog.at_level(logging.WARNING):
        d = load_manifest(p)
    assert len(d) == 1
    assert "bad.png" in caplog.text and "missing.png" in caplog.text


def test_dataset_rejects_unlabelled_and_nonfinite():
    img = np.zeros((1, 3, 2, 2), np.float32)
    with pytest.raises(ValueError):
        Dataset(img, [0], [0], ["s"])
    with pytest.raises(ValueError):
        Dataset(img * np.nan, [1], [0], ["s"])


# -- preprocessing and augmentation ---------------------------------------------

def test_preprocess_standardizes(synth):
    stats = ChannelStats.of(synth.images)
    x = preprocess(synth.images, stats)
    np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_array_equal(preprocess(synth.images[0], stats), x[0])
    assert ChannelStats.from_dict(stats.to_dict()) == stats


def test_crop_monte_carlo_in_bounds_and_ratio():
    rng = np.random.default_rng(0)
    areas = []
    for _ in range(5000):
        top, left, h, w = sample_crop(rng, 64, 48)
        assert 0 <= top and top + h <= 64 and 0 <= left and left + w <= 48
        assert 3 / 4 <= w / h <= 4 / 3 or w == h
        areas.append(h * w / (64 * 48))
    areas = np.array(areas)
    assert areas.min() >= 0.07 and areas.max() <= 1.0
    # most proposals land on the first try, so areas spread over the range
    assert np.mean(areas < 0.5) > 0.3


def test_augment_shape_and_determinism(synth):
    img = synth.images[0]
    a = augment_image(img, np.random.default_rng(1), (8, 8))
    b = augment_image(img, np.random.default_rng(1), (8, 8))
    assert a.shape == (3, 8, 8)
    np.testing.assert_array_equal(a, b)
    assert augment_image(img, np.random.default_rng(1), (16, 16), "none") is img
    with pytest.raises(ValueError):
        augment_image(img, np.random.default_rng(1), (32, 32))
    with pytest.raises(ValueError):
        augment_image(img, np.random.default_rng(1), (8, 8), "mixup")


# -- folds ----------------------------------------------------------------------

@given(st.integers(0, 10_000))
def test_folds_never_split_subjects(seed):
    subjects = [f"s{i // 3}" for i in range(60)]
    folds = assign_folds(subjects, 5, seed)
    per_fold = [folds.subjects_in(f) for f in range(5)]
    assert set().union(*per_fold) == set(subjects)
    assert sum(len(p) for p in per_fold) == 20
    assert all(len(p) == 4 for p in per_fold)
    d = Dataset(np.zeros((60, 1, 1, 1), np.float32), np.ones(60), np.zeros(60), subjects)
    for f in range(5):
        tr, va = folds.split(d, f)
        assert not {subjects[i] for i in tr} & {subjects[i] for i in va}
        assert len(tr) + len(va) == 60


def test_folds_need_enough_subjects():
    with pytest.raises(ValueError):
        assign_folds(["a", "b"], 5)


def test_holdout_folds(synth):
    val = synth_dataset(4, 5, 16, seed=9, subject_prefix="v")
    both, folds = holdout_folds(synth, val)
    tr, va = folds.split(both, 1)
    assert len(tr) == len(synth) and len(va) == len(val)
    assert {both.subjects[i] for i in va} == set(val.subjects)
    with pytest.raises(ValueError, match="both sets"):
        holdout_folds(synth, synth)


# -- synthetic data -------------------------------------------------------------

def test_synth_counts_and_subjects(synth):
    assert synth.image_shape == (3, 16, 16)
    assert np.bincount(synth.age)[1:].tolist() == [20] * 4
    by_subject = {}
    for s, a in zip(synth.subjects, synth.age):
        by_subject.setdefault(s, set()).add(int(a))
    assert all(len(v) == 1 for v in by_subject.values())
    assert latent_class_accuracy(synth) == 1.0
    assert set(np.unique(synth.gender)) <= {1, 2}


def test_synth_deterministic():
    a, b = synth_dataset(3, 10, 8, seed=4), synth_dataset(3, 10, 8, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.subjects == b.subjects


def test_synth_overlap_only_affects_its_threshold():
    d = synth_dataset(6, 200, 8, overlap={3: 0.5}, seed=0)
    # classes 3 and 4 each cover 1.4 units instead of 0.9
    assert np.bincount(d.age)[3] == round(200 * 1.4 / 0.9)
    # each class puts 0.45 units, i.e. 100 samples, on the wrong side of 3
    assert latent_threshold_accuracy(d, 3) == pytest.approx(1 - 200 / len(d), abs=2 / len(d))
    for k in (1, 2, 4, 5):
        assert latent_threshold_accuracy(d, k) == 1.0


def test_parse_overlap():
    assert parse_overlap("4:0.5, 5:0.55") == {4: 0.5, 5: 0.55}
    assert parse_overlap("3") == {3: 0.8}
    assert parse_overlap("") == {}
    with pytest.raises(ValueError):
        synth_dataset(4, 10, 8, overlap={4: 0.5})
