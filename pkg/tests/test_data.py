import numpy as np
import pytest
import torch
from PIL import Image

from cdo import (
    DatasetSpec,
    Sample,
    denormalize,
    generate_toy_dataset,
    load_mvtec_category,
    preprocess,
    resize_mask,
    split_samples,
)

from oracles import bilinear_resize_reference


def _write_png(path, arr):
    Image.fromarray(arr).save(path)


def _rgb(rng, h=40, w=40):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


@pytest.fixture()
def mvtec_tree(tmp_path, rng):
    """A miniature MVTec-layout category with one defect type."""
    cat = tmp_path / "widget"
    (cat / "train" / "good").mkdir(parents=True)
    (cat / "test" / "good").mkdir(parents=True)
    (cat / "test" / "scratch").mkdir(parents=True)
    (cat / "test" / "empty_defect").mkdir(parents=True)
    (cat / "ground_truth" / "scratch").mkdir(parents=True)
    for i in range(3):
        _write_png(cat / "train" / "good" / f"{i:03d}.png", _rgb(rng))
    for i in range(2):
        _write_png(cat / "test" / "good" / f"{i:03d}.png", _rgb(rng))
    for i in range(2):
        _write_png(cat / "test" / "scratch" / f"{i:03d}.png", _rgb(rng))
        mask = np.zeros((40, 40), dtype=np.uint8)
        mask[5 + i : 12, 8:20] = 173  # nonzero, not 1: loader must binarize
        _write_png(cat / "ground_truth" / "scratch" / f"{i:03d}_mask.png", mask)
    return tmp_path


def test_load_train_split(mvtec_tree):
    spec = DatasetSpec(root=mvtec_tree, category="widget", resolution=32)
    samples = load_mvtec_category(spec, "train")
    assert len(samples) == 3
    assert all(s.label == "normal" and s.mask is None for s in samples)
    assert [s.id for s in samples] == sorted(s.id for s in samples)


def test_load_test_split_binarizes_masks(mvtec_tree):
    spec = DatasetSpec(root=mvtec_tree, category="widget", resolution=32)
    samples = load_mvtec_category(spec, "test")
    assert len(samples) == 4  # empty defect dir contributes nothing
    abnormal = [s for s in samples if s.label == "abnormal"]
    assert len(abnormal) == 2
    for s in abnormal:
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.mask.sum() > 0


def test_loader_deterministic(mvtec_tree):
    spec = DatasetSpec(root=mvtec_tree, category="widget", resolution=32)
    a = load_mvtec_category(spec, "test")
    b = load_mvtec_category(spec, "test")
    assert [s.id for s in a] == [s.id for s in b]
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)


def test_missing_mask_is_hard_error(mvtec_tree):
    bad = mvtec_tree / "widget" / "ground_truth" / "scratch" / "001_mask.png"
    bad.unlink()
    spec = DatasetSpec(root=mvtec_tree, category="widget", resolution=32)
    with pytest.raises(FileNotFoundError, match="001"):
        load_mvtec_category(spec, "test")


def test_unreadable_image_is_hard_error(mvtec_tree):
    (mvtec_tree / "widget" / "train" / "good" / "000.png").write_bytes(b"not a png")
    spec = DatasetSpec(root=mvtec_tree, category="widget", resolution=32)
    with pytest.raises(OSError, match="000.png"):
        load_mvtec_category(spec, "train")


def test_sample_invariants():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        Sample(id="x", image=img, mask=None, label="abnormal", split="test")
    with pytest.raises(ValueError):
        Sample(
            id="x",
            image=img,
            mask=np.zeros((4, 4), dtype=np.uint8),
            label="normal",
            split="test",
        )
    with pytest.raises(ValueError):
        bad = np.ones((8, 8), dtype=np.uint8)
        Sample(id="x", image=img, mask=bad, label="abnormal", split="train")


def test_preprocess_constant_mean_is_zero():
    mean = (0.3, 0.5, 0.7)
    img = np.ones((32, 32, 3), dtype=np.float32) * np.array(mean, dtype=np.float32)
    s = Sample(id="c", image=img, mask=None, label="normal", split="train")
    spec = DatasetSpec(
        root=".", category="t", resolution=32,
        normalization_mean=mean, normalization_std=(1.0, 1.0, 1.0),
    )
    out = preprocess(s, spec)
    assert out.shape == (3, 32, 32)
    assert out.abs().max() < 1e-6


def test_preprocess_identity_resize(rng):
    img = rng.random((32, 32, 3), dtype=np.float64).astype(np.float32)
    s = Sample(id="i", image=img, mask=None, label="normal", split="train")
    spec = DatasetSpec(
        root=".", category="t", resolution=32,
        normalization_mean=(0.0, 0.0, 0.0), normalization_std=(1.0, 1.0, 1.0),
    )
    out = preprocess(s, spec).numpy().transpose(1, 2, 0)
    assert np.allclose(out, img, atol=1e-7)


def test_preprocess_matches_reference_resampler(rng):
    # 2x2 checkerboard upsampled to 4x4, frozen against the manual resampler
    checker = np.array(
        [[[1, 1, 1], [0, 0, 0]], [[0, 0, 0], [1, 1, 1]]], dtype=np.float32
    )
    expect = bilinear_resize_reference(checker, 4, 4)
    got = (
        torch.nn.functional.interpolate(
            torch.from_numpy(checker.transpose(2, 0, 1))[None],
            size=(4, 4),
            mode="bilinear",
            align_corners=False,
            antialias=False,
        )[0]
        .numpy()
        .transpose(1, 2, 0)
    )
    assert np.allclose(got, expect, atol=1e-6)
    # hand value: corner pixel equals the nearest source pixel under clamping
    assert got[0, 0, 0] == pytest.approx(1.0)

    img = rng.random((32, 32, 3)).astype(np.float32)
    s = Sample(id="r", image=img, mask=None, label="normal", split="train")
    spec = DatasetSpec(
        root=".", category="t", resolution=48,
        normalization_mean=(0.0, 0.0, 0.0), normalization_std=(1.0, 1.0, 1.0),
    )
    out = preprocess(s, spec).numpy().transpose(1, 2, 0)
    ref = bilinear_resize_reference(img, 48, 48)
    assert np.allclose(out, ref, atol=1e-5)


def test_preprocess_rejects_out_of_range():
    img = np.full((32, 32, 3), 1.5, dtype=np.float32)
    s = Sample(id="o", image=img, mask=None, label="normal", split="train")
    spec = DatasetSpec(root=".", category="t", resolution=32)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        preprocess(s, spec)


def test_denormalize_round_trip(rng):
    img = rng.random((40, 40, 3)).astype(np.float32)
    s = Sample(id="rt", image=img, mask=None, label="normal", split="train")
    spec = DatasetSpec(root=".", category="t", resolution=32)
    resized_only = preprocess(
        s,
        DatasetSpec(
            root=".", category="t", resolution=32,
            normalization_mean=(0, 0, 0), normalization_std=(1, 1, 1),
        ),
    )
    recovered = denormalize(preprocess(s, spec), spec)
    assert torch.allclose(recovered, resized_only, atol=1e-6)


def test_resize_mask_stays_binary(rng):
    mask = (rng.random((50, 50)) > 0.7).astype(np.uint8)
    out = resize_mask(mask, 32)
    assert out.shape == (32, 32)
    assert set(np.unique(out)) <= {0, 1}


def test_toy_dataset_deterministic():
    a = generate_toy_dataset(seed=3, n_train=2, n_test_normal=1, n_test_abnormal=2, resolution=48)
    b = generate_toy_dataset(seed=3, n_train=2, n_test_normal=1, n_test_abnormal=2, resolution=48)
    assert [s.id for s in a] == [s.id for s in b]
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        if sa.mask is None:
            assert sb.mask is None
        else:
            assert np.array_equal(sa.mask, sb.mask)


def test_toy_dataset_no_abnormal_means_no_masks():
    samples = generate_toy_dataset(seed=0, n_train=1, n_test_normal=3, n_test_abnormal=0, resolution=48)
    assert all(s.mask is None for s in split_samples(samples, "test"))


def test_toy_blob_area_matches_mask_count():
    samples = generate_toy_dataset(seed=11, n_train=0, n_test_normal=0, n_test_abnormal=3, resolution=64)
    for s in samples:
        planted = np.argwhere(s.mask > 0)
        assert len(planted) == s.mask.sum() > 0
        # planted area is exactly where the image was replaced: the fill differs
        # from the surrounding texture style, so the mask support is nonempty
        assert set(np.unique(s.mask)) <= {0, 1}


def test_toy_train_split_is_normal_only():
    samples = generate_toy_dataset(seed=5, n_train=4, n_test_normal=2, n_test_abnormal=2, resolution=48)
    assert all(s.label == "normal" for s in split_samples(samples, "train"))
