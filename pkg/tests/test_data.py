import numpy as np
import pytest

from strokegen import data as D
from strokegen import renderer as R
from strokegen.config import SyntheticConfig


@pytest.fixture
def idx_fixture(tmp_path):
    # 4-image hand-built fixture following the big-endian byte layout
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    labels = np.array([0, 3, 7, 9], dtype=np.uint8)
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    D.write_idx_images(img_path, images)
    D.write_idx_labels(lab_path, labels)
    return img_path, lab_path, images, labels


def test_idx_roundtrip_bit_exact(idx_fixture):
    img_path, lab_path, images, labels = idx_fixture
    back = D.load_idx(img_path)
    assert back.shape == (4, 28, 28)
    assert np.array_equal(back, images)
    lab = D.load_idx(lab_path)
    assert np.array_equal(lab, labels)
    assert lab.min() >= 0 and lab.max() <= 9


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 16)
    with pytest.raises(D.DataFormatError, match="magic"):
        D.load_idx(p)


def test_idx_truncated_reports_offset(idx_fixture, tmp_path):
    img_path, _, _, _ = idx_fixture
    data = img_path.read_bytes()
    cut = tmp_path / "cut.idx"
    cut.write_bytes(data[: len(data) // 2])
    with pytest.raises(D.DataFormatError, match="offset"):
        D.load_idx(cut)


def test_preprocess_zero_and_involution():
    zero = np.zeros((28, 28), dtype=np.uint8)
    assert np.array_equal(D.preprocess(zero), np.zeros((50, 50), dtype=np.float32))
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(50, 50), dtype=np.uint8)
    once = D.preprocess(img, invert=True)
    twice = 1.0 - once
    np.testing.assert_allclose(twice, D.preprocess(img), atol=1e-6)


def test_preprocess_constant_resize():
    img = np.full((28, 28), 137, dtype=np.uint8)
    out = D.preprocess(img, size=50)
    np.testing.assert_allclose(out, 137 / 255.0, atol=1e-6)


def test_load_idx_dataset(idx_fixture):
    img_path, lab_path, _, labels = idx_fixture
    ds = D.load_idx_dataset(img_path, lab_path, name="fixture")
    assert ds.images.shape == (4, 50, 50)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.array_equal(ds.labels, labels)


def test_label_count_mismatch(idx_fixture, tmp_path):
    img_path, _, _, _ = idx_fixture
    bad = tmp_path / "short.idx"
    D.write_idx_labels(bad, np.array([1, 2], dtype=np.uint8))
    with pytest.raises(D.DataFormatError, match="labels"):
        D.load_idx_dataset(img_path, bad)


def test_make_synthetic_deterministic_and_inked():
    spec = SyntheticConfig(n_images=6, seed=42)
    a, traj_a, _ = D.make_synthetic(spec, curve_samples=40)
    b, traj_b, _ = D.make_synthetic(spec, curve_samples=40)
    assert np.array_equal(a.images, b.images)
    assert all(img.sum() > 0 for img in a.images)
    assert all(ta.count() == tb.count() for ta, tb in zip(traj_a, traj_b))


def test_synthetic_render_self_consistency():
    spec = SyntheticConfig(n_images=4, seed=3)
    ds, trajectories, _ = D.make_synthetic(spec, curve_samples=40)
    for img, traj in zip(ds.images, trajectories):
        again = D.render_trajectory(traj, curve_samples=40)
        assert np.array_equal(img, again)


def test_synthetic_save_load_roundtrip(tmp_path):
    spec = SyntheticConfig(n_images=5, stroke_counts=[1, 2], seed=11)
    ds, trajectories, _ = D.make_synthetic(spec, curve_samples=40)
    D.save_synthetic(tmp_path, ds, trajectories)
    ds2, traj2 = D.load_synthetic(tmp_path / "synthetic.npz")
    assert np.array_equal(ds.images, ds2.images)
    assert np.array_equal(ds.labels, ds2.labels)
    for ta, tb in zip(trajectories, traj2):
        assert ta.count() == tb.count()
        assert ta.g_slope == tb.g_slope
        for sa, sb in zip(ta.strokes, tb.strokes):
            np.testing.assert_allclose(sa.layout, sb.layout)
            np.testing.assert_allclose(sa.cp, sb.cp)


def test_templates_are_distinct():
    rng = np.random.default_rng(5)
    templates = D.make_templates(rng, 4, 5, 0.75)
    assert templates.shape == (4, 5, 2)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(templates[i] - templates[j]) > 0.5


def test_manifest_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    images = rng.uniform(0, 1, size=(3, 50, 50))
    records = []
    for i, img in enumerate(images):
        rel = f"img{i}.png"
        R.write_png(img, tmp_path / rel)
        records.append((rel, i % 2))
    D.write_manifest(tmp_path / "manifest.tsv", records)
    ds = D.load_manifest(tmp_path / "manifest.tsv")
    assert len(ds) == 3
    assert np.array_equal(ds.labels, [0, 1, 0])
    np.testing.assert_allclose(ds.images, images, atol=1 / 250)


def test_manifest_rejects_bad_lines(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("no-tab-here\n")
    with pytest.raises(D.DataFormatError):
        D.load_manifest(p)
