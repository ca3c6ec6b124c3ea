import numpy as np
import pytest
import torch
import torch.nn.functional as F

from saccader.data import (
    GlyphDatasetConfig,
    generate_glyph_dataset,
    glyph_bitmaps,
    load_image_folder,
    read_pnm,
    render,
    save_image_folder,
    silhouettes,
    write_pnm,
)

SMALL = dict(canvas=64, glyph=16, train_per_class=3, test_per_class=2)


def test_split_sizes_and_balance():
    ds = generate_glyph_dataset(GlyphDatasetConfig(train_per_class=50, test_per_class=20))
    assert len(ds["train"]) == 500 and len(ds["test"]) == 200
    assert np.bincount(ds["train"].labels).tolist() == [50] * 10
    assert ds["train"].images.shape == (500, 3, 256, 256) and ds["train"].images.dtype == np.uint8
    assert "val" not in ds


def test_seeded_twice_identical():
    a = generate_glyph_dataset(GlyphDatasetConfig(**SMALL, val_per_class=1))
    b = generate_glyph_dataset(GlyphDatasetConfig(**SMALL, val_per_class=1))
    for k in ("train", "test", "val"):
        assert np.array_equal(a[k].images, b[k].images)
        assert np.array_equal(a[k].labels, b[k].labels)
    c = generate_glyph_dataset(GlyphDatasetConfig(**SMALL, seed=1))
    assert not np.array_equal(a["train"].images, c["train"].images)


def test_splits_are_different_streams():
    ds = generate_glyph_dataset(GlyphDatasetConfig(**SMALL))
    assert not np.array_equal(ds["train"].images[:2], ds["test"].images[:2])


def test_clean_canvas_holds_only_the_glyph():
    cfg = GlyphDatasetConfig(**SMALL, clutter_density=0.0, placement="center")
    bitmaps = glyph_bitmaps(cfg)
    img, (r, c) = render(cfg, 3, np.random.default_rng(0), bitmaps)
    ink = img.any(axis=0)
    expect = np.zeros_like(ink)
    expect[r : r + 16, c : c + 16] = bitmaps[3].astype(bool)
    assert np.array_equal(ink, expect)
    assert set(np.unique(img)) == {0, 255}


def test_glyph_box_is_free_of_clutter():
    cfg = GlyphDatasetConfig(**SMALL, clutter_density=3.0)
    bitmaps = glyph_bitmaps(cfg)
    for s in range(20):
        img, (r, c) = render(cfg, s % 10, np.random.default_rng(s), bitmaps)
        box = img[:, r : r + 16, c : c + 16]
        assert np.array_equal(box.any(axis=0), bitmaps[s % 10].astype(bool))
        assert (img.sum(axis=0) > 0).sum() > bitmaps[s % 10].sum()


def test_positions_aligned():
    ds = generate_glyph_dataset(GlyphDatasetConfig(**SMALL, align=8))
    assert (ds["train"].positions % 8 == 0).all()
    assert (ds["train"].positions <= 48).all()


def test_alphabet_properties():
    s = silhouettes(5)
    assert (s.reshape(5, -1).sum(1) == 8).all()
    for i in range(5):
        for j in range(i):
            assert (s[i] != s[j]).sum() >= 4
    bm = glyph_bitmaps(GlyphDatasetConfig())
    assert len({b.tobytes() for b in bm}) == 10


def test_peripheral_downsampling_hides_fine_variants():
    # at 4x reduction the two textures of one silhouette average to the same image
    cfg = GlyphDatasetConfig(clutter_density=0.0)
    bm = torch.from_numpy(glyph_bitmaps(cfg).astype(np.float64))[:, None]
    small = F.avg_pool2d(bm, 4)[:, 0]
    for k in range(0, 10, 2):
        assert torch.equal(small[k], small[k + 1])
        assert not torch.equal(bm[k], bm[k + 1])
    assert not torch.equal(small[0], small[2])


def test_batch_scaling():
    ds = generate_glyph_dataset(GlyphDatasetConfig(**SMALL))
    x, y = ds["train"].batch(np.array([0, 1]))
    assert x.dtype == np.float32 and x.max() <= 1.0
    assert y.tolist() == ds["train"].labels[:2].tolist()
    sub = ds["train"].subset(np.array([2]))
    assert len(sub) == 1 and sub.positions.shape == (1, 2)


@pytest.mark.parametrize(
    "kw",
    [dict(glyph=10), dict(glyph=128), dict(num_classes=9), dict(fine_variants=7, num_classes=14),
     dict(placement="edge"), dict(clutter_density=-1), dict(background_noise=2), dict(clutter_contrast=1.5)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        GlyphDatasetConfig(**kw)


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, (3, 5, 7), dtype=np.uint8)
    write_pnm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    grey = rng.integers(0, 256, (4, 6), dtype=np.uint8)
    write_pnm(tmp_path / "b.pgm", grey)
    back = read_pnm(tmp_path / "b.pgm")
    assert back.shape == (3, 4, 6) and all(np.array_equal(back[i], grey) for i in range(3))
    assert (tmp_path / "b.pgm").read_bytes().startswith(b"P5\n6 4\n255\n")


def test_pnm_comments_and_errors(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert read_pnm(p)[0].tolist() == [[1, 2]]
    p.write_bytes(b"P2\n2 1\n255\n1 2")
    with pytest.raises(ValueError):
        read_pnm(p)
    p.write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(ValueError):
        read_pnm(p)
    with pytest.raises(TypeError):
        write_pnm(p, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        write_pnm(p, np.zeros((2, 2, 2), dtype=np.uint8))


def test_image_folder_round_trip(tmp_path):
    ds = generate_glyph_dataset(GlyphDatasetConfig(**SMALL))["test"]
    save_image_folder(ds, tmp_path)
    back, classes = load_image_folder(tmp_path, canvas=64)
    assert classes == [f"class_{k:03d}" for k in range(10)]
    order = np.argsort(ds.labels, kind="stable")
    assert np.array_equal(back.labels, ds.labels[order])
    assert np.array_equal(back.images, ds.images[order])
    with pytest.raises(ValueError):
        load_image_folder(tmp_path, canvas=32)
    with pytest.raises(ValueError):
        load_image_folder(tmp_path / "class_000")
