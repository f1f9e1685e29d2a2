import numpy as np
import pytest
from PIL import Image

from cvattn.chan_vese import ChanVeseParams, cv_evolve, cv_segment
from cvattn.data import (
    AugmentToggles,
    ImageFormatError,
    PlacementError,
    Sample,
    SynthConfig,
    augment,
    forward_point,
    generate_synthetic,
    load_image,
    load_mask,
    load_synth_config,
    read_manifest,
    save_image,
    save_mask,
    split_indices,
    standardize,
    write_dataset,
)
from cvattn.metrics import metric_dice
from cvattn.unet import minmax_normalize


def cv_dice(samples, iters=200):
    # intensity-midpoint start, scaled so |phi| >> eps and the region means separate
    imgs = minmax_normalize(np.stack([s.image.astype(np.float64) for s in samples]))[:, 0]
    seg = cv_segment(cv_evolve(imgs, 10.0 * (imgs - 0.5), ChanVeseParams(iters=iters)).data)
    return np.array([metric_dice(seg[i], s.mask[0]) for i, s in enumerate(samples)])


def test_deterministic():
    a = generate_synthetic(SynthConfig(n_samples=5, seed=3))
    b = generate_synthetic(SynthConfig(n_samples=5, seed=3))
    c = generate_synthetic(SynthConfig(n_samples=5, seed=4))
    assert all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes() for x, y in zip(a, b))
    assert a[0].image.tobytes() != c[0].image.tobytes()
    # sample i depends only on (config, i)
    assert generate_synthetic(SynthConfig(n_samples=2, seed=3))[1].image.tobytes() == a[1].image.tobytes()


def test_sample_contract():
    for s in generate_synthetic(SynthConfig(n_samples=20)):
        assert s.image.shape == s.mask.shape == s.confounders.shape == (1, 64, 64)
        assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}


def test_area_fraction_and_separation():
    samples = generate_synthetic(SynthConfig(n_samples=1000))
    frac = np.array([s.mask.mean() for s in samples])
    assert frac.min() >= 0.01 and frac.max() <= 0.20
    assert not any((s.mask & s.confounders).any() for s in samples)
    assert all(s.confounders.any() for s in samples)


def test_confounders_match_target_intensity():
    samples = generate_synthetic(SynthConfig(n_samples=50, noise_sigma=0.0))
    gap = [abs(s.image[s.mask > 0].mean() - s.image[s.confounders > 0].mean()) for s in samples]
    assert np.mean(gap) <= 0.05


def test_clean_corpus_is_cv_segmentable():
    d = cv_dice(generate_synthetic(SynthConfig(n_samples=50, noise_sigma=0.0, n_confounders=0)))
    assert d.mean() >= 0.99


def test_confounders_defeat_plain_cv():
    d = cv_dice(generate_synthetic(SynthConfig(n_samples=200)))
    assert d.mean() <= 0.8


def test_placement_failure_is_reported():
    with pytest.raises(PlacementError):
        generate_synthetic(SynthConfig(size=32, n_samples=1, n_confounders=8, max_retries=5))
    with pytest.raises(ValueError, match="size"):
        SynthConfig(size=24)


def test_config_round_trip(tmp_path):
    cfg = SynthConfig(n_samples=3, seed=11)
    write_dataset(generate_synthetic(cfg), tmp_path, cfg)
    assert load_synth_config(tmp_path / "synth_config.json") == cfg


# --- image I/O --------------------------------------------------------------------


def test_png_round_trip(tmp_path, rng):
    u8 = rng.integers(0, 256, size=(7, 9)).astype(np.uint8)
    save_image(u8 / 255.0, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert back.dtype == np.float32 and np.array_equal(np.rint(back * 255).astype(np.uint8), u8)


def test_pgm_matches_png(tmp_path, rng):
    a = rng.random((6, 5))
    save_image(a, tmp_path / "a.png")
    save_image(a, tmp_path / "a.pgm")
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n5 6\n255\n")
    assert np.array_equal(load_image(tmp_path / "a.png"), load_image(tmp_path / "a.pgm"))


def test_mask_round_trip(tmp_path, rng):
    m = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    save_mask(m, tmp_path / "m.png")
    assert np.array_equal(load_mask(tmp_path / "m.png"), m)
    save_mask(np.zeros((4, 4)), tmp_path / "z.png")
    assert np.all(np.asarray(Image.open(tmp_path / "z.png")) == 0)


def test_bad_images_name_the_file(tmp_path):
    Image.new("RGB", (4, 4)).save(tmp_path / "rgb.png")
    with pytest.raises(ImageFormatError, match="rgb.png"):
        load_image(tmp_path / "rgb.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageFormatError, match="junk.png"):
        load_image(tmp_path / "junk.png")
    Image.new("L", (4, 4)).save(tmp_path / "x.bmp")
    with pytest.raises(ImageFormatError, match="x.bmp"):
        load_image(tmp_path / "x.bmp")
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")


# --- augmentation --------------------------------------------------------------------


def blob_sample(center=(20.0, 40.0), r=6.0, n=64):
    yy, xx = np.mgrid[0:n, 0:n]
    m = (np.hypot(yy - center[0], xx - center[1]) <= r).astype(np.uint8)
    img = (0.2 + 0.6 * m + 0.001 * xx).astype(np.float32)
    return Sample(img[None], m[None])


def centroid(mask):
    return np.argwhere(mask[0] > 0).mean(axis=0)


def test_augment_off_is_identity(rng):
    s = blob_sample()
    out = augment(s, rng, AugmentToggles())
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_flips_are_involutions():
    s = blob_sample()
    for tog in (AugmentToggles(hflip=True), AugmentToggles(vflip=True), AugmentToggles(transpose=True)):
        seed = next(k for k in range(100) if augment(s, np.random.default_rng(k), tog, return_params=True)[1])
        once = augment(s, np.random.default_rng(seed), tog)
        twice = augment(once, np.random.default_rng(seed), tog)
        assert not np.array_equal(once.mask, s.mask)
        assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


@pytest.mark.parametrize("toggles, tol", [
    (AugmentToggles(hflip=True, vflip=True, transpose=True), 0.5),
    (AugmentToggles(rotate=True, shift_scale=True), 1.5),
    (AugmentToggles.all_on(), 1.5),
])
def test_mask_follows_image(toggles, tol):
    s = blob_sample()
    c0 = centroid(s.mask)
    for k in range(20):
        out, applied = augment(s, np.random.default_rng(k), toggles, return_params=True)
        assert set(np.unique(out.mask)) <= {0, 1}
        expected = forward_point(c0, (64, 64), applied)
        assert np.linalg.norm(centroid(out.mask) - expected) <= tol
        # the bright blob in the image went to the same place
        im = out.image[0]
        bright = np.argwhere(im > (im.min() + im.max()) / 2).mean(axis=0)
        assert np.linalg.norm(bright - expected) <= tol + 0.5


def test_normalize_standardizes(rng):
    out = augment(blob_sample(), rng, AugmentToggles(normalize=True))
    assert abs(out.image.mean()) <= 1e-5 and abs(out.image.std() - 1) <= 1e-5
    assert np.all(standardize(np.full((3, 3), 2.0)) == 0)


def test_augment_deterministic_given_rng():
    s = generate_synthetic(SynthConfig(n_samples=1))[0]
    a = augment(s, np.random.default_rng(5), AugmentToggles.all_on())
    b = augment(s, np.random.default_rng(5), AugmentToggles.all_on())
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


# --- manifests ------------------------------------------------------------------------


def test_split_fractions():
    parts = split_indices(200, seed=0)
    assert [len(parts[k]) for k in ("train", "val", "test")] == [140, 30, 30]
    assert sorted(parts["train"] + parts["val"] + parts["test"]) == list(range(200))
    assert split_indices(200, seed=0) == parts != split_indices(200, seed=1)


def test_manifest_round_trip(tmp_path):
    cfg = SynthConfig(n_samples=10, seed=2)
    samples = generate_synthetic(cfg)
    manifest = write_dataset(samples, tmp_path, cfg)
    back = read_manifest(manifest)
    assert len(back) == 10
    for s, b in zip(samples, back):
        assert np.array_equal(b.mask, s.mask) and np.array_equal(b.confounders, s.confounders)
        assert np.max(np.abs(b.image - s.image)) <= 0.5 / 255 + 1e-7
    assert sum(len(read_manifest(tmp_path / f"manifest_{p}.csv")) for p in ("train", "val", "test")) == 10
    assert (tmp_path / "manifest.csv").read_text().splitlines()[0] == "image_path,mask_path,spacing_mm"


def test_write_dataset_is_byte_stable(tmp_path):
    cfg = SynthConfig(n_samples=4, seed=1)
    for d in ("a", "b"):
        write_dataset(generate_synthetic(cfg), tmp_path / d, cfg)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
