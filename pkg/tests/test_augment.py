import numpy as np
import pytest

from srdefect.augment import (KINDS, OPS, PHOTOMETRIC, AugmentOpSpec, PlanInfeasible, apply_plan, contrast_change,
                              copy_defect, cutout, cutout_allowed, gauss_noise, plan_budgets, plan_from_counts,
                              random_brightness, random_fog, random_gamma, ringing_overshoot, sample_counts,
                              sinc_kernel)
from srdefect.core import BBox, GrayImage, Sample
from srdefect.manifest import DatasetManifest
from srdefect.synthgen import NoiseModel, SynthSpec, generate_sample, generate_splits

from oracles import mock_counts, patch_is_clean, phase_lag

NAMES = ["micro_bridge", "gap", "bridge", "line_collapse", "probable_gap"]


@pytest.fixture
def sample():
    return generate_sample(SynthSpec(resolution=128, seed=3), "train", 0)


def flat(value=0.5, n=64):
    return Sample(GrayImage(np.full((n, n), value, np.float32)), [BBox(0, 0.5, 0.5, 0.2, 0.2)])


def test_identity_parameters_leave_image_unchanged(sample, rng):
    ident = {
        "gauss_noise": dict(sigma=0.0),
        "random_brightness": dict(brightness=0.0, contrast=1.0),
        "random_gamma": dict(gamma=1.0),
        "random_fog": dict(count=0),
        "random_shadow": dict(darken=1.0),
        "contrast_change": dict(alpha=1.0, beta=0.0),
    }
    for kind, params in ident.items():
        out = OPS[kind](sample, rng, **params)
        assert np.array_equal(out.image.pixels, sample.image.pixels), kind


@pytest.mark.parametrize("kind", PHOTOMETRIC + ("cutout",))
def test_photometric_ops_keep_boxes_bitwise(kind, sample, rng):
    out = AugmentOpSpec(kind, probability=1.0)(sample, rng)
    assert out.boxes == sample.boxes
    assert out.image.pixels.min() >= 0 and out.image.pixels.max() <= 1


def test_gamma_two_squares():
    out = random_gamma(flat(0.5), np.random.default_rng(0), gamma=2.0)
    assert np.allclose(out.image.pixels, 0.25)


def test_brightness_affine():
    out = random_brightness(flat(0.5), np.random.default_rng(0), brightness=0.1, contrast=1.2)
    assert np.allclose(out.image.pixels, 0.7, atol=1e-6)


def test_gauss_noise_std(rng):
    out = gauss_noise(flat(0.5, 256), rng, sigma=0.03)
    assert abs(out.image.pixels.std() - 0.03) < 0.003
    with pytest.raises(ValueError):
        gauss_noise(flat(), rng, sigma=-1.0)


def test_fog_lowers_local_variance(rng):
    noisy = gauss_noise(flat(0.5, 128), rng, sigma=0.05)
    out = random_fog(noisy, np.random.default_rng(2), count=1, radius_frac=0.3, alpha=1.0)
    changed = out.image.pixels != noisy.image.pixels
    assert changed.any()
    assert out.image.pixels[changed].var() < noisy.image.pixels[changed].var()


def test_sinc_at_nyquist_is_delta(sample, rng):
    taps = sinc_kernel(1.0, 9)
    assert np.allclose(taps, np.eye(9)[4])
    out = ringing_overshoot(sample, rng, cutoff=1.0, size=9)
    assert np.abs(out.image.pixels - sample.image.pixels).max() < 1 / 255
    with pytest.raises(ValueError):
        sinc_kernel(0.0)


def test_ringing_overshoots_an_edge(rng):
    px = np.zeros((32, 32), np.float32)
    px[:, 16:] = 0.8
    out = ringing_overshoot(Sample(GrayImage(px), []), rng, cutoff=0.3, size=15)
    assert out.image.pixels.max() > 0.8


def test_cutout_never_hides_more_than_half_of_a_box(rng):
    s = Sample(GrayImage(np.full((64, 64), 0.5, np.float32)),
               [BBox(0, 0.25, 0.25, 0.3, 0.3), BBox(1, 0.75, 0.7, 0.2, 0.4)])
    for seed in range(50):
        out = cutout(s, np.random.default_rng(seed), area_frac=(0.05, 0.3))
        rect = out.source_meta.get("cutout_rect")
        if rect is None:
            continue
        assert cutout_allowed(tuple(rect), s.boxes, 64, 64)
        r0, c0, r1, c1 = rect
        assert np.all(out.image.pixels[r0:r1, c0:c1] == 0)
    assert not cutout_allowed((0, 0, 64, 64), s.boxes, 64, 64)


def test_contrast_change_scales_band_std(sample, rng):
    out = contrast_change(sample, rng, alpha=0.5, beta=0.0, band_frac=0.3, ramp_rows=0)
    r0, r1 = out.source_meta["contrast_band"]
    before = sample.image.pixels[r0:r1].std()
    after = out.image.pixels[r0:r1].std()
    assert after == pytest.approx(0.5 * before, rel=0.02)
    assert np.array_equal(out.image.pixels[:r0], sample.image.pixels[:r0])


def test_copy_defect_adds_boxes_with_exact_interior(sample):
    rng = np.random.default_rng(4)
    k = 2
    out = copy_defect(sample, rng, copies=k, fade_px=3)
    assert len(out.boxes) == len(sample.boxes) + k
    pitch = out.source_meta["pitch"]
    assert pitch == 16
    for site in out.source_meta["copy_sites"]:
        pr0, pc0, pr1, pc1 = site["src"]
        dx, dy = site["dx"], site["dy"]
        assert dx % pitch == 0 and dx != 0
        src = sample.image.pixels[pr0 + 3 : pr1 - 3, pc0 + 3 : pc1 - 3]
        dst = out.image.pixels[pr0 + 3 + dy : pr1 - 3 + dy, pc0 + 3 + dx : pc1 - 3 + dx]
        assert np.array_equal(src, dst)


def test_copy_defect_keeps_line_phase():
    spec = SynthSpec(resolution=256, seed=3, noise=NoiseModel(kind="none"))
    checked = 0
    for idx in range(8):
        s = generate_sample(spec, "train", idx)
        out = copy_defect(s, np.random.default_rng(idx), copies=2, fade_px=2)
        for site in out.source_meta["copy_sites"]:
            if not patch_is_clean(s, site):
                continue
            pr0, pc0, pr1, pc1 = site["src"]
            rows = slice(pr0 + site["dy"], pr1 + site["dy"])
            patch = s.image.pixels[pr0:pr1, pc0:pc1]
            # the pasted patch lines up with the pattern that was there before, within edge roughness
            assert abs(phase_lag(patch, s.image.pixels[rows], pc0 + site["dx"], 6)) <= 1
            # control: a paste half a pitch off would be caught
            if pc0 + site["dx"] + 8 + patch.shape[1] <= 256:
                assert abs(phase_lag(patch, s.image.pixels[rows], pc0 + site["dx"] + 8, 6)) > 1
            checked += 1
    assert checked >= 10


def test_copy_defect_prefers_isolated_sources_and_free_sites():
    spec = SynthSpec(resolution=256, seed=5)
    for idx in range(10):
        s = generate_sample(spec, "train", idx)
        out = copy_defect(s, np.random.default_rng(idx), copies=2)
        new = out.boxes[len(s.boxes):]
        for k, b in enumerate(new):
            x0, y0, x1, y1 = b.to_pixels(256, 256)
            for o in out.boxes[: len(s.boxes) + k]:
                ox0, oy0, ox1, oy1 = o.to_pixels(256, 256)
                assert not (x0 < ox1 and ox0 < x1 and y0 < oy1 and oy0 < y1)


def test_copy_defect_needs_a_box(rng):
    with pytest.raises(ValueError):
        copy_defect(Sample(GrayImage(np.zeros((32, 32), np.float32)), []), rng)


def test_plan_hits_class_budgets_exactly():
    originals = [380, 1046, 238, 550, 315]
    targets = dict(zip(NAMES, [730, 1090, 355, 594, 1029]))
    counts = mock_counts(originals)
    assert counts.sum(axis=0).tolist() == originals
    plan = plan_from_counts(counts, np.ones(len(counts), bool), NAMES, targets)
    assert plan.originals == dict(zip(NAMES, originals))
    assert plan.planned_totals(counts, NAMES) == targets
    for e in plan.entries:
        for c in e.extra:
            assert counts[e.source, c] > 0


def test_plan_targets_equal_originals_is_empty():
    counts = mock_counts([5, 6, 7, 8, 9], seed=1)
    orig = dict(zip(NAMES, counts.sum(axis=0).tolist()))
    plan = plan_from_counts(counts, np.ones(len(counts), bool), NAMES, orig)
    assert plan.entries == []


def test_plan_toy_oracle():
    # 10 images, two categories; val rows must never be used
    counts = np.array([[1, 0]] * 4 + [[0, 1]] * 3 + [[1, 1]] + [[2, 0]] * 2)
    train = np.array([1, 1, 1, 1, 1, 1, 1, 1, 0, 0], bool)
    plan = plan_from_counts(counts, train, ["a", "b"], {"a": 8, "b": 6})
    assert plan.originals == {"a": 5, "b": 4}
    assert plan.planned_totals(counts, ["a", "b"]) == {"a": 8, "b": 6}
    assert all(train[e.source] for e in plan.entries)
    # the two-instance image fits first and is spread before reuse
    assert plan.entries[0].source == 7


def test_plan_rejects_bad_targets():
    counts = np.array([[1, 0], [1, 0]])
    mask = np.ones(2, bool)
    with pytest.raises(ValueError):
        plan_from_counts(counts, mask, ["a", "b"], {"a": 1})
    with pytest.raises(ValueError):
        plan_from_counts(counts, mask, ["a", "b"], {"z": 3})
    with pytest.raises(PlanInfeasible):
        plan_from_counts(counts, mask, ["a", "b"], {"b": 2})


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("aug")
    return generate_splits(SynthSpec(resolution=128, seed=12), {"train": 10, "val": 3}, root / "src")


def test_apply_plan_exact_and_val_untouched(small, tmp_path):
    orig = small.category_counts("train")
    targets = {c: v + 2 for c, v in orig.items() if v > 0}
    plan = plan_budgets(small, targets)
    out = apply_plan(small, plan, seed=1, out_dir=tmp_path / "a")
    counts = out.category_counts("train")
    assert all(counts[c] == t for c, t in targets.items())
    assert out.augmented
    val_src = [e for e in small.entries if e.split == "val"]
    val_out = [e for e in out.entries if e.split == "val"]
    assert [small.path_of(e.image).resolve() for e in val_src] == [out.path_of(e.image).resolve() for e in val_out]
    for a, b in zip(val_src, val_out):
        assert small.path_of(a.image).read_bytes() == out.path_of(b.image).read_bytes()
    again = apply_plan(small, plan, seed=1, out_dir=tmp_path / "b")
    for e in out.entries:
        assert out.path_of(e.image).read_bytes() == again.path_of(e.image).read_bytes()
    reloaded = DatasetManifest.load(tmp_path / "a" / "manifest.json")
    assert len(reloaded) == len(out)
    assert (sample_counts(reloaded)[len(small):].sum(axis=0) > 0).any()


def test_kinds_cover_photometric_and_geometric():
    assert set(KINDS) == set(OPS)
    with pytest.raises(ValueError):
        AugmentOpSpec("rotate")
    with pytest.raises(ValueError):
        AugmentOpSpec("cutout", probability=1.5)
