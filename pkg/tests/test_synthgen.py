import json
import numpy as np
import pytest

from srdefect.core import GrayImage, read_annotations
from srdefect.manifest import DatasetManifest
from srdefect.synthgen import (NoiseModel, PlacementError, ProcessCondition, SynthSpec, apply_noise,
                               generate_dataset, generate_sample, inject_defect, make_layout, render_pattern)

QUIET = NoiseModel(kind="none")


def test_bimodal_without_roughness():
    img = render_pattern(SynthSpec(resolution=128, edge_roughness_sigma=0.0, noise=QUIET, seed=3))
    levels = np.unique(img.pixels)
    assert levels.size == 2 and np.allclose(levels, [0.3, 0.7])


def test_same_seed_bit_identical():
    a = render_pattern(SynthSpec(seed=9))
    b = render_pattern(SynthSpec(seed=9))
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, render_pattern(SynthSpec(seed=10)).pixels)


def test_period_count_and_line_fraction():
    sigma = 0.5
    spec = SynthSpec(resolution=512, pitch_px=32, cd_px=16, edge_roughness_sigma=sigma, noise=QUIET, seed=1)
    img = render_pattern(spec)
    mid = (spec.base_line_level + spec.base_space_level) / 2
    frac = (img.pixels > mid).mean()
    assert abs(frac - 0.5) <= 2 * sigma / spec.pitch_px
    prof = img.pixels.mean(axis=0) - img.pixels.mean()
    spectrum = np.abs(np.fft.rfft(prof))
    assert int(np.argmax(spectrum[1:]) + 1) == 16


def test_spec_invariants_rejected():
    with pytest.raises(ValueError):
        SynthSpec(cd_px=16, pitch_px=16)
    with pytest.raises(ValueError):
        SynthSpec(edge_roughness_sigma=4.0)
    with pytest.raises(ValueError):
        SynthSpec(defect_mix={"gap": 0.5})
    with pytest.raises(ValueError):
        SynthSpec(base_line_level=0.2, base_space_level=0.6)


def _inject(name, seed, spec=None):
    spec = spec or SynthSpec(noise=QUIET, seed=seed)
    rng = np.random.default_rng(seed)
    layout = make_layout(spec, rng)
    img = layout.render()
    out, box = inject_defect(img, layout, [], spec.categories.index(name), name, rng)
    return spec, layout, img, out, box


@pytest.mark.parametrize("name", ["micro_bridge", "gap", "bridge", "line_collapse", "probable_gap"])
def test_injection_is_local(name):
    for seed in range(10):
        spec, _, before, after, box = _inject(name, seed)
        n = spec.resolution
        x0, y0, x1, y1 = box.to_pixels(n, n)
        changed = np.argwhere(before.pixels != after.pixels)
        assert changed.size, "defect edit changed nothing"
        assert changed[:, 0].min() >= y0 - 2 and changed[:, 0].max() < y1 + 2
        assert changed[:, 1].min() >= x0 - 2 and changed[:, 1].max() < x1 + 2


def test_gap_removes_material():
    for seed in range(10):
        spec, _, before, after, box = _inject("gap", seed)
        rs, cs = box.pixel_slices(spec.resolution, spec.resolution)
        assert after.pixels[rs, cs].sum() < before.pixels[rs, cs].sum()


def test_bridge_spans_full_space():
    for seed in range(10):
        spec, _, _, _, box = _inject("bridge", seed)
        assert box.w * spec.resolution >= spec.pitch_px - spec.cd_px


def test_probable_gap_level_between_line_and_space():
    spec, layout, before, after, box = _inject("probable_gap", 4, SynthSpec(noise=QUIET, edge_roughness_sigma=0, seed=4))
    rs, cs = box.pixel_slices(spec.resolution, spec.resolution)
    was_line = before.pixels[rs, cs] > 0.69
    changed = after.pixels[rs, cs] != before.pixels[rs, cs]
    inner = after.pixels[rs, cs][was_line & changed]
    assert inner.size
    assert np.all(inner < spec.base_line_level - 0.05) and np.all(inner > spec.base_space_level + 0.05)


def test_micro_bridge_smaller_than_bridge_over_100_seeds():
    for seed in range(100):
        *_, micro = _inject("micro_bridge", seed)
        *_, bridge = _inject("bridge", seed)
        assert micro.area < bridge.area


def test_line_collapse_vertical_extent():
    spec, _, _, _, box = _inject("line_collapse", 2)
    assert box.h * spec.resolution >= 8 * spec.cd_px


def test_placement_error_when_full():
    spec = SynthSpec(noise=QUIET, resolution=128, seed=0)
    rng = np.random.default_rng(0)
    layout = make_layout(spec, rng)
    img = layout.render()
    boxes = []
    with pytest.raises(PlacementError):
        for _ in range(500):
            img, b = inject_defect(img, layout, boxes, 3, "line_collapse", rng)
            boxes.append(b)


def test_noise_identity_and_statistics(rng):
    flat = GrayImage(np.full((512, 512), 0.5, np.float32))
    assert apply_noise(flat, NoiseModel(sigma=0.0), rng) is flat
    g = apply_noise(flat, NoiseModel(sigma=0.05), rng).pixels
    assert 0.045 <= g.std() <= 0.055
    gm = apply_noise(flat, NoiseModel(kind="gamma", shape=2.0, scale=0.025), rng).pixels
    assert abs(gm.mean() - 0.5) <= 0.002
    for bad in (dict(sigma=-0.1), dict(kind="gamma", shape=0.0), dict(kind="gamma", scale=-1.0)):
        with pytest.raises(ValueError):
            NoiseModel(**bad)


def test_process_condition_shifts_dominant_frequency():
    base = SynthSpec(resolution=512, noise=QUIET, seed=2)
    cond = ProcessCondition("shifted", pitch_scale=1.5, cd_scale=1.3, contrast_scale=0.8)
    shifted = cond.apply(base)
    assert (shifted.pitch_px, shifted.cd_px) == (24, 10)
    assert shifted.base_line_level - shifted.base_space_level == pytest.approx(0.8 * 0.4)
    prof = render_pattern(shifted).pixels.mean(axis=0)
    k = int(np.argmax(np.abs(np.fft.rfft(prof - prof.mean()))[1:]) + 1)
    assert abs(k - 512 / 24) <= 1


def test_samples_have_defects_and_valid_boxes():
    spec = SynthSpec(seed=4)
    for i in range(10):
        s = generate_sample(spec, "train", i)
        assert 1 <= len(s.boxes) <= 3
        assert s.image.pixels.min() >= 0 and s.image.pixels.max() <= 1


def test_dataset_counts_follow_mix(tmp_path):
    spec = SynthSpec(seed=21, defects_per_image=(1, 1))
    m = generate_dataset(spec, 100, tmp_path, "train")
    counts = m.category_counts("train")
    assert sum(counts.values()) == 100
    assert all(10 <= v <= 30 for v in counts.values()), counts


def test_empty_dataset(tmp_path):
    m = generate_dataset(SynthSpec(), 0, tmp_path / "e")
    assert len(m) == 0
    assert not list((tmp_path / "e" / "images").iterdir())


def test_regeneration_and_parallel_are_byte_identical(tmp_path):
    spec = SynthSpec(seed=8, resolution=128, pitch_px=12, cd_px=6)
    generate_dataset(spec, 12, tmp_path / "a")
    generate_dataset(spec, 12, tmp_path / "b", workers=3)
    for f in sorted((tmp_path / "a").rglob("*.*")):
        rel = f.relative_to(tmp_path / "a")
        assert f.read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_manifest_records_spec(tmp_path):
    spec = SynthSpec(seed=33)
    generate_dataset(spec, 2, tmp_path)
    m = DatasetManifest.load(tmp_path / "manifest.json")
    assert m.seed == 33
    assert SynthSpec.from_dict(m.synth_spec) == spec
    for e in m.entries:
        assert read_annotations(m.path_of(e.annotation))
    assert json.loads((tmp_path / "manifest.json").read_text())["format"].startswith("srdefect-manifest")
