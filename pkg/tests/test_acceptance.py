"""Acceptance criteria, one test per criterion, each at its stated tolerance.

Criteria 7-9 share one desk-scale experiment (3 seeds x {SR-assisted@128,
baseline@128, baseline@256}) that takes roughly an hour on one CPU core.
"""

import json
import statistics
import time

import numpy as np
import pytest
import torch

from srdefect.augment import PHOTOMETRIC, AugmentOpSpec, copy_defect, plan_budgets, sample_counts
from srdefect.cli import main as cli_main
from srdefect.core import BBox, Detection, GrayImage, iou_xyxy, write_annotations
from srdefect.datasetprep import downsample_bilinear, make_pairs, upsample_bilinear
from srdefect.evaluator import (average_precision, evaluate, nms, psnr, score, upscale_tensor,
                                upscale_then_detect, zero_shot_eval)
from srdefect.kernels import iou_matrix
from srdefect.manifest import DatasetManifest, ManifestEntry
from srdefect.model import Detector, ModelConfig, detection_loss, joint_loss, sr_loss
from srdefect.synthgen import NoiseModel, ProcessCondition, SynthSpec, generate_sample, generate_splits
from srdefect.trainer import TrainConfig, fit, stages_from_pairs, train_baseline, train_sr_assisted

from oracles import fd_check, mock_counts, oracle_ap, oracle_nms, patch_is_clean, phase_lag, single_scene

CATS = ["micro_bridge", "gap", "bridge", "line_collapse", "probable_gap"]
SMALLEST = ("micro_bridge", "probable_gap")

# low-SNR line-space images: the default noise level leaves too little headroom
# for a resolution effect to show at this scale
EXPERIMENT_SEEDS = (0, 1, 2)
EXPERIMENT_EPOCHS = 24
EXPERIMENT_COUNTS = {"train": 500, "val": 100}


def experiment_spec(seed: int) -> SynthSpec:
    return SynthSpec(resolution=256, noise=NoiseModel(sigma=0.12), base_line_level=0.6, base_space_level=0.4,
                     seed=100 + seed)


def guarded(check, number, title, fn):
    try:
        ok, detail = fn()
    except Exception as exc:  # noqa: BLE001 - an error is a failed criterion, reported as such
        ok, detail = False, f"error: {exc!r}"
    check(number, title, ok, detail)


# ---------------------------------------------------------------- 1-6: properties


def test_criterion_01_oracle_equivalence(criterion):
    def run():
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        nms_equal = True
        for _ in range(25):
            dets, gts = single_scene(rng)
            assert len(dets[0]) <= 10 and len(gts[0]) <= 5
            for cat in range(3):
                want, got = oracle_ap(dets, gts, cat), average_precision(dets, gts, cat)
                if want is None or got is None:
                    if want is not got:
                        return False, f"None mismatch for category {cat}"
                    continue
                worst = max(worst, abs(got - want))
            for thr in (0.3, 0.5, 0.7):
                nms_equal &= nms(dets[0], thr) == oracle_nms(dets[0], thr)
        elapsed = time.perf_counter() - t0
        return worst <= 1e-9 and nms_equal and elapsed < 10, \
            f"max |AP - oracle| {worst:.1e}, NMS exact {nms_equal}, {elapsed:.2f}s"

    guarded(criterion, 1, "AP/NMS equal brute-force oracles", run)


def test_criterion_02_geometry(criterion):
    def run():
        rng = np.random.default_rng(7)
        xy = rng.random((10_000, 2, 2))
        a = np.hstack([xy[:, 0], xy[:, 0] + rng.random((10_000, 2)) * 0.5 + 1e-6])
        b = np.hstack([xy[:, 1], xy[:, 1] + rng.random((10_000, 2)) * 0.5 + 1e-6])
        ab = np.array([iou_matrix(a[i : i + 1], b[i : i + 1])[0, 0] for i in range(10_000)])
        ba = np.array([iou_matrix(b[i : i + 1], a[i : i + 1])[0, 0] for i in range(10_000)])
        self_iou = np.array([iou_matrix(a[i : i + 1], a[i : i + 1])[0, 0] for i in range(0, 10_000, 10)])
        sym = bool(np.array_equal(ab, ba))
        bounds = bool(np.all((ab >= 0) & (ab <= 1)))
        ident = bool(np.allclose(self_iou, 1.0, atol=1e-12))
        hand = iou_xyxy((0, 0, 10, 10), (5, 0, 15, 10))
        return sym and bounds and ident and hand == 1 / 3, \
            f"symmetric {sym}, in [0,1] {bounds}, self-IoU 1 {ident}, hand case {hand!r}"

    guarded(criterion, 2, "IoU properties on 10,000 pairs and the 1/3 hand case", run)


def test_criterion_03_downsampling(criterion):
    def run():
        const = downsample_bilinear(GrayImage(np.full((64, 64), 0.37, np.float32)), 2).pixels
        exact = bool(np.all(const == np.float32(0.37)))
        tile = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.float32)
        cb_err = float(np.abs(downsample_bilinear(GrayImage(tile), 2).pixels - 0.5).max())
        img = generate_sample(SynthSpec(resolution=256, seed=9), "train", 0).image
        two = downsample_bilinear(downsample_bilinear(img, 2), 2).pixels
        comp_err = float(np.abs(two - downsample_bilinear(img, 4).pixels).max())
        return exact and cb_err <= 1 / 255 and comp_err <= 1 / 255, \
            f"constant exact {exact}, checkerboard err {cb_err:.1e}, x2x2 vs x4 err {comp_err:.1e}"

    guarded(criterion, 3, "block-mean downsampling invariants", run)


def _mocked_table3_manifest(root):
    originals = [380, 1046, 238, 550, 315]
    counts = mock_counts(originals, seed=3)
    (root / "labels").mkdir(parents=True)
    entries = []
    for i, row in enumerate(counts):
        boxes = [BBox(int(c), 0.1 + 0.05 * k, 0.5, 0.04, 0.04) for k, c in enumerate(np.repeat(np.arange(5), row))]
        write_annotations(root / f"labels/{i:05d}.txt", boxes)
        entries.append(ManifestEntry(f"images/{i:05d}.png", f"labels/{i:05d}.txt", "train", 256))
    return DatasetManifest(entries=entries, categories=CATS, root=root), originals


def test_criterion_04_augmentation(criterion, tmp_path):
    def run():
        rng = np.random.default_rng(0)
        s = generate_sample(SynthSpec(resolution=128, seed=3), "train", 0)
        boxes_kept = all(AugmentOpSpec(k, probability=1.0)(s, rng).boxes == s.boxes for k in PHOTOMETRIC)
        quiet = SynthSpec(resolution=256, seed=3, noise=NoiseModel(kind="none"))
        k_ok, phase_ok, checked = True, True, 0
        for idx in range(8):
            src = generate_sample(quiet, "train", idx)
            k = 1 + idx % 3
            out = copy_defect(src, np.random.default_rng(idx), copies=k)
            k_ok &= len(out.boxes) == len(src.boxes) + k
            for site in out.source_meta["copy_sites"]:
                if not patch_is_clean(src, site):
                    continue
                pr0, pc0, pr1, pc1 = site["src"]
                rows = slice(pr0 + site["dy"], pr1 + site["dy"])
                lag = phase_lag(src.image.pixels[pr0:pr1, pc0:pc1], src.image.pixels[rows], pc0 + site["dx"], 6)
                phase_ok &= abs(lag) <= 1
                checked += 1
        phase_ok &= checked >= 10
        manifest, originals = _mocked_table3_manifest(tmp_path)
        targets = dict(zip(CATS, [730, 1090, 355, 594, 1029]))
        plan = plan_budgets(manifest, targets)
        planned = plan.planned_totals(sample_counts(manifest), CATS)
        table_ok = plan.originals == dict(zip(CATS, originals)) and planned == targets
        return boxes_kept and k_ok and phase_ok and table_ok, \
            f"boxes bitwise {boxes_kept}, +k exact {k_ok}, pitch phase {phase_ok} on {checked} sites, plan {planned}"

    guarded(criterion, 4, "augmentation contracts and class-budget allocation", run)


def test_criterion_05_model_numerics(criterion, tiny_dataset):
    def run():
        shapes_ok = True
        for side in (128, 256):
            torch.manual_seed(0)
            m = Detector(ModelConfig(input_size=side)).eval()
            with torch.no_grad():
                raw, sr = m(torch.rand(1, 1, side, side), with_sr=True)
            shapes_ok &= [tuple(r.shape[-2:]) for r in raw] == [(side // s, side // s) for s in m.cfg.strides]
            shapes_ok &= tuple(sr.shape) == (1, 1, 2 * side, 2 * side)
        torch.manual_seed(1)
        m = Detector(ModelConfig(input_size=64)).double().eval()
        g = torch.Generator().manual_seed(0)
        x = torch.rand(2, 1, 64, 64, dtype=torch.float64, generator=g)
        hr = torch.rand(2, 1, 128, 128, dtype=torch.float64, generator=g)
        gts = [[BBox(1, 0.4, 0.4, 0.2, 0.3)], [BBox(4, 0.6, 0.5, 0.08, 0.1)]]

        def loss():
            raw, sr = m(x, with_sr=True)
            return joint_loss(detection_loss(raw, gts, m.cfg, 64), sr_loss(sr, hr), 1.0)

        worst = fd_check(m, loss, n_params=40)
        _, pm = tiny_dataset
        stage = stages_from_pairs(pm, "train")[0]
        cfg = TrainConfig(epochs=1, batch_size=4, seed=3, sr_loss_weight=0.0, max_steps=3)
        torch.manual_seed(3)
        a = Detector(ModelConfig(sr_enabled=True))
        torch.manual_seed(3)
        b = Detector(ModelConfig(sr_enabled=False))
        fit(a, [stage], cfg, CATS)
        fit(b, [stage], cfg, CATS)
        sb = b.state_dict()
        same = all(torch.equal(v, sb[k]) for k, v in a.state_dict().items() if not k.startswith("sr."))
        with torch.no_grad():
            same &= all(torch.equal(p, q) for p, q in zip(a.eval()(stage.images[:2]), b.eval()(stage.images[:2])))
        return shapes_ok and worst < 1e-3 and same, \
            f"shapes {shapes_ok}, worst FD rel err {worst:.1e} on 40 params, lambda=0 bit-identical {same}"

    guarded(criterion, 5, "shapes, finite-difference gradients, lambda=0 identity", run)


@pytest.fixture(scope="module")
def sr_smoke_pairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    m = generate_splits(SynthSpec(resolution=256, seed=61), {"train": 50}, root / "synth")
    return make_pairs(m, [256, 128], root)


def test_criterion_06_sr_learning_smoke(criterion, sr_smoke_pairs):
    def run():
        stages = stages_from_pairs(sr_smoke_pairs, "train")
        cfg = TrainConfig(epochs=100, batch_size=8, max_steps=200, warmup_steps=20, seed=0)

        def once():
            torch.manual_seed(0)
            return fit(Detector(ModelConfig(input_size=128)), stages, cfg, CATS)[1]

        t0 = time.perf_counter()
        h1 = once()
        elapsed = time.perf_counter() - t0
        h2 = once()
        ma5 = np.convolve([h["sr_loss"] for h in h1], np.ones(5) / 5, mode="valid")
        drop = 1 - ma5[-1] / ma5[0]
        diff = max(max(abs(a["det_loss"] - b["det_loss"]), abs(a["sr_loss"] - b["sr_loss"])) for a, b in zip(h1, h2))
        return len(h1) == 200 and drop >= 0.5 and elapsed < 600 and diff <= 1e-6, \
            f"SR loss MA5 {ma5[0]:.4f} -> {ma5[-1]:.4f} ({drop:.0%} drop), {elapsed:.0f}s, rerun diff {diff:.1e}"

    guarded(criterion, 6, "SR loss halves in 200 steps, deterministic", run)


# ---------------------------------------------------------------- 7-9: desk-scale experiment


@pytest.fixture(scope="module")
def experiment(tmp_path_factory, request):
    """Train SR@128, baseline@128 and baseline@256 on three seeded synthetic sets."""
    root = tmp_path_factory.mktemp("experiment")
    progress = open(root / "progress.log", "w", buffering=1)
    runs = []
    for seed in EXPERIMENT_SEEDS:
        d = root / f"seed{seed}"
        m = generate_splits(experiment_spec(seed), EXPERIMENT_COUNTS, d / "synth")
        pm = make_pairs(m, [256, 128], d)
        lr, hr = pm.stage_manifest(128), pm.stage_manifest(256, "hr")
        cfg = TrainConfig(epochs=EXPERIMENT_EPOCHS, batch_size=16, seed=seed, sr_loss_weight=1.0)
        say = lambda msg, s=seed: progress.write(f"seed {s}: {msg}\n")
        t0 = time.time()
        sr = train_sr_assisted(pm, cfg, log=say)
        b128 = train_baseline(lr, cfg, log=say)
        b256 = train_baseline(hr, cfg, log=say)
        run = {
            "seed": seed,
            "dir": str(d),
            "sr": evaluate(sr, lr, split="val").to_dict(),
            "b128": evaluate(b128, lr, split="val").to_dict(),
            "b256": evaluate(b256, hr, split="val").to_dict(),
            "sr_up_b256": upscale_then_detect(lr, sr, b256, split="val").to_dict(),
            "train_seconds": time.time() - t0,
        }
        # reconstruction quality of the SR branch against plain bilinear enlargement
        lr_val, hr_val = lr.split("val"), hr.split("val")
        lr_imgs = torch.from_numpy(np.stack([lr_val.load_sample(i).image.pixels for i in range(len(lr_val))])[:, None])
        up = upscale_tensor(sr.build(), lr_imgs, 1).numpy()[:, 0]
        truth = [hr_val.load_sample(i).image.pixels for i in range(len(hr_val))]
        run["psnr_sr"] = float(np.mean([psnr(u, t) for u, t in zip(up, truth)]))
        run["psnr_bilinear"] = float(np.mean([
            psnr(upsample_bilinear(lr_val.load_sample(i).image).pixels, t) for i, t in enumerate(truth)
        ]))
        for name in ("sr", "b128", "b256", "sr_up_b256"):
            run[name].pop("detections")
        sr.save(d / "sr.pt")
        say(f"done in {run['train_seconds']:.0f}s: sr {run['sr']['mAP']:.3f} b128 {run['b128']['mAP']:.3f} "
            f"b256 {run['b256']['mAP']:.3f} up {run['sr_up_b256']['mAP']:.3f}")
        runs.append(run)
    progress.close()
    request.config.cache.set("srdefect/acceptance_experiment", runs)
    return runs


def _fmt(vals):
    return "/".join(f"{v:.3f}" for v in vals)


@pytest.mark.slow
def test_criterion_07_sr_assisted_vs_baseline(criterion, experiment):
    def run():
        sr = [r["sr"]["mAP"] for r in experiment]
        base = [r["b128"]["mAP"] for r in experiment]
        med_sr, med_base = statistics.median(sr), statistics.median(base)
        def beats(r, c):
            a, b = r["sr"]["ap"][c], r["b128"]["ap"][c]
            return a is not None and b is not None and a > b

        wins = {c: sum(beats(r, c) for r in experiment) for c in SMALLEST}
        per_cat = "; ".join(
            f"{c} SR {_fmt(r['sr']['ap'][c] or 0.0 for r in experiment)} vs {_fmt(r['b128']['ap'][c] or 0.0 for r in experiment)}"
            for c in SMALLEST
        )
        ok = med_sr >= med_base - 0.02 and all(w >= 2 for w in wins.values())
        return ok, (f"median mAP SR {med_sr:.3f} vs baseline {med_base:.3f} (seeds SR {_fmt(sr)}, "
                    f"base {_fmt(base)}); wins {wins}; {per_cat}")

    guarded(criterion, 7, "SR-assisted >= baseline - 0.02 and wins on smallest defects", run)


@pytest.mark.slow
def test_criterion_08_upscale_then_detect(criterion, experiment):
    def run():
        up = [r["sr_up_b256"]["mAP"] for r in experiment]
        raw = [r["b128"]["mAP"] for r in experiment]
        hr = [r["b256"]["mAP"] for r in experiment]
        med_up, med_raw = statistics.median(up), statistics.median(raw)
        ps = [r["psnr_sr"] for r in experiment]
        pb = [r["psnr_bilinear"] for r in experiment]
        return med_up >= med_raw - 0.02, (
            f"median mAP upscaled->b256 {med_up:.3f} vs raw b128 {med_raw:.3f} (seeds {_fmt(up)} vs {_fmt(raw)}; "
            f"b256 on true HR {_fmt(hr)}; PSNR SR {_fmt(ps)} dB vs bilinear {_fmt(pb)} dB)")

    guarded(criterion, 8, "upscale-then-detect >= raw LR detector - 0.02", run)


@pytest.mark.slow
def test_criterion_09_zero_shot(criterion, experiment, tmp_path):
    def run():
        cond = ProcessCondition("shifted", pitch_scale=1.5, cd_scale=1.3, contrast_scale=0.8)
        spec = cond.apply(experiment_spec(0))
        m = generate_splits(spec, {"val": 60}, tmp_path / "shifted")
        pm = make_pairs(m, [256, 128], tmp_path)
        thresholds = (0.1, 0.2, 0.3, 0.5)
        ckpt = f"{experiment[0]['dir']}/sr.pt"
        res = zero_shot_eval(ckpt, pm.stage_manifest(128), thresholds)
        counts = [res.detection_counts[t] for t in thresholds]
        monotone = all(a >= b for a, b in zip(counts, counts[1:]))
        out = tmp_path / "zero_shot.json"
        code = cli_main(["eval", "--checkpoint", ckpt, "--manifest", str(tmp_path / "pairs.json"), "--side", "128",
                         "--split", "all", "--zero-shot", "--out", str(out)])
        doc = json.loads(out.read_text()) if code == 0 else {}
        cli_counts = [doc.get("detection_counts", {}).get(str(t)) for t in thresholds]
        pipeline = code == 0 and cli_counts == counts and len(doc["reports"]) == 4
        maps = [res.reports[t].mAP for t in thresholds]
        return monotone and pipeline, (f"pitch {spec.pitch_px}px CD {spec.cd_px}px; counts {counts}; "
                                       f"mAP {_fmt(maps)}; CLI exit {code}, counts agree {cli_counts == counts}")

    guarded(criterion, 9, "zero-shot counts monotone in threshold, report pipeline end-to-end", run)


# ---------------------------------------------------------------- 10: throughput


def test_criterion_10_throughput(criterion, tmp_path):
    def run():
        b = BBox(0, 0.5, 0.5, 0.1, 0.1)
        score([[Detection(b, 0.9)]], [[b]], CATS).save(tmp_path / "r.json")
        code = cli_main(["report", "--json", "--reports", str(tmp_path / "r.json"), "--out", str(tmp_path / "rep")])
        doc = json.loads((tmp_path / "rep/report.json").read_text())
        rows = {(r["high"], r["low"]): r for r in doc["throughput"]}
        r512 = rows[(1024, 512)]["time_ratio"]
        r128 = rows[(1024, 128)]["throughput_multiplier"]
        return code == 0 and abs(r512 - 2.0) <= 0.1 and abs(r128 - 8.0) <= 0.4, \
            f"1024 vs 512 time ratio {r512:.3f}; 1024->128 multiplier x{r128:.2f}; model {doc['time_model']}"

    guarded(criterion, 10, "throughput table from the fitted linear time model", run)
