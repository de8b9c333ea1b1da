"""``srdefect`` command line: synth -> augment -> prepare -> train -> eval -> upscale -> report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .core import DataError, GrayImage
from .manifest import DatasetManifest, dumps

log = logging.getLogger("srdefect")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class Clobber(DataError):
    """Output exists and --no-clobber was given."""


def _out(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.out) if args.out else cfg.resolved_root() / default


def _guard(path: Path, args) -> Path:
    if args.no_clobber and path.exists():
        raise Clobber(f"refusing to overwrite {path} (--no-clobber)")
    return path


def _need(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_dataset(path: str | Path, side: int | None = None, which: str | None = None) -> DatasetManifest:
    """A dataset manifest, or one stage of a pair manifest selected by side."""
    from .datasetprep import PAIR_FORMAT, PairManifest

    p = _need(path, "manifest")
    try:
        fmt = json.loads(p.read_text()).get("format")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {p}: {exc}") from exc
    if fmt != PAIR_FORMAT:
        return DatasetManifest.load(p)
    pm = PairManifest.load(p)
    lr_sides = sorted({e.lr_res for e in pm.entries})
    hr_sides = sorted({e.hr_res for e in pm.entries})
    if side is None:
        if not lr_sides:
            raise DataError(f"{p}: pair manifest is empty")
        side = lr_sides[0]
    if which is None:
        which = "lr" if side in lr_sides else "hr"
    if side not in (lr_sides if which == "lr" else hr_sides):
        raise DataError(f"{p}: no {which} stage with side {side}")
    return pm.stage_manifest(side, which)


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> dict:
    from .synthgen import generate_dataset, generate_splits

    out = _out(args, cfg, "synth")
    _guard(out / "manifest.json", args)
    spec = cfg.synth.to_spec(cfg.seed)
    if args.n is not None:
        if args.n < 0:
            raise ConfigError("--n must be >= 0")
        m = generate_dataset(spec, args.n, out, args.split, workers=args.workers)
    else:
        m = generate_splits(spec, cfg.synth.counts, out, workers=args.workers)
    m.config_hash = cfg.hash()
    path = m.save(out / "manifest.json")
    return {"manifest": str(path), "images": len(m)}


def cmd_augment(args, cfg: RunConfig) -> dict:
    from .augment import apply_plan, default_pipeline, plan_budgets

    m = DatasetManifest.load(_need(args.manifest, "manifest"))
    out = _out(args, cfg, "augmented")
    _guard(out / "manifest.json", args)
    targets = dict(m.category_counts("train"))
    unknown = set(cfg.augment.targets) - set(targets)
    if unknown:
        raise ConfigError(f"augment.targets names unknown categories {sorted(unknown)}")
    targets.update(cfg.augment.targets)
    plan = plan_budgets(m, targets, default_pipeline(cfg.augment.probability))
    aug = apply_plan(m, plan, cfg.seed, out)
    aug.config_hash = cfg.hash()
    path = aug.save(out / "manifest.json")
    return {"manifest": str(path), "added": len(plan.entries), "totals": aug.category_counts("train")}


def cmd_prepare(args, cfg: RunConfig) -> dict:
    from .datasetprep import make_pairs

    m = DatasetManifest.load(_need(args.manifest, "manifest"))
    chain = [int(c) for c in args.chain.split(",")] if args.chain else cfg.chain
    out = _out(args, cfg, "prepared")
    _guard(out / "pairs.json", args)
    pm = make_pairs(m, chain, out)
    return {"pairs": str(out / "pairs.json"), "count": len(pm), "stages": pm.stages}


def cmd_train(args, cfg: RunConfig) -> dict:
    from .datasetprep import PairManifest
    from .trainer import train_baseline, train_sr_assisted

    out = _out(args, cfg, "train")
    ckpt_path = _guard(out / "model.pt", args)
    extra = {"augment_manifest": str(_need(args.augmented, "augmented manifest")) if args.augmented else None,
             "threads": 1}
    if args.sr:
        if not args.pairs:
            raise ConfigError("--sr training needs --pairs")
        pm = PairManifest.load(_need(args.pairs, "pair manifest"))
        side = min(e.lr_res for e in pm.entries) if pm.entries else None
        if side is None:
            raise DataError(f"{args.pairs}: pair manifest is empty")
        tcfg = cfg.train.to_config(cfg.seed, cfg.model.sr_loss_weight, **extra)
        mcfg = cfg.model.to_config(side, len(pm.categories), sr_enabled=True)
        ckpt = train_sr_assisted(pm, tcfg, mcfg, metrics_path=out / "metrics.csv", log=log.info)
    else:
        src = args.pairs or args.manifest
        if not src:
            raise ConfigError("--baseline training needs --manifest or --pairs")
        m = _load_dataset(src, args.side)
        side = next(iter(m.resolutions)) if m.entries else None
        if side is None:
            raise DataError(f"{src}: manifest is empty")
        tcfg = cfg.train.to_config(cfg.seed, 0.0, **extra)
        mcfg = cfg.model.to_config(side, len(m.categories), sr_enabled=False)
        ckpt = train_baseline(m, tcfg, mcfg, metrics_path=out / "metrics.csv", log=log.info)
    ckpt.provenance.update({"config_hash": cfg.hash(), "seed": cfg.seed})
    ckpt.save(ckpt_path)
    last = ckpt.history[-1] if ckpt.history else {}
    return {"checkpoint": str(ckpt_path), "steps": ckpt.step, "metrics": str(out / "metrics.csv"),
            "final_det_loss": last.get("det_loss"), "val_mAP": last.get("val_mAP")}


def cmd_eval(args, cfg: RunConfig) -> dict:
    from .evaluator import evaluate, upscale_then_detect, zero_shot_eval

    ckpt = _need(args.checkpoint, "checkpoint")
    conf = cfg.eval.conf_thr if args.conf is None else args.conf
    nms_thr = cfg.eval.nms_thr if args.nms is None else args.nms
    split = None if args.split == "all" else (args.split or cfg.eval.split)
    m = _load_dataset(args.manifest, args.side)
    if split is not None and not m.split(split).entries:
        split = None
    out = _guard(Path(args.out) if args.out else cfg.resolved_root() / "eval" / "report.json", args)
    if args.zero_shot:
        res = zero_shot_eval(ckpt, m, cfg.eval.zero_shot_thresholds, nms_thr, split)
        out.parent.mkdir(parents=True, exist_ok=True)
        doc = {**res.to_dict(), "config_hash": cfg.hash()}
        out.write_text(dumps(doc))
        return {"report": str(out), "detection_counts": doc["detection_counts"]}
    if args.upscale_with:
        rep = upscale_then_detect(m, _need(args.upscale_with, "SR checkpoint"), ckpt, conf, nms_thr, split,
                                  cfg.eval.op_thr)
    else:
        rep = evaluate(ckpt, m, conf, nms_thr, split, op_thr=cfg.eval.op_thr)
    rep.config.update({"checkpoint": str(ckpt), "config_hash": cfg.hash(), "dataset": str(m.root)})
    rep.save(out)
    return {"report": str(out), "mAP": rep.mAP, "ap": rep.ap}


def cmd_upscale(args, cfg: RunConfig) -> dict:
    from .evaluator import upscale_recursive
    from .model import Checkpoint

    if args.times < 1:
        raise ConfigError("--times must be >= 1")
    ckpt = Checkpoint.load(_need(args.checkpoint, "checkpoint"))
    src = _need(args.input, "input")
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not files:
        raise DataError(f"no PNG images in {src}")
    out = _out(args, cfg, "upscaled")
    model = ckpt.build()
    written = []
    for f in files:
        target = _guard(out / f"{f.stem}_x{2 ** args.times}.png", args)
        up = upscale_recursive(GrayImage.load_png(f), model, args.times)
        target.parent.mkdir(parents=True, exist_ok=True)
        up.save_png(target)
        written.append(str(target))
    return {"images": written}


def _annotate(report, out_dir: Path, limit: int) -> list[str]:
    from PIL import Image, ImageDraw

    root = Path(report.config.get("dataset", "."))
    paths = []
    for item in report.detections[:limit]:
        img_path = root / str(item["image"])
        if not img_path.exists():
            continue
        img = GrayImage.load_png(img_path)
        scale = max(1, 256 // img.width)
        canvas = Image.fromarray(img.to_uint8()).convert("RGB").resize((img.width * scale, img.height * scale),
                                                                       Image.NEAREST)
        draw = ImageDraw.Draw(canvas)
        side_w, side_h = canvas.size
        for cat, cx, cy, w, h, c in item["detections"]:
            if c < report.config.get("op_thr", 0.25):
                continue
            box = [(cx - w / 2) * side_w, (cy - h / 2) * side_h, (cx + w / 2) * side_w, (cy + h / 2) * side_h]
            draw.rectangle(box, outline=(255, 64, 64))
            draw.text((box[0], max(0, box[1] - 10)), f"{report.categories[cat]} {c:.2f}", fill=(255, 255, 0))
        target = out_dir / f"{Path(str(item['image'])).stem}.png"
        canvas.save(target)
        paths.append(str(target))
    return paths


def cmd_report(args, cfg: RunConfig) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluator import EvalReport, fit_time_model, throughput_report

    reports = {}
    for r in args.reports:
        p = _need(r, "report")
        reports[args.labels[len(reports)] if args.labels and len(args.labels) > len(reports) else p.stem] = \
            EvalReport.load(p)
    out = _out(args, cfg, "report")
    _guard(out / "table.csv", args)
    out.mkdir(parents=True, exist_ok=True)
    cats = next(iter(reports.values())).categories
    grid = {name: {c: rep.ap.get(c) for c in cats} | {"mAP": rep.mAP} for name, rep in reports.items()}
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category"] + list(reports))
        for c in list(cats) + ["mAP"]:
            w.writerow([c] + ["" if grid[n][c] is None else f"{grid[n][c]:.4f}" for n in reports])
    fig, axes = plt.subplots(1, len(reports), figsize=(4.5 * len(reports), 4), squeeze=False)
    for ax, (name, rep) in zip(axes[0], reports.items()):
        for c in cats:
            pts = rep.pr.get(c) or []
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"{c} ({rep.ap[c]:.2f})")
        ax.set(title=name, xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02))
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "pr_curves.png", dpi=100)
    plt.close(fig)
    annotated = {}
    for name, rep in reports.items():
        d = out / "annotated" / name
        d.mkdir(parents=True, exist_ok=True)
        annotated[name] = _annotate(rep, d, args.annotate)
    time_model = fit_time_model(cfg.eval.time_points)
    tp = throughput_report(cfg.eval.throughput_resolutions, time_model)
    with open(out / "throughput.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(tp[0]))
        w.writeheader()
        w.writerows(tp)
    doc = {"grid": grid, "throughput": tp, "time_model": {"slope": time_model.slope,
                                                          "intercept": time_model.intercept},
           "config_hash": cfg.hash()}
    (out / "report.json").write_text(dumps(doc))
    if not args.json:
        width = max(len(c) for c in list(cats) + ["mAP"])
        print("category".ljust(width), *(n[:12].rjust(12) for n in reports))
        for c in list(cats) + ["mAP"]:
            vals = ["-" if grid[n][c] is None else f"{grid[n][c]:.3f}" for n in reports]
            print(c.ljust(width), *(v.rjust(12) for v in vals))
        for row in tp:
            if row["high"] != row["low"]:
                print(f"throughput {row['high']}->{row['low']}: x{row['throughput_multiplier']:.2f}")
    return {"table": str(out / "table.csv"), "pr_curves": str(out / "pr_curves.png"),
            "throughput": str(out / "throughput.csv"), "grid": grid, "annotated": annotated}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--workers", type=int, default=1, help="cap on parallel workers")
    common.add_argument("--no-clobber", action="store_true", help="refuse to overwrite outputs")
    common.add_argument("--json", action="store_true", help="print a JSON result line")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--out", help="output directory (or report file for eval)")

    p = argparse.ArgumentParser(prog="srdefect", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, help="number of images (single split); default: config counts")
    s.add_argument("--split", default="train", choices=["train", "val", "test"])
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("augment", parents=[common], help="class-budgeted augmentation")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("prepare", parents=[common], help="build HR/LR pairs")
    s.add_argument("--manifest", required=True)
    s.add_argument("--chain", help="comma separated sides, e.g. 256,128")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train a baseline or SR-assisted model")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--pairs")
    src.add_argument("--manifest")
    kind = s.add_mutually_exclusive_group(required=True)
    kind.add_argument("--baseline", action="store_true")
    kind.add_argument("--sr", action="store_true")
    s.add_argument("--side", type=int, help="pair stage side for baseline training")
    s.add_argument("--augmented", help="augmented manifest of extra detection-only samples")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--side", type=int)
    s.add_argument("--conf", type=float)
    s.add_argument("--nms", type=float)
    s.add_argument("--split", help="split to score (default from config; 'all' for every entry)")
    s.add_argument("--upscale-with", help="SR checkpoint: upscale inputs before detecting")
    s.add_argument("--zero-shot", action="store_true", help="per-threshold reports")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("upscale", parents=[common], help="recursive SR upscaling")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--times", type=int, default=1)
    s.set_defaults(func=cmd_upscale)

    s = sub.add_parser("report", parents=[common], help="comparison tables and plots")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--labels", nargs="+")
    s.add_argument("--annotate", type=int, default=4, help="annotated images per report")
    s.set_defaults(func=cmd_report)
    return p


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .synthgen import PlacementError
    from .trainer import TrainingDivergence

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        print(f"config_hash={cfg.hash()}")
        result = args.func(args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except TrainingDivergence as exc:
        return _fail(EXIT_DIVERGED, exc)
    except (DataError, FileNotFoundError, PlacementError) as exc:
        return _fail(EXIT_DATA, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    result = {"command": args.command, "config_hash": cfg.hash(), **result}
    if args.json:
        print(json.dumps(result, default=str, sort_keys=True))
    else:
        for k, v in result.items():
            if k not in ("grid", "annotated", "ap"):
                print(f"{k}={v}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
