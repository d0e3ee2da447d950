"""Command-line entry point: ``recistseg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error. Errors go to stderr as a
single ``error: ...`` line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import appearance, grabcut, harness, metrics, recist3d, selfpaced
from .enhance import DegradeParams, classical_enhance, make_denoise_pair, make_enhance_pair
from .errors import DataError, FallbackRequired
from .trimap import TrimapMode, fallback_labels, trimap_from_bbox, trimap_from_model
from .volume_io import (Lesion, LesionRecord, Mask, Volume, apply_window, crop_and_window, read_annotations,
                        read_lesion_list, read_mask, read_volume, to_roi, write_annotations, write_volume)

log = logging.getLogger("recistseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# shared input handling


def _add_lesion_inputs(p, required=True):
    g = p.add_argument_group("lesion input")
    g.add_argument("--volume", help="volume header (.vol.json)")
    g.add_argument("--annotations", help="annotation file (.recist.json)")
    g.add_argument("--index", type=int, default=0, help="annotation record to use (default 0)")
    g.add_argument("--mask", help="optional ground-truth mask (.vol.json)")
    if not required:
        g.add_argument("--lesions", help="lesion list JSON as written by `phantom`")


def _single_lesion(args) -> Lesion:
    if not args.volume or not args.annotations:
        raise UsageError("--volume and --annotations are required")
    anns = read_annotations(args.annotations)
    if not 0 <= args.index < len(anns):
        raise DataError(f"annotation index {args.index} out of range ({len(anns)} records)")
    gt = read_mask(args.mask) if getattr(args, "mask", None) else None
    return Lesion(read_volume(args.volume), anns[args.index], gt)


def _lesions(args) -> list[Lesion]:
    if getattr(args, "lesions", None):
        return [r.load() for r in read_lesion_list(args.lesions)]
    return [_single_lesion(args)]


def _gc_params(args) -> grabcut.GrabCutParams:
    return grabcut.GrabCutParams(k_components=args.gmm_k, gamma=args.gamma, connectivity=args.conn,
                                 max_iters=args.iters, seed=args.seed)


def _add_gc_flags(p):
    g = p.add_argument_group("GrabCut")
    g.add_argument("--gamma", type=float, default=50.0)
    g.add_argument("--gmm-k", type=int, default=5)
    g.add_argument("--iters", type=int, default=5)
    g.add_argument("--conn", type=int, choices=(4, 8), default=8)


def _add_train_flags(p):
    g = p.add_argument_group("appearance model")
    g.add_argument("--lr", type=float, default=1e-2)
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--batch", type=int, default=4096)
    g.add_argument("--balance", choices=("on", "off"), default="on")
    g.add_argument("--radii", type=int, nargs="+", default=[1, 2, 4])
    g.add_argument("--stack", action="store_true", help="use the (original, denoised, enhanced) stack")


def _feature_config(args) -> appearance.FeatureConfig:
    return appearance.FeatureConfig(radii=tuple(args.radii), use_stack=args.stack)


def _sp_config(args) -> selfpaced.SelfPacedConfig:
    return selfpaced.SelfPacedConfig(
        k=args.k, features=_feature_config(args), lr=args.lr, epochs=args.epochs, batch=args.batch,
        balance=args.balance == "on", grabcut=_gc_params(args), beyond_extent=args.beyond_extent,
        seed=args.seed, threads=args.threads)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _roi_slice(les: Lesion):
    roi = crop_and_window(les.volume, les.annotation, box="recist")
    rec = to_roi(les.annotation, roi, les.volume)
    return roi, rec, roi.slice(rec.slice_index)


# --------------------------------------------------------------------------
# subcommands


def cmd_trimap(args):
    les = _single_lesion(args)
    roi, rec, img = _roi_slice(les)
    h, w = img.shape[:2]
    fallback = False
    if args.model:
        prob = appearance.predict_map(appearance.AppearanceModel.load(args.model), img)
        try:
            tm = trimap_from_model(prob, rec, rec)
        except FallbackRequired as e:
            log.warning("model trimap unusable (%s); writing fallback labels", e)
            tm, fallback = fallback_labels(prob, rec), True
    else:
        tm = trimap_from_bbox(rec, (w, h), args.mode)
    raster = tm.to_raster()[None]
    out = write_volume(Volume(raster, les.volume.spacing_mm, (roi.origin[0], roi.origin[1], rec.slice_index)),
                       args.out)
    print(json.dumps({"out": str(out), "counts": tm.counts(), "ignored": int(tm.ignore.sum()), "fallback": fallback},
                     sort_keys=True))


def cmd_segment2d(args):
    les = _single_lesion(args)
    roi, rec, img = _roi_slice(les)
    h, w = img.shape[:2]
    tm = trimap_from_bbox(rec, (w, h), args.mode)
    lab, hist = grabcut.run(img, tm, _gc_params(args))
    nx, ny, nz = les.volume.dims
    full = np.zeros((nz, ny, nx), np.uint8)
    x0, y0 = roi.origin[0] - les.volume.origin[0], roi.origin[1] - les.volume.origin[1]
    full[rec.slice_index, y0:y0 + h, x0:x0 + w] = lab
    out = write_volume(Mask(full, les.volume.spacing_mm, les.volume.origin), args.out)
    report = {"out": str(out), "foreground_px": int(lab.sum()),
              "energy": [{"data": e.data_term, "smoothness": e.smoothness_term, "total": e.total} for e in hist]}
    if les.mask is not None:
        z = rec.slice_index
        report["dice_slice"] = metrics.dice(full[z], np.asarray(les.mask.data)[z])
    print(json.dumps(report, sort_keys=True))


def cmd_segment3d(args):
    lesions = _lesions(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _sp_config(args)
    summary = {"lesions": []}
    model = None
    if args.method == "self-paced":
        if args.model:
            model = appearance.AppearanceModel.load(args.model)
        else:
            models, hlog = selfpaced.run(lesions, cfg)
            model = models[-1]
            (out / "harvest.json").write_text(hlog.to_json() + "\n")
            (out / "harvest.csv").write_text(hlog.to_csv())
            model.save(out / "model.json")
    for i, les in enumerate(lesions):
        if model is None:
            m = selfpaced.grabcut_3de(les, cfg)
        else:
            m = selfpaced.segment_volume(les, model, cfg, use_gc=not args.no_gc)
        name = les.lesion_id or f"lesion{i:03d}"
        p = write_volume(m, out / f"{name}.mask.vol.json")
        row = {"lesion_id": name, "mask": p.name, "volume_mm3": metrics.mask_volume(m)}
        if les.mask is not None:
            row["dice"] = metrics.dice(m, les.mask)
        summary["lesions"].append(row)
    _write_json(out / "segment3d.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args):
    lesions = _lesions(args)
    cfg = _sp_config(args)
    ts = appearance.TrainSet()
    for les in lesions:
        s = selfpaced.recist_slice_label(selfpaced.prepare(les), cfg.grabcut)
        ts.add(s.image, s.labels, s.ignore)
    model = appearance.train(ts, cfg.features, **cfg.train_kwargs(0))
    model.save(args.out)
    print(json.dumps({"out": args.out, "loss": model.meta["loss_curve"][-1], "items": len(ts)}, sort_keys=True))


def cmd_estimate(args):
    anns = read_annotations(args.annotations)
    if not 0 <= args.index < len(anns):
        raise DataError(f"annotation index {args.index} out of range")
    ann = anns[args.index]
    if args.volume:
        spacing = read_volume(args.volume).spacing_mm
    elif args.spacing:
        spacing = tuple(args.spacing)
    else:
        raise UsageError("give --volume or --spacing")
    r3 = recist3d.estimate(ann, spacing, args.offsets)
    rows = []
    for t in r3.offsets:
        a = r3[t]
        lo, sh = a.lengths_mm(spacing)
        rows.append({"tau": t, "within_extent": r3.within_extent(t), "long_mm": lo, "short_mm": sh,
                     "annotation": a.to_dict()})
    lo, hi = recist3d.extent(r3)
    _write_json(args.out, {"extent": [lo, hi], "offsets": rows})
    print(json.dumps({"out": args.out, "extent": [lo, hi]}))


def cmd_evaluate(args):
    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt need the same number of masks")
    rows = []
    for p, g in zip(args.pred, args.gt):
        pm, gm = read_mask(p), read_mask(g)
        prec, rec = metrics.precision_recall(pm, gm)
        row = {"pred": p, "gt": g, "dice": metrics.dice(pm, gm), "precision": prec, "recall": rec,
               "vs": metrics.volumetric_similarity(pm, gm)}
        try:
            row["avd_mm"] = metrics.avg_hausdorff(pm, gm, gm.spacing_mm)
        except DataError:
            row["avd_mm"] = float("nan")
        rows.append(row)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness._write_csv(out / "evaluation.csv", rows)
    agg = {}
    for k in ("dice", "precision", "recall", "vs", "avd_mm"):
        vals = np.array([r[k] for r in rows], float)
        vals = vals[np.isfinite(vals)]
        agg[k] = {"mean": float(vals.mean()) if len(vals) else None,
                  "std": float(vals.std()) if len(vals) else None}
    _write_json(out / "evaluation.json", {"n": len(rows), "metrics": agg})
    print(json.dumps(agg, sort_keys=True))


def _image_2d(path, z, window) -> np.ndarray:
    v = read_volume(path)
    sl = np.asarray(v.slice(z if z is not None else v.dims[2] // 2), dtype=np.float64)
    if sl.ndim != 2:
        raise DataError("expected a single-channel volume")
    if np.issubdtype(v.data.dtype, np.integer):
        sl = apply_window(sl, *window)
    return sl, v.spacing_mm


def cmd_degrade(args):
    img, spacing = _image_2d(args.image, args.slice, args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.n):
        seed = args.seed + i
        if args.noise_sigma or args.scale or args.blur or args.kappa:
            d = DegradeParams()
            params = DegradeParams(args.noise_sigma or d.noise_sigma, args.scale or d.scale,
                                   args.blur or d.blur_sigma, args.kappa or d.contrast_kappa, seed)
        else:
            params = DegradeParams.sample(seed)
        fn = make_denoise_pair if args.mode == "denoise" else make_enhance_pair
        x, y = fn(img, params)
        write_volume(Volume(x[None].astype(np.float32), spacing), out / f"pair{i:03d}_input.vol.json")
        write_volume(Volume(y[None].astype(np.float32), spacing), out / f"pair{i:03d}_target.vol.json")
        rows.append({"pair": i, "noise_sigma": params.noise_sigma, "scale": params.scale,
                     "blur_sigma": params.blur_sigma, "contrast_kappa": params.contrast_kappa, "seed": params.seed})
    harness._write_csv(out / "pairs.csv", rows)
    print(json.dumps({"out": str(out), "pairs": len(rows)}))


def cmd_enhance(args):
    v = read_volume(args.volume)
    data = np.asarray(v.data, dtype=np.float64)
    if data.ndim != 3:
        raise DataError("expected a single-channel volume")
    if np.issubdtype(v.data.dtype, np.integer):
        data = apply_window(data, *args.window)
    stack = np.stack([classical_enhance(s).as_array() for s in data], axis=0)  # (nz, ny, nx, 3)
    out = write_volume(Volume(np.moveaxis(stack, -1, 0).astype(np.float32), v.spacing_mm, v.origin), args.out)
    print(json.dumps({"out": str(out), "channels": ["original", "denoised", "enhanced"]}))


def cmd_phantom(args):
    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("dims", "spacing_mm", "size_mm", "z_scale", "aspect"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    specs = harness.random_phantom_specs(args.n, args.seed, shape=args.shape, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, anns = [], []
    for s in specs:
        vol, mask, rec = harness.generate_phantom(s)
        write_volume(vol, out / f"{s.lesion_id}.vol.json")
        write_volume(mask, out / f"{s.lesion_id}.mask.vol.json")
        anns.append(rec)
        records.append(LesionRecord(f"{s.lesion_id}.vol.json", rec, f"{s.lesion_id}.mask.vol.json").to_dict())
    write_annotations(anns, out / "annotations.recist.json")
    _write_json(out / "lesions.json", records)
    print(json.dumps({"out": str(out), "lesions": len(records)}))


def cmd_split(args):
    recs = json.loads(Path(args.lesions).read_text())
    pids = [LesionRecord.from_dict(d).annotation.patient_id for d in recs]
    folds = harness.kfold_split(pids, args.k, args.seed)
    for d, f in zip(recs, folds):
        d["fold"] = f
    _write_json(args.out, recs)
    print(json.dumps({"out": args.out, "fold_sizes": np.bincount(folds, minlength=args.k).tolist()}))


def cmd_experiment(args):
    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg["name"] = args.name
    cfg.setdefault("seed", args.seed)
    if args.seed_given:
        cfg["seed"] = args.seed
    cfg.setdefault("threads", args.threads)
    for key in ("n", "k"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if args.data:
        cfg["data"] = args.data
    result = harness.run_experiment(cfg, args.out)
    print(json.dumps({"out": args.out, "experiment": args.name, "seed": result["seed"]}))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="worker cap (default: logical cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="recistseg", description="Lesion segmentation from RECIST marks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("trimap", parents=[common], help="build a trimap raster for the RECIST slice")
    _add_lesion_inputs(s)
    s.add_argument("--mode", choices=[m.value for m in TrimapMode], default="recist-r")
    s.add_argument("--model", help="build the trimap from this appearance model's prediction instead")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_trimap)

    s = sub.add_parser("segment2d", parents=[common], help="GrabCut on the RECIST slice")
    _add_lesion_inputs(s)
    _add_gc_flags(s)
    s.add_argument("--mode", choices=[m.value for m in TrimapMode if m is not TrimapMode.RecistDilateOnly],
                   default="recist-r")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment2d)

    s = sub.add_parser("segment3d", parents=[common], help="self-paced 3D segmentation")
    _add_lesion_inputs(s, required=False)
    _add_gc_flags(s)
    _add_train_flags(s)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--beyond-extent", choices=selfpaced.BEYOND_EXTENT, default="skip")
    s.add_argument("--no-gc", action="store_true", help="threshold model output without GrabCut")
    s.add_argument("--method", choices=("self-paced", "grabcut-3de"), default="self-paced")
    s.add_argument("--model", help="segment with this model instead of training one")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_segment3d)

    s = sub.add_parser("train-appearance", parents=[common], help="train on RECIST-slice GrabCut labels")
    _add_lesion_inputs(s, required=False)
    _add_gc_flags(s)
    _add_train_flags(s)
    s.set_defaults(k=0, beyond_extent="skip")
    s.add_argument("--out", required=True, help="model JSON")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("estimate-recist", parents=[common], help="project RECIST onto neighbouring slices")
    s.add_argument("--annotations", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--volume", help="take spacing from this volume")
    s.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"))
    s.add_argument("--offsets", type=int, default=6, help="estimate for offsets -N..N")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", parents=[common], help="overlap and distance metrics")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("degrade", parents=[common], help="synthesise degraded/clean training pairs")
    s.add_argument("--image", required=True, help="volume to sample slices from")
    s.add_argument("--slice", type=int)
    s.add_argument("--window", type=float, nargs=2, default=(-160.0, 240.0))
    s.add_argument("--mode", choices=("denoise", "enhance"), required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--scale", type=float)
    s.add_argument("--blur", type=float)
    s.add_argument("--kappa", type=float)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("enhance", parents=[common], help="three-channel (original, denoised, enhanced) stack")
    s.add_argument("--volume", required=True)
    s.add_argument("--window", type=float, nargs=2, default=(-160.0, 240.0))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("phantom", parents=[common], help="write synthetic lesions with ground truth")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--shape", choices=harness.SHAPES, default="ellipsoid")
    s.add_argument("--config", help="JSON of phantom overrides (e.g. blur_px, dims)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("split", parents=[common], help="patient-level k-fold assignment")
    s.add_argument("--lesions", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("experiment", parents=[common], help="run a named experiment")
    s.add_argument("name", choices=harness.EXPERIMENTS)
    s.add_argument("--config", help="experiment config JSON")
    s.add_argument("--n", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--data", help="lesion list JSON to use instead of phantoms")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given")
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = 0
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, FallbackRequired, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        # bad parameter values caught by the library
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
