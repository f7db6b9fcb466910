"""Batch command-line front end.

Single binary with subcommands that chain into the full pipeline: fit a
camera model from a vendor table, bake warp look-up tables, warp/unwarp
images, detect/describe/match features, build keypoint supersets, synthesize
test sets and run the benchmark. Every run writes a manifest echoing the
resolved configuration; data outputs are byte-reproducible for a fixed seed.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__, adapt, camera, evalbench, features, image, warp
from .errors import FkbError

USAGE_ERROR, DATA_ERROR, INTERNAL_ERROR = 1, 2, 3


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir, subcommand: str, args: argparse.Namespace,
                    inputs=()) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in vars(args).items() if k != "func"}
    manifest = {
        "tool": "fkb",
        "version": __version__,
        "subcommand": subcommand,
        "config": resolved,
        "input_digests": {str(p): _digest(p) for p in inputs},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2),
                                           encoding="utf-8")


def _load_model(path) -> camera.FisheyeModel:
    return camera.FisheyeModel.load(path)


def cmd_fit_model(args) -> int:
    table = camera.read_remap_table(args.table)
    model, fit = camera.fit_from_remap_table(
        table, (args.cx, args.cy), args.pinhole_f, order=args.order,
        width=args.width, height=args.height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    _write_manifest(out, "fit-model", args, inputs=[args.table])
    print(f"fitted order-{args.order} model, rms residual "
          f"{fit.rms_residual:.3e} px -> {out / 'model.json'}")
    return 0


def cmd_bake_luts(args) -> int:
    model = _load_model(args.model)
    pairs = warp.bake_lut_set(model, args.count, args.seed,
                              rot_range_deg=args.rot_deg,
                              trans_range=args.trans)
    warp.save_lut_set(pairs, args.out, args.seed, args.rot_deg, args.trans)
    _write_manifest(args.out, "bake-luts", args, inputs=[args.model])
    print(f"baked {args.count} LUT pairs -> {args.out}")
    return 0


def cmd_warp(args, direction: str) -> int:
    field = warp.WarpField.load(args.lut)
    img = image.load(args.input)
    if direction == "inverse":
        # the stored pair convention: forward file warps, inverse file unwarps
        pass
    out_img = warp.apply_warp(img, field)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dst = out / Path(args.input).name
    image.save(out_img, dst)
    _write_manifest(out, "warp" if direction == "forward" else "unwarp",
                    args, inputs=[args.lut, args.input])
    print(f"wrote {dst}")
    return 0


def cmd_detect(args) -> int:
    img = image.load(args.input)
    if args.resize:
        w, h = (int(v) for v in args.resize.split("x"))
        img = image.resize_bilinear(img, w, h)
    params = {}
    if args.algo == "fast":
        params["threshold"] = args.fast_threshold
    kps = features.detect_keypoints(img, args.algo, args.nms, args.k, **params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dst = out / (Path(args.input).stem + "_keypoints.csv")
    kps.save_csv(dst)
    _write_manifest(out, "detect", args, inputs=[args.input])
    print(f"{len(kps)} keypoints -> {dst}")
    return 0


def cmd_describe(args) -> int:
    img = image.load(args.input)
    kps = features.KeypointSet.load_csv(args.keypoints)
    kept, desc = features.describe_brief(img, kps, pattern_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    kept.save_csv(out / f"{stem}_keypoints.csv")
    desc.save(out / f"{stem}_desc.fdsc")
    _write_manifest(out, "describe", args, inputs=[args.input, args.keypoints])
    print(f"{len(kept)} descriptors -> {out / (stem + '_desc.fdsc')}")
    return 0


def cmd_match(args) -> int:
    desc_a = features.DescriptorSet.load(args.desc_a)
    desc_b = features.DescriptorSet.load(args.desc_b)
    matches = features.match_nn(desc_a, desc_b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dst = out / "matches.csv"
    with open(dst, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index_a", "index_b", "desc_distance"])
        for a, b, d in zip(matches.idx_a, matches.idx_b, matches.desc_distance):
            writer.writerow([a, b, d])
    _write_manifest(out, "match", args, inputs=[args.desc_a, args.desc_b])
    print(f"{len(matches)} matches -> {dst}")
    return 0


def cmd_adapt(args) -> int:
    model = _load_model(args.model)
    luts, _ = warp.load_lut_set(args.luts)
    cfg = adapt.AdaptationConfig(
        n_warps=args.n_warps, base_algo=args.base_algo, nms_size=args.nms,
        k=args.k, superset_threshold=args.threshold,
        accumulation=args.accumulation)
    paths = image.ingest_sequence(args.images, stride=args.stride,
                                  limit=args.limit)
    adapt.adapt_corpus(paths, model, luts, cfg, args.out, seed=args.seed)
    _write_manifest(args.out, "adapt", args, inputs=[args.model])
    print(f"adapted {len(paths)} images -> {args.out}")
    return 0


def cmd_make_testset(args) -> int:
    paths = image.ingest_sequence(args.images, stride=1, limit=args.count)
    model = _load_model(args.model) if args.model else None
    imgs = []
    for p in paths:
        img = image.load(p)
        if model is not None and img.shape != (model.height, model.width):
            img = image.resize_bilinear(img, model.width, model.height)
        imgs.append(img)
    luts = None
    if args.mode == "viewpoint":
        luts, _ = warp.load_lut_set(args.luts)
    pairs = evalbench.make_testset(imgs, args.seed, args.mode, luts=luts,
                                   model=model)
    evalbench.save_testset(pairs, args.out, model=model)
    _write_manifest(args.out, "make-testset", args)
    print(f"{len(pairs)} {args.mode} pairs -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    pairs, _ = evalbench.load_testset(args.testset)
    cfg = evalbench.EvalConfig(epsilon=args.epsilon, k=args.k,
                               nms_size=args.nms)
    external = None
    if args.external_a and args.external_b:
        external = {}
        for pair in pairs:
            external[pair.pair_id] = (
                features.load_external(
                    args.external_a.format(pair=pair.pair_id) + ".csv",
                    args.external_a.format(pair=pair.pair_id) + ".fdsc"),
                features.load_external(
                    args.external_b.format(pair=pair.pair_id) + ".csv",
                    args.external_b.format(pair=pair.pair_id) + ".fdsc"),
            )
    report = evalbench.run_benchmark(
        pairs, cfg, algorithm=args.algo,
        describe=args.metric in ("matching", "homography", "all"),
        estimate_h=args.metric in ("homography", "all"),
        external=external, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv", cfg)
    report.to_json(out / "report.json")
    _write_manifest(out, "eval", args)
    agg = report.aggregates
    print(f"repeatability {agg['repeatability']:.4f}  m_c {agg['m_c']:.4f}  "
          f"h_c {agg['h_c']:.4f}  rmse {agg['rmse']:.4f}")
    return 0


def cmd_report(args) -> int:
    groups = defaultdict(list)
    for path in args.reports:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (row["algorithm"], row["condition"], row["nms"],
                       row["k"])
                groups[key].append(row)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dst = out / "summary.csv"
    with open(dst, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "condition", "nms", "k", "n_pairs",
                         "repeatability", "m_c", "h_c", "rmse"])
        for (algo, cond, nms, k), rows in sorted(groups.items()):
            reps = [float(r["repeatability"]) for r in rows
                    if r["repeatability"] != "nan"]
            mcs = [float(r["m_c"]) for r in rows if r["m_c"] != "nan"]
            hcs = [float(r["h_correct"]) for r in rows if r["h_correct"]]
            rmses = [float(r["rmse_pair"]) for r in rows
                     if r["rmse_pair"] != "nan"]
            writer.writerow([
                algo, cond, nms, k, len(rows),
                f"{np.mean(reps):.6f}" if reps else "nan",
                f"{np.mean(mcs):.6f}" if mcs else "nan",
                f"{np.mean(hcs):.6f}" if hcs else "nan",
                f"{math.sqrt(np.mean(np.square(rmses))):.6f}" if rmses
                else "nan",
            ])
    _write_manifest(out, "report", args, inputs=args.reports)
    print(f"summary -> {dst}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fkb", description="fisheye warping and keypoint benchmark")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("FKB_THREADS", "0")),
                        help="worker threads (0 = auto); recorded in the "
                             "manifest")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("fit-model", help="fit a model from a vendor table")
    p.add_argument("table")
    p.add_argument("--pinhole-f", type=float, required=True)
    p.add_argument("--cx", type=float, required=True)
    p.add_argument("--cy", type=float, required=True)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--out", default="fit_out")
    p.set_defaults(func=cmd_fit_model)

    p = sub.add_parser("bake-luts", help="precompute warp look-up tables")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--rot-deg", type=float, default=30.0)
    p.add_argument("--trans", type=float, default=0.3)
    p.add_argument("--out", default="luts")
    p.set_defaults(func=cmd_bake_luts)

    for name, direction in (("warp", "forward"), ("unwarp", "inverse")):
        p = sub.add_parser(name, help=f"{name} an image through a LUT")
        p.add_argument("input")
        p.add_argument("--lut", required=True)
        p.add_argument("--out", default=f"{name}_out")
        p.set_defaults(func=lambda a, d=direction: cmd_warp(a, d))

    p = sub.add_parser("detect", help="run a detector with NMS and top-k")
    p.add_argument("input")
    p.add_argument("--algo", choices=features.DETECTOR_NAMES, default="harris")
    p.add_argument("--nms", type=int, default=4)
    p.add_argument("--k", type=int, default=300)
    p.add_argument("--fast-threshold", type=int, default=20)
    p.add_argument("--resize", help="WxH, e.g. 512x512")
    p.add_argument("--out", default="detect_out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("describe", help="binary patch descriptors")
    p.add_argument("input")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--out", default="describe_out")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("match", help="nearest-neighbour matching")
    p.add_argument("--desc-a", required=True)
    p.add_argument("--desc-b", required=True)
    p.add_argument("--out", default="match_out")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("adapt", help="keypoint superset generation")
    p.add_argument("--images", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--luts", required=True)
    p.add_argument("--n-warps", type=int, default=100)
    p.add_argument("--base-algo", choices=features.DETECTOR_NAMES,
                   default="harris")
    p.add_argument("--nms", type=int, default=4)
    p.add_argument("--k", type=int, default=300)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--accumulation", choices=("point-vote", "heatmap"),
                   default="point-vote")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", default="adapt_out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("make-testset", help="synthesize evaluation pairs")
    p.add_argument("--images", required=True)
    p.add_argument("--mode", choices=("illumination", "viewpoint"),
                   required=True)
    p.add_argument("--count", type=int, default=300)
    p.add_argument("--model")
    p.add_argument("--luts")
    p.add_argument("--out", default="testset")
    p.set_defaults(func=cmd_make_testset)

    p = sub.add_parser("eval", help="run the benchmark on a test set")
    p.add_argument("--testset", required=True)
    p.add_argument("--algo", choices=features.DETECTOR_NAMES, default="harris")
    p.add_argument("--metric",
                   choices=("repeatability", "matching", "homography", "all"),
                   default="all")
    p.add_argument("--nms", type=int, default=4)
    p.add_argument("--k", type=int, default=300)
    p.add_argument("--epsilon", type=float, default=3.0)
    p.add_argument("--external-a",
                   help="path template with {pair}, no extension")
    p.add_argument("--external-b",
                   help="path template with {pair}, no extension")
    p.add_argument("--out", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge report CSVs into a summary")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default="report_out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except FkbError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (OSError, ValueError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return DATA_ERROR
    except Exception as exc:  # pragma: no cover - safety net
        print(f"error[internal]: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
