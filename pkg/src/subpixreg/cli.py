"""Command-line entry point: ``subpixreg <command> ...``."""

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .affine import MotionModel
from .image import RegionSpec, extract_region, load_pgm, save_pgm
from .spline import build_pyramid
from .stability import SCHEMA_VERSION, BatchConfig, build_report, emit_report, read_measurements, run_batch
from .synth import (DriftSchedule, SceneSpec, campaign_schedule, desk_regions, desk_scene, image_id,
                    make_sequence)
from .tru import TruConfig, register_tru
from .xreg import BoxSpec, XregError, register_xreg, select_boxes

logger = logging.getLogger("subpixreg")

SEED_ENV = "SUBPIXREG_SEED"


def _load_json(path):
    return json.loads(Path(path).read_text()) if path else {}


def cmd_synth(args):
    cfg = _load_json(args.config)
    seed = int(os.environ.get(SEED_ENV, cfg.get("seed", 0)))
    if "scene" in cfg:
        scene_cfg = dict(cfg["scene"])
        scene_cfg["seed"] = seed
        spec = SceneSpec.from_dict(scene_cfg)
    else:
        desk = cfg.get("desk", {})
        spec = desk_scene(seed=seed, scale=desk.get("scale", 1), psf_sigma=desk.get("psf_sigma", 1.2),
                          noise_sigma=desk.get("noise_sigma", 0.0))
    if "regions" in cfg:
        regions = [RegionSpec.from_dict(r) for r in cfg["regions"]]
    else:
        regions = desk_regions(cfg.get("desk", {}).get("scale", 1))
    pitch = float(cfg.get("pixel_pitch_um", 3.0))
    if "schedule" in cfg:
        schedule = DriftSchedule.from_dict(cfg["schedule"])
    else:
        camp = cfg.get("campaign", {})
        schedule = campaign_schedule(
            [r.name for r in regions], n_days=camp.get("days", 6), images_per_day=camp.get("images_per_day", 10),
            pixel_pitch_um=pitch, seed=seed, common_um=camp.get("common_um", 4.5),
            jitter_um=camp.get("jitter_um", 0.3), theta_max_deg=camp.get("theta_max_deg", 0.05),
            region_offsets_um={k: tuple(v) for k, v in camp.get("region_offsets_um", {}).items()},
        )
    out = Path(args.out)
    rows = make_sequence(spec, schedule, regions, out)

    reference = load_pgm(out / f"{image_id(0)}.pgm")
    boxes = {r.name: [b.to_dict() for b in select_boxes(extract_region(reference, r), prefix=f"{r.name}_box")]
             for r in regions}
    batch = {
        "schema_version": SCHEMA_VERSION,
        "reference": f"{image_id(0)}.pgm",
        "inputs": [{"id": image_id(i), "path": f"{image_id(i)}.pgm", "day": schedule.day(i)}
                   for i in range(schedule.n_images)],
        "regions": [r.to_dict() for r in regions],
        "boxes": boxes,
        "method": cfg.get("method", "both"),
        "pixel_pitch_um": pitch,
        "tru": TruConfig.from_dict(cfg.get("tru")).to_dict(),
        "workers": 1,
        "requirement_um": float(cfg.get("requirement_um", 0.4)),
    }
    (out / "campaign.json").write_text(json.dumps(batch, indent=2) + "\n")
    (out / "scene.json").write_text(json.dumps({"scene": spec.to_dict(), "schedule": schedule.to_dict()},
                                               indent=2) + "\n")
    print(f"wrote {schedule.n_images} images, {len(rows)} manifest rows and campaign.json to {out}")
    return 0


def _tru_config(args):
    return TruConfig(depth=args.depth, model=MotionModel.coerce(args.model))


def cmd_register_tru(args):
    ref = load_pgm(args.ref)
    img = load_pgm(args.input)
    res = register_tru(ref, img, _tru_config(args))
    print(f"tx_px={res.tx_px:.6f} ty_px={res.ty_px:.6f} theta_deg={res.theta_deg:.6f} "
          f"cost={res.final_cost:.6g} converged={int(res.converged)}")
    if args.verbose:
        for level, iters, cost in res.per_level:
            print(f"  level {level}: {iters} iterations, cost {cost:.6g}")
    return 0 if res.converged else 1


def cmd_register_xreg(args):
    ref = load_pgm(args.ref)
    img = load_pgm(args.input)
    if args.boxes:
        boxes = [BoxSpec.from_dict(b) for b in _load_json(args.boxes)]
    else:
        boxes = select_boxes(ref, n=args.n_boxes, half_size=args.half_size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if not args.verbose else "default")
        try:
            res = register_xreg(ref, img, boxes, r=args.radius, normalized=not args.raw)
        except XregError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    print(f"tx_px={res.tx_px:.6f} ty_px={res.ty_px:.6f} boxes_used={res.n_used}/{len(boxes)}")
    if args.verbose:
        for box, (dx, dy) in zip(boxes, res.per_box):
            print(f"  {box.name}: dx={dx:.4f} dy={dy:.4f}")
    return 0


def _print_summary(report, strict):
    summary = report.summary()
    verdict = "PASS" if summary["within_requirement"] else "FAIL"
    print(f"measurements: {summary['n_measurements']} ({summary['n_failed']} failed)")
    print(f"max relative quad-crux drift: {summary['max_rel_um']:.4f} um, "
          f"rms {summary['rms_rel_um']:.4f} um; requirement {summary['requirement_um']} um: {verdict}")
    return 1 if strict and not summary["within_requirement"] else 0


def cmd_run(args):
    cfg = BatchConfig.load(args.config)
    if args.method:
        cfg.method = args.method
    if args.requirement_um is not None:
        cfg.requirement_um = args.requirement_um
    report = run_batch(cfg, workers=args.workers)
    emit_report(report, args.out)
    return _print_summary(report, args.strict)


def cmd_report(args):
    rows = read_measurements(args.measurements)
    report = build_report(rows, args.pitch_um, args.requirement_um)
    emit_report(report, args.out)
    return _print_summary(report, args.strict)


def cmd_pyramid(args):
    img = load_pgm(args.input)
    pyr = build_pyramid(img, args.depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, level in enumerate(pyr.levels):
        # filter overshoot can leave [0, 65535]; debug dumps clip explicitly
        save_pgm(np.clip(level, 0, 65535), out / f"level{k}.pgm")
        print(f"level {k}: {level.shape[1]}x{level.shape[0]}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="subpixreg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic drift campaign")
    p.add_argument("--config", help="scene/campaign JSON (defaults to the desk scene)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name, func in (("register-tru", cmd_register_tru), ("register-xreg", cmd_register_xreg)):
        p = sub.add_parser(name, help=f"register a single image pair ({name[9:].upper()})")
        p.add_argument("--ref", required=True)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        if name == "register-tru":
            p.add_argument("--depth", type=int, default=4)
            p.add_argument("--model", default="rigid", choices=[m.value for m in MotionModel])
        else:
            p.add_argument("--boxes", help="JSON list of boxes (x, y, half_size)")
            p.add_argument("--n-boxes", type=int, default=9)
            p.add_argument("--half-size", type=int, default=16)
            p.add_argument("--radius", type=int, default=2)
            p.add_argument("--raw", action="store_true", help="raw product correlation")

    p = sub.add_parser("run", help="register a campaign and write the stability report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["tru", "xreg", "both"])
    p.add_argument("--workers", type=int)
    p.add_argument("--requirement-um", type=float)
    p.add_argument("--strict", action="store_true", help="exit 1 when the drift requirement fails")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="rebuild report files from measurements.csv")
    p.add_argument("--measurements", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pitch-um", type=float, default=3.0)
    p.add_argument("--requirement-um", type=float, default=0.4)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pyramid", help="dump spline pyramid levels as PGM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pyramid)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
