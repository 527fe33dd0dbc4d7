"""Command-line interface.

Exit codes: 0 success, 2 bound or correctness violation, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import numpy as np

from .bitimage import BitImage
from .camera import CameraIntrinsics, PoseBox
from .certify import CertificateBundle
from .target import TargetSpecError, load_target, parse_target_spec, validate_target

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 2, 3
SHIPPED_CONFIGS = ("certify_desk", "cluttered_desk", "ggm_desk", "certify_smoke")


def _shipped_config_path(name: str) -> str | None:
    if name in SHIPPED_CONFIGS:
        return str(resources.files("ggmcert") / "configs" / f"{name}.json")
    return None


def _load_config(args, kind: str | None = None):
    from .experiments import ScenarioConfig

    path = getattr(args, "config", None)
    if path is None:
        cfg = ScenarioConfig(kind=kind or "certify")
        cfg.validate()
    else:
        cfg = ScenarioConfig.load(_shipped_config_path(path) or path)
    if kind is not None and cfg.kind != kind:
        cfg = ScenarioConfig.from_dict({**cfg.to_dict(), "kind": kind}, cfg.base_dir)
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    return cfg


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _floats(values, n, what):
    if values is None:
        return None
    if len(values) != n:
        raise ValueError(f"{what} needs {n} numbers, got {len(values)}")
    return [float(v) for v in values]


# -- subcommands -------------------------------------------------------------


def cmd_validate_target(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as fh:
            t = parse_target_spec(fh.read())
    except FileNotFoundError:
        print(f"no such file: {args.spec}", file=sys.stderr)
        return EXIT_CONFIG
    except TargetSpecError as exc:
        print(f"{args.spec}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rep = validate_target(t)
    _emit({"target": t.name, "polygons": t.size, "vertices": t.vertex_count, **rep.to_dict()}, args.out)
    return EXIT_OK if rep.ok else EXIT_VIOLATION


def cmd_render(args) -> int:
    from .raster import InvisiblePolygonError, decode

    cfg = _load_config(args)
    t = load_target(args.target) if args.target else cfg.load_target()
    k = cfg.camera_model()
    if args.width or args.height or args.focal:
        k = CameraIntrinsics(args.focal or k.f, args.width or k.W, args.height or k.H)
    try:
        img = decode(t, args.pose, k, strict=not args.clip)
    except InvisiblePolygonError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VIOLATION
    data = img.to_pbm()
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)
    return EXIT_OK


def cmd_train(args) -> int:
    from .encoder import encoder_lipschitz_bound, save_checkpoint, train_encoder

    cfg = _load_config(args)
    t, k, box = cfg.load_target(), cfg.camera_model(), cfg.pose_box()
    tc = cfg.train_config()
    enc = train_encoder(t, box, k, tc, log=lambda s: print(s, file=sys.stderr))
    out = args.out or "encoder.bin"
    save_checkpoint(enc, out, {"train": tc.to_dict(), "L_E": encoder_lipschitz_bound(enc, cfg.weights())})
    print(json.dumps({"checkpoint": out, "final_loss": enc.history[-1] if enc.history else None}))
    return EXIT_OK


def cmd_certify(args) -> int:
    from .certify import scenario_hash
    from .encoder import encoder_lipschitz_bound, load_checkpoint, train_encoder
    from .experiments import grid_pass, lipschitz_for, step_for, weighted_step
    from .reach import grid_sample

    cfg = _load_config(args, "certify")
    t, k, box, w = cfg.load_target(), cfg.camera_model(), cfg.pose_box(), cfg.weights()
    L_D, lip = lipschitz_for(cfg, t, box, k)
    h = step_for(cfg, box, L_D)
    enc = load_checkpoint(args.encoder) if args.encoder else train_encoder(t, box, k, cfg.train_config())
    gp = grid_pass(t, grid_sample(box, h, L_D, w), k, enc, w)
    cert = CertificateBundle(
        eta=weighted_step(h, w, box),
        delta=gp.delta,
        L_D=L_D,
        L_E=encoder_lipschitz_bound(enc, w),
        eps=gp.eps,
        nbar=float(args.nbar if args.nbar is not None else 0.0),
        L_D_provenance=lip["provenance"],
        L_D_safety=lip.get("safety"),
        pose_weights=w.tolist(),
        scenario_hash=scenario_hash(t, k, box, cfg.seeds()),
    )
    _emit({"certificate": cert.to_dict(), "step": h.tolist(), "lipschitz_decoder": lip}, args.out)
    return EXIT_OK


def _box_and_step(args, cfg):
    box = cfg.pose_box()
    if args.box:
        box = PoseBox(args.box[:6], args.box[6:])
    h = np.asarray(args.step if args.step else cfg.h, dtype=np.float64) if (args.step or cfg.h is not None) else None
    return box, h


def cmd_reach(args) -> int:
    from .reach import GridStepError, forward_reach

    cfg = _load_config(args)
    t, k = cfg.load_target(), cfg.camera_model()
    box, h = _box_and_step(args, cfg)
    if h is None:
        print("reach needs --step (or h in the config)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rs = forward_reach(t, box, k, h if h.size == 6 else float(h.ravel()[0]), args.lipschitz, cfg.weights())
    except GridStepError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or "reach"
    rs.save(out)
    print(json.dumps({"out": out, "unique_images": len(rs), "grid_poses": int(sum(rs.counts))}))
    return EXIT_OK


def cmd_mask(args) -> int:
    from .detect import build_mask
    from .reach import GridStepError

    cfg = _load_config(args)
    t, k = cfg.load_target(), cfg.camera_model()
    box, h = _box_and_step(args, cfg)
    if h is None:
        print("mask needs --step (or h in the config)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        m = build_mask(box, t, k, h if h.size == 6 else float(h.ravel()[0]), args.lipschitz, cfg.weights())
    except GridStepError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or "mask.pbm"
    with open(out, "wb") as fh:
        fh.write(m.image.to_pbm())
    print(json.dumps({"out": out, **m.to_dict()}))
    return EXIT_OK


def cmd_detect(args) -> int:
    from .detect import Detector
    from .encoder import load_checkpoint

    cfg = _load_config(args)
    t, k = cfg.load_target(), cfg.camera_model()
    box = cfg.pose_box()
    with open(args.certificate, encoding="utf-8") as fh:
        doc = json.load(fh)
    cert = CertificateBundle.from_dict(doc.get("certificate", doc))
    h = np.asarray(doc["step"]) if "step" in doc else np.asarray(cfg.h, dtype=np.float64)
    enc = load_checkpoint(args.encoder)
    det = Detector(t, k, box, enc, cert, h, tau=args.tau if args.tau is not None else cfg.tau, weights=cfg.weights())
    results = []
    for path in args.images:
        with open(path, "rb") as fh:
            img = BitImage.from_pbm(fh.read())
        results.append({"image": path, **det.detect(img).to_dict()})
    _emit(results if len(results) != 1 else results[0], args.out)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .detect import cluttered_detect
    from .experiments import PartitionInvalid, build_pipeline

    cfg = _load_config(args, "cluttered")
    model = build_pipeline(cfg, log=lambda s: print(s, file=sys.stderr))
    if not model.partition_report.ok and cfg.on_invalid_partition == "abort":
        print(json.dumps(model.partition_report.to_dict()), file=sys.stderr)
        raise PartitionInvalid(model.partition_report)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for path in args.images:
            with open(path, "rb") as fh:
                img = BitImage.from_pbm(fh.read())
            dets = cluttered_detect(img, model.partition, model.masks, model.detectors, cfg.selection)
            rec = {
                "image": path,
                "present": bool(dets),
                "cells": [d.cell_id for d in dets],
                "detections": [d.to_dict() for d in dets],
                "radius": model.cert.radius,
            }
            out.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import RUNNERS

    cfg = _load_config(args, args.which)
    report = RUNNERS[args.which](cfg, log=lambda s: print(s, file=sys.stderr))
    out = args.out or cfg.out or f"run_{args.which}"
    report.write(out)
    summary = {"out": out, "passed": report.passed, "failures": report.failures}
    if report.certificate:
        summary["bound"] = report.certificate["radius"]
    print(json.dumps(summary, sort_keys=True))
    return report.exit_code


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="scenario config (JSON path or shipped name)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="ggmcert", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate-target", parents=[common], help="parse and validate a target spec")
    s.add_argument("spec")
    s.set_defaults(func=cmd_validate_target)

    s = sub.add_parser("render", parents=[common], help="decode one pose to a PBM image")
    s.add_argument("--target")
    s.add_argument("--pose", type=float, nargs=6, required=True, metavar=("X", "Y", "Z", "ROLL", "PITCH", "YAW"))
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--focal", type=float)
    s.add_argument("--clip", action="store_true", help="clip at the image border instead of refusing")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", parents=[common], help="train the pose encoder")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("certify", parents=[common], help="compute the error certificate of an encoder")
    s.add_argument("--encoder", help="checkpoint; trained from the config when omitted")
    s.add_argument("--nbar", type=float)
    s.set_defaults(func=cmd_certify)

    for name, func, helptext in (
        ("reach", cmd_reach, "forward reachable image set of a box"),
        ("mask", cmd_mask, "spatial-filter mask of a box"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--box", type=float, nargs=12, metavar="V", help="6 lower then 6 upper bounds")
        s.add_argument("--step", type=float, nargs="+")
        s.add_argument("--lipschitz", type=float, help="refuse steps not below 1/L_D")
        s.set_defaults(func=func)

    s = sub.add_parser("detect", parents=[common], help="certified detection on PBM images")
    s.add_argument("--encoder", required=True)
    s.add_argument("--certificate", required=True)
    s.add_argument("--tau", type=float)
    s.add_argument("images", nargs="+")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("pipeline", parents=[common], help="cluttered detection, JSON lines per frame")
    s.add_argument("images", nargs="+")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("experiment", parents=[common], help="run a desk-scale experiment")
    s.add_argument("which", choices=("ggm", "certify", "cluttered"))
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    from .experiments import ConfigError, PartitionInvalid
    from .reach import GridStepError

    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads:
        try:
            import numba

            numba.set_num_threads(min(int(threads), numba.config.NUMBA_NUM_THREADS))
        except (ImportError, ValueError):
            pass
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        return args.func(args)
    except (ConfigError, GridStepError, TargetSpecError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PartitionInvalid as exc:
        print(f"{exc}; witnesses: {json.dumps(exc.report.witnesses[:5])}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
