"""``gradreg`` command line: register, warp, evaluate, synth.

Structured JSON reports go to stdout (and ``--json-out`` where offered); a
short human summary goes to stderr. Failures print one JSON line on stderr
and exit with 1 (I/O or unreadable input), 2 (shape / config / parameter)
or 3 (numerical divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from gradreg import nifti
from gradreg._parallel import thread_count
from gradreg.config import ConfigError, load_config
from gradreg.fadam import DivergenceError
from gradreg.metrics import evaluate
from gradreg.registration import RegistrationConfig, register
from gradreg.synth import endpoint_error, make_case
from gradreg.volume import DisplacementField, ShapeError, warp_image, warp_labels

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_IO = 1
EXIT_SHAPE = 2
EXIT_DIVERGED = 3


class UsageError(ValueError):
    """Bad flag combination or parameter value."""


def _emit(report: dict, json_out: str | None = None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=True)
    print(text)
    if json_out:
        Path(json_out).write_text(text + "\n")


def _summary(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_register(args) -> int:
    thread_count()  # validates GRADREG_THREADS early
    cfg = load_config(args.config) if args.config else RegistrationConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    fixed = nifti.read_volume(args.fixed)
    moving = nifti.read_volume(args.moving)
    init = nifti.read_field(args.init_field) if args.init_field else None

    t0 = time.perf_counter()
    result = register(fixed, moving, cfg, init_field=init)
    elapsed = time.perf_counter() - t0

    nifti.write_field(result.field, args.out_field)
    if args.moved_out:
        nifti.write_volume(warp_image(moving, result.field), args.moved_out)

    levels = []
    for i, hist in enumerate(result.history):
        best = min(hist, key=lambda b: b.total)
        levels.append(
            {
                "level": i,
                "iterations": result.iterations_run[i],
                "final": hist[-1].to_dict(),
                "best": best.to_dict(),
            }
        )
    _emit(
        {
            "schema_version": SCHEMA_VERSION,
            "command": "register",
            "config": cfg.to_dict(),
            "levels": levels,
            "converged": result.converged,
            "best_total": result.best_loss,
        }
    )
    _summary(
        f"registered in {elapsed:.1f}s; best total loss {result.best_loss:.6f}; "
        f"iterations per level {result.iterations_run}"
    )
    return EXIT_OK


def cmd_warp(args) -> int:
    field = nifti.read_field(args.field)
    if args.labels:
        out = warp_labels(nifti.read_labels(args.image), field)
        nifti.write_labels(out, args.out)
        kind = "labels"
    else:
        out = warp_image(nifti.read_volume(args.image), field)
        nifti.write_volume(out, args.out)
        kind = "image"
    _emit({"schema_version": SCHEMA_VERSION, "command": "warp", "mode": kind, "dims": list(out.dims)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    field = nifti.read_field(args.field) if args.field else None
    fixed_labels = warped_labels = None
    if args.fixed_labels:
        fixed_labels = nifti.read_labels(args.fixed_labels)
        if args.warped_labels:
            warped_labels = nifti.read_labels(args.warped_labels)
        elif args.moving_labels:
            if field is None:
                raise UsageError("--moving-labels needs --field")
            warped_labels = warp_labels(nifti.read_labels(args.moving_labels), field)
        else:
            raise UsageError("--fixed-labels needs --warped-labels or --moving-labels with --field")
    fixed_lms = moving_lms = None
    if args.fixed_lms or args.moving_lms:
        if not (args.fixed_lms and args.moving_lms and field is not None):
            raise UsageError("TRE needs --fixed-lms, --moving-lms and --field")
        fixed_lms = nifti.read_landmarks(args.fixed_lms)
        moving_lms = nifti.read_landmarks(args.moving_lms)
    fixed = nifti.read_volume(args.fixed) if args.fixed else None
    moved = nifti.read_volume(args.moved) if args.moved else None
    if (fixed is None) != (moved is None):
        raise UsageError("the GC score needs both --fixed and --moved")

    report = evaluate(
        fixed_labels=fixed_labels,
        warped_labels=warped_labels,
        field=field,
        fixed_lms=fixed_lms,
        moving_lms=moving_lms,
        fixed=fixed,
        moved=moved,
    )
    _emit({"schema_version": SCHEMA_VERSION, "command": "evaluate", **report.to_dict()}, args.json_out)
    parts = [
        f"{name}={value:.4f}"
        for name, value in (
            ("dice", report.dice_mean),
            ("hd95", report.hd95_mean),
            ("tre", report.tre_mean),
            ("ndv%", report.ndv_percent),
            ("gc", report.gc_score),
        )
        if value is not None
    ]
    _summary(" ".join(parts) or "no metrics requested")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.size < 16:
        raise UsageError(f"--size must be >= 16, got {args.size}")
    if not 0 <= args.max_disp < args.size / 4:
        raise UsageError(f"--max-disp must lie in [0, size/4), got {args.max_disp}")
    case = make_case(args.size, args.seed, args.max_disp)
    nifti.write_volume(case.fixed, args.out_fixed)
    nifti.write_volume(case.moving, args.out_moving)
    nifti.write_field(case.field, args.out_field)
    if args.out_labels:
        nifti.write_labels(case.fixed_labels, args.out_labels)
    if args.out_moving_labels:
        nifti.write_labels(case.moving_labels, args.out_moving_labels)
    if args.out_fixed_lms:
        nifti.write_landmarks(case.fixed_lms, args.out_fixed_lms)
    if args.out_moving_lms:
        nifti.write_landmarks(case.moving_lms, args.out_moving_lms)
    zero = DisplacementField.zeros(case.field.dims)
    _emit(
        {
            "schema_version": SCHEMA_VERSION,
            "command": "synth",
            "size": args.size,
            "seed": args.seed,
            "max_disp": args.max_disp,
            "field_max_norm": float(np.max(np.linalg.norm(case.field.data, axis=-1))),
            "zero_field_epe": endpoint_error(zero, case.field),
            "field_ndv_percent": case.field_ndv,
            "labels": case.fixed_labels.labels,
            "landmarks": case.fixed_lms.count,
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradreg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="optimize a displacement field moving -> fixed")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--config", help="YAML config (see README)")
    p.add_argument("--init-field", help="warm-start displacement field")
    p.add_argument("--moved-out", help="also write the warped moving image")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="apply a displacement field")
    p.add_argument("--image", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", action="store_true", help="nearest-neighbour resampling of a label map")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("evaluate", help="Dice, HD95, TRE, NDV and GC score")
    p.add_argument("--fixed-labels")
    p.add_argument("--warped-labels")
    p.add_argument("--moving-labels")
    p.add_argument("--field")
    p.add_argument("--fixed-lms")
    p.add_argument("--moving-lms")
    p.add_argument("--fixed")
    p.add_argument("--moved")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic pair with a known field")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-disp", type=float, default=3.0)
    p.add_argument("--out-fixed", required=True)
    p.add_argument("--out-moving", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-labels", help="fixed-image label map")
    p.add_argument("--out-moving-labels")
    p.add_argument("--out-fixed-lms")
    p.add_argument("--out-moving-lms")
    p.set_defaults(func=cmd_synth)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "reason": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, "divergence", exc)
    except (nifti.FormatError, OSError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except ConfigError as exc:
        return _fail(EXIT_SHAPE, "config", exc)
    except ShapeError as exc:
        return _fail(EXIT_SHAPE, "shape", exc)
    except (UsageError, ValueError) as exc:
        return _fail(EXIT_SHAPE, "parameter", exc)


if __name__ == "__main__":
    sys.exit(main())
