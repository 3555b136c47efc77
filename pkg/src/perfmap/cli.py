"""``perf`` command line: run, phantom and validate.

Exit codes: 0 success, 1 usage or configuration error, 2 pipeline failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import build_config, read_config
from .errors import ConfigError, PerfusionError, SpecInvalid, StageError
from .deconvolution import METHODS

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="perf", description="Perfusion maps from 4D CT or MR perfusion volumes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage timings and quality counters")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="compute CBF, CBV, MTT, TTP and Tmax maps")
    run.add_argument("--input", required=True, help="4D .nii.gz perfusion series")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--modality", required=True, type=str.lower, choices=("ctp", "mrp"))
    run.add_argument("--config", help="key = value configuration file")
    run.add_argument("--mask", help="brain mask .nii.gz (skips automatic masking)")
    run.add_argument("--debug", action="store_true", help="write the per-stage report to OUT/debug")
    run.add_argument("--dt", type=float, help="frame spacing in seconds (overrides the header)")
    run.add_argument("--te", type=float, help="echo time in seconds (MR)")
    run.add_argument("--method", choices=METHODS, help="deconvolution method")

    ph = sub.add_parser("phantom", help="write a synthetic phantom with ground-truth maps")
    ph.add_argument("--config", help="phantom.* key = value file (defaults if omitted)")
    ph.add_argument("--out", required=True, help="output directory")

    val = sub.add_parser("validate", help="SSIM of computed maps against reference maps")
    val.add_argument("--out", required=True, help="directory with computed maps")
    val.add_argument("--ref", required=True, help="directory with reference maps")
    val.add_argument("--mask", required=True, help="mask .nii.gz restricting the comparison")
    val.add_argument("--config", help="validation.* key = value file")
    return p


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline

    values = read_config(args.config) if args.config else {}
    cfg = build_config(values, input=args.input, out_dir=args.out, modality=args.modality,
                       debug=args.debug or None, dt=args.dt, echo_time=args.te,
                       method=args.method, mask_path=args.mask)
    if not os.path.isfile(cfg.input):
        raise StageError("read", FileNotFoundError(f"input file not found: {cfg.input}"))
    result = run_pipeline(cfg)
    total = sum(result.timings.values())
    print(f"wrote {len(result.written)} files to {cfg.out_dir} in {total:.2f} s "
          f"(onset frame {result.onset}, {result.quality['aif_voxels']} AIF voxels)")
    return EXIT_OK


def _cmd_phantom(args) -> int:
    from .phantom import generate, spec_from_config, write_phantom

    values = read_config(args.config) if args.config else {}
    try:
        spec = spec_from_config(values)
        spec.validate()
    except SpecInvalid as exc:
        raise ConfigError(f"invalid phantom spec: {exc}") from exc
    try:
        write_phantom(spec, generate(spec), args.out)
    except PerfusionError as exc:
        raise StageError("phantom", exc) from exc
    print(f"wrote phantom {tuple(spec.dims)} x {spec.n_frames} to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .validation import compare_runs

    cfg = build_config(read_config(args.config) if args.config else {})
    try:
        report = compare_runs(args.out, args.ref, args.mask, cfg.validation)
    except (PerfusionError, OSError) as exc:
        raise StageError("validate", exc) from exc
    sys.stdout.write(report.to_text())
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "phantom": _cmd_phantom, "validate": _cmd_validate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"perf: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"perf: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except PerfusionError as exc:
        print(f"perf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
