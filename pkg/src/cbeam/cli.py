"""Command-line entry point.

Stages read and write artifacts in the output directory, so each one can be
rerun on its own::

    cbeam simulate  -> raw.snbf
    cbeam beamform  -> lines_reference.npz
    cbeam xample    -> coefficients_<mode>.npz  (+ operators.snbc in approx mode)
    cbeam recover   -> lines_<mode>.npz
    cbeam render    -> <mode>.pgm
    cbeam report    -> report.txt, summary.txt
    cbeam run       -> all of the above

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, parse_config
from .imaging import write_image
from .phantom import load_raw, save_raw, scan_fingerprint
from .xampling import load_operator_cache, save_operator_cache

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

RAW_FILE = "raw.snbf"
CACHE_FILE = "operators.snbc"

log = logging.getLogger("cbeam")


class UsageError(Exception):
    """Bad command-line arguments (exit code 2)."""


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="configuration file (INI); defaults apply when omitted")
    common.add_argument("--mode", choices=("reference", "exact", "approx"), help="compressed path to run")
    common.add_argument("--seed", type=int, help="unsigned 64-bit random seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--rho", type=float, help="kernel energy fraction kept in approx mode")
    common.add_argument("--beams", type=int, help="number of beams")
    common.add_argument("--threads", type=int, help="beams processed concurrently")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cbeam", description="Compressed ultrasound beamforming pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="synthesize raw channel data")
    sub.add_parser("beamform", parents=[common], help="reference beamforming of the raw data")
    xp = sub.add_parser("xample", parents=[common], help="compressed-path Fourier coefficients")
    xp.add_argument("--no-cache", action="store_true", help="do not read or write the operator cache")
    sub.add_parser("recover", parents=[common], help="sparse recovery of the beamformed lines")
    sub.add_parser("render", parents=[common], help="write images of all available lines")
    sub.add_parser("run", parents=[common], help="full pipeline")
    sub.add_parser("report", parents=[common], help="rate report and metrics from existing artifacts")
    return parser


def load_config(args):
    cfg = parse_config(args.config)
    overrides = {}

    def put(section, key, value):
        if value is not None:
            overrides.setdefault(section, {})[key] = value

    put("run", "mode", args.mode)
    put("run", "seed", args.seed)
    put("run", "out", None if args.out is None else str(args.out))
    put("run", "threads", args.threads)
    put("truncation", "rho", args.rho)
    put("scan", "beams", args.beams)
    return cfg.override(**overrides).validate() if overrides else cfg


def _need(path, hint):
    if not path.is_file():
        raise UsageError(f"missing {path}; run `cbeam {hint}` first")
    return path


def _compressed_mode(cfg):
    if cfg.run.mode == "reference":
        raise UsageError("this stage needs --mode exact or --mode approx")
    return cfg.run.mode


def _load_raw(cfg, setup, out):
    raw = load_raw(_need(out / RAW_FILE, "simulate"))
    want = scan_fingerprint(setup.geometry, setup.beams, setup.window)
    if raw.geometry_hash != want:
        raise UsageError(f"{out / RAW_FILE} was simulated with a different geometry or scan; rerun `cbeam simulate`")
    return raw


def cmd_simulate(cfg, setup, out, args):
    raw = pl.simulate(cfg, setup)
    save_raw(raw, out / RAW_FILE)
    print(f"wrote {out / RAW_FILE} ({raw.samples.shape[0]} beams x {raw.samples.shape[1]} elements)")


def cmd_beamform(cfg, setup, out, args):
    ref, _, _ = pl.reference_path(cfg, setup, _load_raw(cfg, setup, out))
    pl.save_lines(out / "lines_reference.npz", ref)
    print(f"wrote {out / 'lines_reference.npz'}")


def _cached_operators(cfg, setup, out, use_cache):
    if cfg.run.mode != "approx" or not use_cache:
        return None
    path = out / CACHE_FILE
    if not path.is_file():
        return None
    cb = pl.compressed_beamformer(cfg, setup, "approx").fit()
    try:
        ops, _ = load_operator_cache(
            path,
            scan_fingerprint(setup.geometry, setup.beams, setup.window),
            cb.kappa_,
            cfg.truncation.rho,
            cfg.truncation.n_max,
            cfg.truncation.oversample,
        )
    except ValueError as exc:
        log.info("ignoring operator cache: %s", exc)
        return None
    return ops


def cmd_xample(cfg, setup, out, args):
    mode = _compressed_mode(cfg)
    raw = _load_raw(cfg, setup, out)
    use_cache = not args.no_cache
    ops = _cached_operators(cfg, setup, out, use_cache)
    if mode == "approx" and use_cache and ops is None:
        cb = pl.compressed_beamformer(cfg, setup, "approx", precompute=True).fit()
        ops = cb.operators_
        t = cfg.truncation
        save_operator_cache(
            out / CACHE_FILE,
            ops,
            scan_fingerprint(setup.geometry, setup.beams, setup.window),
            t.rho,
            t.n_max,
            t.oversample,
        )
        print(f"wrote {out / CACHE_FILE}")
    coeffs = pl.compressed_coefficients(cfg, setup, raw, mode, operators=ops)
    path = out / f"coefficients_{mode}.npz"
    coeffs.save(path)
    print(f"wrote {path}")


def cmd_recover(cfg, setup, out, args):
    mode = _compressed_mode(cfg)
    coeffs = pl.CoefficientSet.load(_need(out / f"coefficients_{mode}.npz", f"xample --mode {mode}"))
    if coeffs.coefficients.shape != (setup.beams.size, cfg.sparsity.n_fourier):
        raise UsageError(f"coefficients_{mode}.npz does not match the configured beams and K; rerun `cbeam xample`")
    path = out / f"lines_{mode}.npz"
    pl.save_lines(path, pl.recover_path(cfg, setup, coeffs))
    print(f"wrote {path}")


def _available_paths(cfg, setup, out):
    paths = {}
    for mode in ("reference", "exact", "approx"):
        f = out / f"lines_{mode}.npz"
        if f.is_file():
            pr = pl.load_lines(f)
            if pr.lines.shape != (setup.beams.size, cfg.grid.size):
                raise UsageError(f"{f} does not match the configured beams and grid size")
            paths[mode] = pl.render(cfg, setup, pr)
    if not paths:
        raise UsageError(f"no lines_*.npz in {out}; run `cbeam beamform` or `cbeam recover` first")
    return paths


def cmd_render(cfg, setup, out, args):
    fmt = cfg.render.format
    for mode, pr in _available_paths(cfg, setup, out).items():
        write_image(pr.image, out / f"{mode}.{fmt}", fmt)
        print(f"wrote {out / f'{mode}.{fmt}'}")


def cmd_report(cfg, setup, out, args):
    paths = _available_paths(cfg, setup, out)
    if "reference" not in paths:
        raise UsageError("the report needs lines_reference.npz; run `cbeam beamform` first")
    result = pl.assemble_result(cfg, setup, paths)
    (out / "report.txt").write_text(pl.format_report(result.report_items()))
    summary = pl.format_summary(result)
    (out / "summary.txt").write_text(summary)
    sys.stdout.write(summary)


def cmd_run(cfg, setup, out, args):
    result = pl.run_pipeline(cfg, out_dir=out)
    sys.stdout.write(pl.format_summary(result))
    print(f"outputs in {out}")


COMMANDS = {
    "simulate": cmd_simulate,
    "beamform": cmd_beamform,
    "xample": cmd_xample,
    "recover": cmd_recover,
    "render": cmd_render,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args)
        setup = pl.build_setup(cfg)
        out = Path(cfg.run.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, setup, out, args)
    except (ConfigError, UsageError) as exc:
        print(f"cbeam: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"cbeam: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
