"""Command-line entry point: ``register``, ``match``, ``rectify``, ``bench`` and
``simmap`` subcommands driven by a sectioned config file.

Exit codes: 0 success, 1 I/O or parameter error, 2 registration did not
converge (outlier rejection, fit or triangulation failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import evaluation
from .config import RunConfig, load_config
from .imagecore import Image, ParameterError
from .matching import (ControlPoint, _check_bounds, _crop, detect_harris, match_points, read_cps,
                       write_cps)
from .raster_io import RasterIOError, read_image, write_image
from .registration import FitError, reject_outliers, rmse
from .similarity import (MEASURES, MatchConfig, MatchSkipped, mi_match, ncc_match, ssd_match_fft,
                         write_map_heatmap, write_map_text)
from .descriptors import DESCRIPTOR_MEASURES, build_volume, footprint_radius
from .tin import TinError, build_tin, read_model, rectify, write_model

log = logging.getLogger("cfogreg")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


class StageError(Exception):
    """A failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, message: str, code: int = EXIT_ERROR):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code


# --------------------------------------------------------------------------- helpers

def _load_raster(path, role: str) -> Image:
    try:
        return read_image(path)
    except (RasterIOError, OSError, ValueError) as exc:
        raise StageError("input", f"cannot read {role} raster: {exc}") from None


def _out_path(cfg: RunConfig, suffix: str) -> Path:
    directory = Path(cfg.output.directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory / f"{cfg.output.prefix}{suffix}"


def _raster_path(cfg: RunConfig, suffix: str) -> Path:
    return _out_path(cfg, f"{suffix}.{cfg.output.raster_format}")


def _write_text(path: Path, lines: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _detect_and_match(ref: Image, sen: Image, cfg: RunConfig):
    mc = cfg.match
    # points that cannot host a full template and search window are dropped here
    pts = detect_harris(ref, cfg.harris, margin=mc.half + mc.search_radius)
    log.info("detected %d feature points", len(pts))
    if not pts:
        raise StageError("detection", "no Harris points found; lower harris.min_response "
                                      "or match.template_size", EXIT_NOT_CONVERGED)
    try:
        result = match_points(ref, sen, pts, mc, descriptor_params=cfg.descriptor_params(),
                              jobs=cfg.run.jobs)
    except ParameterError as exc:
        raise StageError("matching", str(exc)) from None
    log.info("matched %d of %d points (%d skipped)", len(result.cps), len(pts), result.skipped_count)
    return pts, result


def _check_rmse(tin, fallback, checks: List[ControlPoint]) -> float:
    rx = np.array([c.ref_x for c in checks])
    ry = np.array([c.ref_y for c in checks])
    px, py, _ = tin.apply(rx, ry, fallback)
    err = np.hypot(px - np.array([c.sen_x for c in checks]), py - np.array([c.sen_y for c in checks]))
    return rmse(err)


# --------------------------------------------------------------------------- commands

def cmd_register(args, cfg: RunConfig) -> int:
    ref = _load_raster(args.ref, "reference")
    sen = _load_raster(args.sen, "sensed")
    checks = None
    if args.check:
        try:
            checks = read_cps(args.check)
        except (OSError, ValueError) as exc:
            raise StageError("input", f"cannot read check points: {exc}") from None
    t0 = time.perf_counter()
    pts, result = _detect_and_match(ref, sen, cfg)
    t_match = time.perf_counter() - t0

    reg = cfg.registration
    min_cps = reg.min_cps
    try:
        report = reject_outliers(result.cps, reg.order, reg.rmse_threshold, min_cps)
    except FitError as exc:
        write_cps(_out_path(cfg, "_cps.csv"), result.cps)
        raise StageError("outlier rejection", f"{exc} (registration.order={reg.order})",
                         EXIT_NOT_CONVERGED) from None

    write_cps(_out_path(cfg, "_cps.csv"), report.survivors)
    _write_text(_out_path(cfg, "_rejection.txt"), report.summary_lines())
    summary = [f"reference={Path(args.ref).name}",
               f"sensed={Path(args.sen).name}",
               f"measure={cfg.match.measure}",
               f"template_size={cfg.match.template_size}",
               f"search_radius={cfg.match.search_radius}",
               f"points={len(pts)}",
               f"matched={len(result.cps)}",
               f"skipped={result.skipped_count}",
               f"survivors={len(report.survivors)}",
               f"removed={len(report.removed)}",
               f"final_rmse={report.final_rmse:.6f}",
               f"converged={'yes' if report.converged else 'no'}"]
    if not report.converged:
        _write_text(_out_path(cfg, "_summary.txt"), summary)
        raise StageError("outlier rejection",
                         f"RMSE {report.final_rmse:.3f} px still >= registration.rmse_threshold="
                         f"{reg.rmse_threshold} with {len(report.survivors)} CPs left",
                         EXIT_NOT_CONVERGED)

    t1 = time.perf_counter()
    try:
        tin = build_tin(report.survivors)
    except TinError as exc:
        _write_text(_out_path(cfg, "_summary.txt"), summary)
        raise StageError("rectification", str(exc), EXIT_NOT_CONVERGED) from None
    write_model(_out_path(cfg, ".model"), report.model, tin)
    rect = rectify(sen, tin, report.model, ref.shape, fill=reg.fill, jobs=cfg.run.jobs)
    # the rectified raster lives in the reference frame, so it takes the reference georeferencing
    write_image(_raster_path(cfg, "_rectified"), rect.image, bits=cfg.output.bits, geo=ref.geo)
    t_rect = time.perf_counter() - t1

    summary += [f"triangles={len(tin.triangles)}",
                f"unmapped_fraction={rect.unmapped_fraction:.6f}"]
    if checks is not None:
        summary.append(f"check_points={len(checks)}")
        summary.append(f"check_rmse={_check_rmse(tin, report.model, checks):.6f}")
    _write_text(_out_path(cfg, "_summary.txt"), summary)
    # wall-clock numbers stay out of the summary so seeded runs are byte-identical
    _write_text(_out_path(cfg, "_timing.txt"),
                [f"matching_seconds={t_match:.3f}", f"rectification_seconds={t_rect:.3f}"])
    log.info("register: %d CPs, RMSE %.3f px, matching %.2fs, rectification %.2fs",
             len(report.survivors), report.final_rmse, t_match, t_rect)
    return EXIT_OK


def cmd_match(args, cfg: RunConfig) -> int:
    ref = _load_raster(args.ref, "reference")
    sen = _load_raster(args.sen, "sensed")
    _, result = _detect_and_match(ref, sen, cfg)
    write_cps(_out_path(cfg, "_cps.csv"), result.cps)
    return EXIT_OK


def cmd_rectify(args, cfg: RunConfig) -> int:
    sen = _load_raster(args.sen, "sensed")
    try:
        poly, tin = read_model(args.model)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise StageError("input", f"cannot read model {args.model}: {exc}") from None
    if tin is None:
        raise StageError("input", f"model {args.model} has no [tin] section")
    geo = None
    if args.ref:
        ref = _load_raster(args.ref, "reference")
        shape, geo = ref.shape, ref.geo
    else:
        try:
            h, w = (int(v) for v in args.shape.lower().split("x"))
        except ValueError:
            raise StageError("input", f"--shape must look like HxW, got {args.shape!r}") from None
        if h < 1 or w < 1:
            raise StageError("input", "--shape needs positive dimensions")
        shape = (h, w)
    rect = rectify(sen, tin, poly, shape, fill=cfg.registration.fill, jobs=cfg.run.jobs)
    write_image(_raster_path(cfg, "_rectified"), rect.image, bits=cfg.output.bits, geo=geo)
    return EXIT_OK


def _parse_point(text: str):
    try:
        x, y = (int(round(float(v))) for v in text.split(","))
    except ValueError:
        raise StageError("input", f"--point must look like X,Y, got {text!r}") from None
    return x, y


def cmd_simmap(args, cfg: RunConfig) -> int:
    ref = _load_raster(args.ref, "reference")
    sen = _load_raster(args.sen, "sensed")
    point = _parse_point(args.point)
    measures = [m.strip().upper() for m in args.measures.split(",") if m.strip()]
    for m in measures:
        if m not in MEASURES:
            raise StageError("input", f"unknown measure {m!r}; choose from {', '.join(MEASURES)}")
    for m in measures:
        mc = dataclasses.replace(cfg.match, measure=m)
        try:
            if m in DESCRIPTOR_MEASURES:
                params = cfg.descriptor_params(m)
                # volumes on a window around the point only
                pad = mc.half + mc.search_radius + footprint_radius(m, params)
                smap = _simmap_descriptor(ref, sen, point, mc, params, pad)
            elif m == "NCC":
                smap = ncc_match(ref, sen, point, mc)
            else:
                smap = mi_match(ref, sen, point, mc)
        except MatchSkipped as exc:
            raise StageError("simmap", f"{exc} (match.template_size={mc.template_size}, "
                                       f"match.search_radius={mc.search_radius})") from None
        write_map_heatmap(_out_path(cfg, f"_simmap_{m}.pgm"), smap)
        write_map_text(_out_path(cfg, f"_simmap_{m}.txt"), smap)
        log.info("%s peak at offset (%d, %d)", m, *smap.peak)
    return EXIT_OK


def _simmap_descriptor(ref: Image, sen: Image, point, mc: MatchConfig, params, pad: int):
    _check_bounds(ref.shape, sen.shape, point, point, mc)
    rc, rx0, ry0 = _crop(ref.data, point[0], point[1], pad)
    sc, sx0, sy0 = _crop(sen.data, point[0], point[1], pad)
    vref = build_volume(rc, mc.measure, params)
    vsen = build_volume(sc, mc.measure, params)
    return ssd_match_fft(vref, vsen, (point[0] - rx0, point[1] - ry0), mc,
                         (point[0] - sx0, point[1] - sy0))


# Reduced and full evaluation grids. "paper" mirrors the template-size sweep,
# the noise sweep at 81 px and the sigma / m study at 101 px.
BENCH_SUITES = {
    "quick": dict(count=4, measures=("CFOG", "FHOG", "FLSS", "FSURF", "NCC", "MI"),
                  templates=(41,), noise_measures=("CFOG", "FHOG", "NCC"),
                  noise=(0.0, 0.01), sigmas=(0.8, 3.0), ms=(9,), param_template=61, timing_size=256),
    "paper": dict(count=20, measures=("CFOG", "FHOG", "FLSS", "FSURF", "NCC", "MI"),
                  templates=(25, 41, 61, 81, 101), noise_measures=("CFOG", "FHOG", "FLSS", "FSURF", "NCC", "MI"),
                  noise=evaluation.NOISE_VARIANCES, sigmas=evaluation.PARAM_SIGMAS,
                  ms=evaluation.PARAM_MS, param_template=101, timing_size=512),
}


def cmd_bench(args, cfg: RunConfig) -> int:
    suite = BENCH_SUITES[cfg.bench.suite]
    count = cfg.bench.count or suite["count"]
    seed = cfg.run.seed
    sweep = evaluation.SweepConfig(search_radius=10, jobs=cfg.run.jobs)
    pairs = evaluation.synthetic_suite(seed, size=cfg.bench.size, count=count,
                                       radiometric=cfg.bench.radiometric_list,
                                       scenes=cfg.bench.scene_list, max_shift=cfg.bench.max_shift)
    log.info("bench %s: %d pairs, seed %d", cfg.bench.suite, count, seed)

    precision = evaluation.run_precision_sweep(pairs, suite["measures"], suite["templates"], sweep)
    noise = evaluation.run_noise_sweep(pairs, suite["noise_measures"], suite["noise"], sweep=sweep)
    study = evaluation.run_param_study(pairs, suite["param_template"], suite["sigmas"], suite["ms"], sweep)

    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    prefix = cfg.output.prefix
    (out / f"{prefix}_precision.csv").write_text(evaluation.reports_to_csv(precision))
    (out / f"{prefix}_noise.csv").write_text(evaluation.reports_to_csv(noise))
    lines = ["factor,value,correct,total,precision,reference"]
    for s, rep in study.sigma_cells:
        lines.append(f"sigma,{s:g},{rep.correct},{rep.total},{rep.precision:.6f},"
                     f"{'yes' if s == study.reference.sigma else 'no'}")
    for m, rep in study.m_cells:
        lines.append(f"m,{m},{rep.correct},{rep.total},{rep.precision:.6f},"
                     f"{'yes' if m == study.reference.m else 'no'}")
    lines.append(f"best_sigma,{study.best_sigma:g},,,,")
    lines.append(f"best_m,{study.best_m},,,,")
    _write_text(out / f"{prefix}_params.csv", lines)

    # timings are hardware-bound: separate files, excluded from determinism
    rng = np.random.default_rng(seed)
    img = evaluation.make_scene("shapes", (suite["timing_size"],) * 2, rng)
    timings = evaluation.descriptor_timings(img)
    order = sorted(timings, key=timings.get)
    _write_text(out / f"{prefix}_descriptor_timing.txt",
                [f"{m}={timings[m]:.6f}" for m in DESCRIPTOR_MEASURES] + ["order=" + "<".join(order)])
    (out / f"{prefix}_match_timing.csv").write_text(evaluation.timings_to_csv(precision + noise))
    _write_text(out / f"{prefix}_summary.txt",
                evaluation.summary_lines(precision, noise, study, cfg.bench.suite, seed, count))
    log.info("descriptor build order: %s", " < ".join(order))
    return EXIT_OK


COMMANDS = {"register": cmd_register, "match": cmd_match, "rectify": cmd_rectify,
            "simmap": cmd_simmap, "bench": cmd_bench}


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="config file (sectioned key = value)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--jobs", type=int, help="worker threads (run.jobs)")
    common.add_argument("--seed", type=int, help="random seed (run.seed)")
    common.add_argument("-o", "--out", help="output directory (output.directory)")
    common.add_argument("--prefix", help="output file prefix (output.prefix)")
    common.add_argument("--measure", help="similarity measure (match.measure)")
    common.add_argument("--template-size", type=int, help="template size in px, odd (match.template_size)")
    common.add_argument("--search-radius", type=int,
                        help="peak-offset radius in px (match.search_radius); the ENVI-style "
                             "window equivalent is 2 * radius + template")
    common.add_argument("--dry-run", action="store_true",
                        help="validate the configuration, print it and exit without writing")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="cfogreg", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", parents=[common], help="detect, match, reject outliers, rectify")
    p.add_argument("ref")
    p.add_argument("sen")
    p.add_argument("--check", help="CSV of check points (control-point format) for check RMSE")

    p = sub.add_parser("match", parents=[common], help="detect and match control points only")
    p.add_argument("ref")
    p.add_argument("sen")

    p = sub.add_parser("rectify", parents=[common], help="resample a sensed raster through a .model file")
    p.add_argument("sen")
    p.add_argument("model")
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--ref", help="reference raster giving output size and georeferencing")
    grp.add_argument("--shape", help="output size as HxW")

    p = sub.add_parser("simmap", parents=[common], help="similarity maps at one reference point")
    p.add_argument("ref")
    p.add_argument("sen")
    p.add_argument("--point", required=True, help="reference pixel X,Y")
    p.add_argument("--measures", default=",".join(MEASURES), help="comma-separated measures")

    p = sub.add_parser("bench", parents=[common], help="synthetic evaluation sweeps")
    p.add_argument("--suite", choices=sorted(BENCH_SUITES), help="bench.suite")
    return parser


def _flag_overrides(args) -> List[str]:
    out = []
    for flag, key in (("jobs", "run.jobs"), ("seed", "run.seed"), ("out", "output.directory"),
                      ("prefix", "output.prefix"), ("measure", "match.measure"),
                      ("template_size", "match.template_size"),
                      ("search_radius", "match.search_radius"), ("suite", "bench.suite")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, list(args.overrides) + _flag_overrides(args))
    except ParameterError as exc:
        print(f"cfogreg {args.command}: config: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.dry_run:
        sys.stdout.write(cfg.to_text())
        return EXIT_OK
    try:
        return COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"cfogreg {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ParameterError as exc:
        print(f"cfogreg {args.command}: parameters: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (RasterIOError, OSError) as exc:
        print(f"cfogreg {args.command}: output: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
