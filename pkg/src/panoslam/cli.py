"""Command-line front end: ``generate``, ``run``, ``ablate`` and ``eval``.

Exit codes: 0 success, 2 usage or configuration error, 3 tracking lost,
4 I/O, parse or evaluation failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from .config import RunConfig
from .dataset import Dataset, GenerateConfig, generate_dataset
from .errors import ConfigurationError, DatasetError, EvaluationError, TrackingLostError
from .evaluation import (
    align,
    ate,
    evaluate,
    format_report,
    read_trajectory,
    report_to_kv,
    write_trajectory,
)
from .sensor_sim import SCENARIOS

log = logging.getLogger("panoslam")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRACKING_LOST = 3
EXIT_IO = 4

DENSIFY_FLAGS = {"interp": "interpolation_only", "panodars": "pano_dars"}
ALIGN_FLAGS = {"rigid": "rigid", "sim3": "sim3", "none": "none"}
ABLATION_THETAS = (1.0, 2.0, 3.0, 4.0, 5.0)
METHOD_LABELS = {"interpolation_only": "bi-interpolation", "pano_dars": "depth estimation module"}


# ---------------------------------------------------------------------------
# Ablation result
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    method: str
    theta: Optional[float]  # None = association off
    ate: float
    rte: float
    rre: float
    status: str = "ok"
    seconds: float = 0.0  # wall time of the cell; not part of the table text

    @property
    def label(self):
        return "baseline" if self.theta is None else "association"


@dataclass
class AblationResult:
    rows: List[AblationRow]

    def format(self):
        head = f"{'system':<12} {'densification':<24} {'theta (m)':>9} {'ATE (m)':>10} {'RTE (%)':>9} {'RRE (deg/m)':>12}"
        lines = [head, "-" * len(head)]
        prev = None
        for r in self.rows:
            group = (r.theta is None, r.method if r.theta is not None else None)
            if prev is not None and group != prev:
                lines.append("-" * len(head))
            prev = group
            theta = "N/A" if r.theta is None else f"{r.theta:g}"
            if r.status == "ok":
                vals = f"{r.ate:10.4f} {r.rte:9.4f} {r.rre:12.6f}"
            else:
                vals = f"{'failed':>10} {'':>9} {'':>12}  ({r.status})"
            lines.append(f"{r.label:<12} {METHOD_LABELS[r.method]:<24} {theta:>9} {vals}")
        return "\n".join(lines) + "\n"


def ablation_cells(thetas=ABLATION_THETAS):
    """(method, theta) in table order: both baselines, then each method's theta sweep."""
    cells = [(m, None) for m in DENSIFY_FLAGS.values()]
    for m in DENSIFY_FLAGS.values():
        cells += [(m, float(th)) for th in thetas]
    return cells


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(scenario, seed, out_dir, progress=False):
    cfg = GenerateConfig(scenario=scenario, seed=seed)

    def report(t, n):
        if progress and (t % 50 == 0 or t == n - 1):
            log.info("generated frame %d/%d", t + 1, n)

    manifest = generate_dataset(out_dir, cfg, report)
    return manifest


def _write(path: Path, text):
    try:
        path.write_text(text)
    except OSError as exc:
        raise DatasetError(path, f"cannot write: {exc.strerror}") from exc


def _metrics(est, gt, alignment="rigid"):
    return evaluate(est, gt, alignment)


def cmd_run(config: RunConfig, out_dir, cache=None, plot=True):
    """Run the pipeline and write its artifacts into ``out_dir``; returns the RunResult."""
    from .slam.pipeline import loop_trajectories, run_slam

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(out, f"cannot create directory: {exc.strerror}") from exc
    dataset = Dataset(config.dataset)
    config.save(out / "config.txt")
    online_path = out / "trajectory_online.txt"
    try:
        stream = online_path.open("w")
    except OSError as exc:
        raise DatasetError(online_path, f"cannot write: {exc.strerror}") from exc
    with stream:
        stream.write("# timestamp tx ty tz qx qy qz qw (pose at the time each frame was processed)\n")
        try:
            result = run_slam(dataset, config, cache, stream)
        except TrackingLostError:
            _write(out / "run.log", "tracking lost\n")
            raise
    write_trajectory(out / "trajectory.txt", result.trajectory,
                     header="timestamp tx ty tz qx qy qz qw (final estimate)")
    system = result.system
    _write(out / "map.txt", "\n".join(system.map.snapshot_lines()) + "\n")
    _write(out / "loops.log", "".join(rec.line + "\n" for rec in system.loops))
    _write(out / "run.log", "\n".join(system.log_lines) + "\n")

    gt = dataset.groundtruth
    report = _metrics(result.trajectory, gt)
    sim = align(result.trajectory, gt, "similarity")
    text = format_report(report) + f"\nsim3 scale           {sim.scale:12.6f}\n"
    kv = report_to_kv(report) + f"sim3_scale = {sim.scale:.9f}\n"
    for k, (before, after) in enumerate(loop_trajectories(result, dataset.manifest.get("dt", float))):
        g = gt.subset(range(len(before)))
        pre, post = ate(before, g), ate(after, g)
        text += f"loop {k}: ATE before {pre:.4f} m, after {post:.4f} m\n"
        kv += f"loop{k}_ate_before_m = {pre:.9f}\nloop{k}_ate_after_m = {post:.9f}\n"
    _write(out / "metrics.txt", text)
    _write(out / "metrics.kv", kv)
    if plot:
        from .plotting import plot_trajectory
        T = align(result.trajectory, gt, "rigid")
        est = result.trajectory.transformed(T).positions
        plot_trajectory(out / "trajectory.png", gt.positions, est,
                        title=f"{config.densification}, ATE {report.ate:.2f} m")
    return result, report, text


def run_cell(dataset_path, base: RunConfig, method, theta, cache):
    cfg = base.replace(dataset=str(dataset_path), densification=method,
                       association=theta is not None, theta=theta if theta is not None else base.theta)
    from .slam.pipeline import run_slam

    ds = Dataset(dataset_path)
    try:
        res = run_slam(ds, cfg, cache)
        rep = _metrics(res.trajectory, ds.groundtruth)
    except (TrackingLostError, EvaluationError) as exc:
        log.warning("cell %s theta=%s failed: %s", method, theta, exc)
        kind = "tracking lost" if isinstance(exc, TrackingLostError) else "evaluation failed"
        return AblationRow(method, theta, math.nan, math.nan, math.nan, kind), None
    return AblationRow(method, theta, rep.ate, rep.rte, rep.rre), res


def cmd_ablate(dataset_path, base: RunConfig, out_dir=None, thetas=ABLATION_THETAS, cache=None, plot=True):
    """Both no-association baselines plus the (method, theta) grid, in table order.

    Cells run sequentially in-process so per-frame densification is computed
    once per method and reused across the theta sweep.
    """
    from .slam.pipeline import DepthCache

    Dataset(dataset_path)  # fail early on a bad path
    cache = DepthCache() if cache is None else cache
    rows = []
    for method, theta in ablation_cells(thetas):
        t0 = time.perf_counter()
        row, _ = run_cell(dataset_path, base, method, theta, cache)
        row.seconds = time.perf_counter() - t0
        log.info("%s theta=%s ATE=%.4f (%.1f s)", method, theta, row.ate, row.seconds)
        rows.append(row)
    result = AblationResult(rows)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetError(out, f"cannot create directory: {exc.strerror}") from exc
        base.replace(dataset=str(dataset_path)).save(out / "config.txt")
        _write(out / "ablation.txt", result.format())
        if plot:
            from .plotting import plot_ablation
            plot_ablation(out / "ablation.png", rows)
    return result


def cmd_eval(est_path, gt_path, alignment="rigid", out_dir=None, plot=True):
    est = read_trajectory(est_path)
    gt = read_trajectory(gt_path)
    report = _metrics(est, gt, alignment)
    text = format_report(report)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetError(out, f"cannot create directory: {exc.strerror}") from exc
        _write(out / "metrics.txt", text)
        _write(out / "metrics.kv", report_to_kv(report))
        if plot:
            from .plotting import plot_trajectory
            shown = est if alignment == "none" else est.transformed(align(est, gt, "rigid"))
            plot_trajectory(out / "trajectory.png", gt.positions, shown.positions)
    return report, text


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="panoslam", description="Synthetic panoramic camera + LiDAR SLAM.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset")
    g.add_argument("scenario", nargs="?", default="loop_1km", choices=SCENARIOS)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True, metavar="DIR")

    def run_flags(sp, dataset_required):
        sp.add_argument("dataset", nargs="?" if not dataset_required else None, metavar="DATASET")
        sp.add_argument("--config", metavar="PATH", help="key = value run configuration")
        sp.add_argument("--seed", type=int, help="PSO seed")
        sp.add_argument("--out", metavar="DIR", required=True)
        sp.add_argument("--densify", choices=sorted(DENSIFY_FLAGS))
        sp.add_argument("--no-loop", action="store_true", help="disable loop closing")

    r = sub.add_parser("run", help="run SLAM on a dataset")
    run_flags(r, dataset_required=False)
    r.add_argument("--theta", type=float, help="association distance threshold [m]")
    r.add_argument("--no-assoc", action="store_true", help="disable depth association")

    a = sub.add_parser("ablate", help="baselines plus theta sweep for both densifiers")
    run_flags(a, dataset_required=False)
    a.add_argument("--theta", type=float, action="append",
                   help="theta value(s) for the sweep (repeatable; default 1..5)")

    e = sub.add_parser("eval", help="compare an estimated trajectory to ground truth")
    e.add_argument("estimate")
    e.add_argument("groundtruth")
    e.add_argument("--align", choices=sorted(ALIGN_FLAGS), default="rigid")
    e.add_argument("--out", metavar="DIR")
    return p


def _config_from_args(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.dataset:
        changes["dataset"] = args.dataset
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.densify:
        changes["densification"] = DENSIFY_FLAGS[args.densify]
    if args.no_loop:
        changes["loop_closing"] = False
    if getattr(args, "no_assoc", False):
        changes["association"] = False
    theta = getattr(args, "theta", None)
    if isinstance(theta, float):
        changes["theta"] = theta
    cfg = cfg.replace(**changes)
    if not cfg.dataset:
        raise ConfigurationError("no dataset given (positional DATASET or 'dataset' in --config)")
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "generate":
            m = cmd_generate(args.scenario, args.seed, args.out, progress=args.verbose)
            print(f"wrote {m.frame_count} frames to {args.out} "
                  f"(trajectory length {float(m.values['trajectory_length']):.1f} m)")
        elif args.command == "run":
            cfg = _config_from_args(args)
            _, _, text = cmd_run(cfg, args.out)
            sys.stdout.write(text)
        elif args.command == "ablate":
            cfg = _config_from_args(args)
            thetas = tuple(args.theta) if args.theta else ABLATION_THETAS
            result = cmd_ablate(cfg.dataset, cfg, args.out, thetas)
            sys.stdout.write(result.format())
        elif args.command == "eval":
            _, text = cmd_eval(args.estimate, args.groundtruth, ALIGN_FLAGS[args.align], args.out)
            sys.stdout.write(text)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrackingLostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRACKING_LOST
    except (DatasetError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
