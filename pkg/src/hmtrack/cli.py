"""Command line front end: ``hmtrack <command> ...``.

Every command is a pure function of its inputs, configuration and seed.
Errors are reported as a single ``error:<Class>:<message>`` line on stderr
with exit code 1 (usage), 2 (data) or 3 (numeric failure).
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import io as hio
from .errors import CalibrationMissingError, DataError, HMTError, UsageError

log = logging.getLogger("hmtrack")


@contextmanager
def staged_dir(target):
    """Build a directory under a temporary name; move it into place on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def _calibration(args, ds):
    path = Path(args.calibration) if args.calibration else ds.layout.calibration
    if not path.exists():
        return None
    return hio.read_calibration(path)


def _require_calibration(args, ds):
    cal = _calibration(args, ds)
    if cal is None:
        raise CalibrationMissingError("no calibration file; run `hmtrack calibrate` or pass --calibration")
    return cal


def _design(args, ds):
    if getattr(args, "design", None):
        return [r["label"] for r in hio.read_csv(args.design)]
    if ds.design is None:
        raise DataError("dataset has no design table; pass --design")
    return ds.design


def _recon_from_dir(path):
    from .analysis.motion import Reconstruction

    path = Path(path)
    vols = sorted(path.glob("volume_*.f32"))
    if not vols:
        raise DataError(f"{path}: no reconstructed volumes")
    return Reconstruction([hio.read_volume(p) for p in vols],
                          [hio.read_volume(path / p.name.replace("volume_", "weight_")) for p in vols])


# ---------------------------------------------------------------- commands

def cmd_simulate(args, cfg):
    from .phantom import PhantomConfig, generate

    kw = {k: hio._tuplify(v) for k, v in cfg.phantom.items()}
    kw["seed"] = args.seed
    pcfg = PhantomConfig.desk(**kw) if args.desk else PhantomConfig(**kw)
    ds = generate(pcfg)
    with staged_dir(args.out) as tmp:
        hio.write_dataset(tmp, ds.v_anat, ds.slices, ds.epi_grid, truth=ds)
        hio.write_json(tmp / "phantom.json", {"schema_version": hio.SCHEMA_VERSION,
                                              "phantom": _jsonable(pcfg.to_dict())})


def cmd_calibrate(args, cfg):
    from .tracking.calibration import calibrate

    ds = hio.load_dataset(args.dataset)
    tcfg = cfg.track_config(seed=args.seed, workers=args.workers)
    cal = calibrate(ds.slices, ds.v_anat, tcfg, k=args.k or cfg.analysis.calibration_k,
                    simplex=tcfg.simplex, bins=tcfg.bins)
    hio.write_calibration(args.out or ds.layout.calibration, cal)


def cmd_track(args, cfg):
    from .pipeline import estimate_motion

    ds = hio.load_dataset(args.dataset)
    cal = _calibration(args, ds) if args.method == "none" else _require_calibration(args, ds)
    tcfg = cfg.track_config(seed=args.seed, workers=args.workers)
    est = estimate_motion(args.method, ds.slices, ds.v_anat, cal, tcfg)
    hio.write_trajectory(args.out, ds.slices, est.theta, est.status, est.objective)


def cmd_reconstruct(args, cfg):
    from .pipeline import reconstruct

    ds = hio.load_dataset(args.dataset)
    cal = _require_calibration(args, ds)
    theta, _, _ = hio.read_trajectory(args.trajectory)
    _check_rows(theta, ds)
    rec = reconstruct(ds.slices, theta, cal, ds.grid)
    with staged_dir(args.out) as tmp:
        for m, (v, w) in enumerate(zip(rec.volumes, rec.weights)):
            hio.write_volume(tmp / f"volume_{m:04d}.f32", v)
            hio.write_volume(tmp / f"weight_{m:04d}.f32", w, units="weight")


def cmd_activate(args, cfg):
    from .pipeline import detect_activation

    ds = hio.load_dataset(args.dataset)
    rec = _recon_from_dir(args.reconstruction)
    n_perm = args.n_perm or cfg.analysis.n_permutations
    threshold = args.threshold if args.threshold is not None else cfg.analysis.threshold
    amap = detect_activation(rec, _design(args, ds), n_perm, threshold, args.seed)
    grid = rec.volumes[0]
    with staged_dir(args.out) as tmp:
        # missing voxels carry p = 1; missing.f32 marks them
        hio.write_volume(tmp / "p.f32", grid.with_data(np.where(amap.missing, 1.0, amap.p)), units="p")
        hio.write_volume(tmp / "t_sign.f32", grid.with_data(amap.t_sign), units="sign")
        hio.write_volume(tmp / "active.f32", grid.with_data(amap.active.astype(float)), units="mask")
        hio.write_volume(tmp / "missing.f32", grid.with_data(amap.missing.astype(float)), units="mask")
        idx = np.argwhere(~amap.missing)
        rows = ([i, j, k, amap.p[i, j, k], int(amap.t_sign[i, j, k]), int(amap.active[i, j, k])]
                for i, j, k in idx)
        hio.write_csv(tmp / "pvalues.csv", ("i", "j", "k", "p", "t_sign", "active"), rows)
        hio.write_json(tmp / "activation.json", {"schema_version": hio.SCHEMA_VERSION,
                                                 "n_permutations": n_perm, "threshold": threshold,
                                                 "seed": args.seed})


def cmd_evaluate(args, cfg):
    from .pipeline import activation_auc, activation_reliability, distance_series

    ds = hio.load_dataset(args.dataset)
    if ds.true_traj is None:
        raise DataError("evaluate needs ground truth sidecars in the dataset")
    theta, _, _ = hio.read_trajectory(args.trajectory)
    _check_rows(theta, ds)
    cal = _calibration(args, ds) or ds.true_calibration
    with staged_dir(args.out) as tmp:
        d = distance_series(theta, ds.slices, cal, ds.true_traj, ds.true_calibration)
        ordered = ds.ordered_slices()
        hio.write_csv(tmp / "distance.csv", ("t", "m", "n", "D_mm"),
                      [[s.time_index, s.volume_index, s.slice_index, d[t]] for t, s in enumerate(ordered)])
        summary = [["mean_D_mm", float(d.mean())]]
        if args.activation:
            p = hio.read_volume(Path(args.activation) / "p.f32")
            missing = hio.read_volume(Path(args.activation) / "missing.f32").data > 0.5
            from .analysis.stats import ActivationMap
            amap = ActivationMap(p.data, np.zeros(p.dims), np.zeros(p.dims, bool), missing)
            fpr, tpr, auc = activation_auc(amap, ds.activation_mask, p, ds.true_calibration)
            hio.write_csv(tmp / "roc.csv", ("fpr", "tpr"), zip(fpr, tpr))
            summary.append(["auc", auc])
        if args.reconstruction:
            rec = _recon_from_dir(args.reconstruction)
            fit, _ = activation_reliability(rec, _design(args, ds), cfg.analysis.n_sets,
                                            cfg.analysis.n_permutations, cfg.analysis.threshold, args.seed)
            hio.write_csv(tmp / "atr.csv", ("lambda", "p_a", "p_i", "loglik"),
                          [[fit.lam, fit.p_a, fit.p_i, fit.loglik]])
        hio.write_csv(tmp / "summary.csv", ("metric", "value"), summary)


def cmd_report(args, cfg):
    from .analysis import report

    series = {}
    for spec in args.trajectory or []:
        label, path = _labelled(spec)
        theta, _, _ = hio.read_trajectory(path)
        theta[:, :3] = np.rad2deg(theta[:, :3])
        series[label] = theta
    distances, rocs = {}, {}
    for spec in args.evaluation or []:
        label, path = _labelled(spec)
        path = Path(path)
        distances[label] = [float(r["D_mm"]) for r in hio.read_csv(path / "distance.csv")]
        if (path / "roc.csv").exists():
            rows = hio.read_csv(path / "roc.csv")
            fpr = np.array([float(r["fpr"]) for r in rows])
            tpr = np.array([float(r["tpr"]) for r in rows])
            rocs[label] = (fpr, tpr, float(np.trapezoid(tpr, fpr)))
    if not series and not distances:
        raise UsageError("report needs --trajectory and/or --evaluation inputs")
    with staged_dir(args.out) as tmp:
        if series:
            hio.atomic_write_text(tmp / "trajectories.svg", report.trajectory_svg(series))
        if distances:
            hio.atomic_write_text(tmp / "distance_boxplot.svg", report.boxplot_svg(distances))
            stats = {k: report.boxplot_stats(v) for k, v in distances.items()}
            keys = ("q1", "median", "q3", "mean", "whisker_low", "whisker_high")
            hio.write_csv(tmp / "distance_boxplot.csv", ("label",) + keys,
                          [[lab] + [s[k] for k in keys] for lab, s in stats.items()])
        if rocs:
            hio.atomic_write_text(tmp / "roc.svg", report.roc_svg(rocs))


# ---------------------------------------------------------------- plumbing

def _labelled(spec: str):
    label, sep, path = spec.partition("=")
    if not sep:
        return Path(spec).stem, spec
    return label, path


def _check_rows(theta, ds):
    if theta.shape[0] != len(ds.slices):
        raise DataError(f"trajectory has {theta.shape[0]} rows but the dataset has {len(ds.slices)} slices")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message.replace("\n", " "))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, default=0, help="seed for every randomized step (default 0)")
    common.add_argument("--workers", type=int, default=1, help="threads for similarity evaluation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hmtrack", description="Per-slice head-motion tracking for fMRI.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--desk", action="store_true", help="small configuration (20 volumes, one cycle)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", parents=[common], help="estimate static transform, center, covariance")
    s.add_argument("--dataset", required=True)
    s.add_argument("--k", type=int, help="slices used for the center and covariance (default 70)")
    s.add_argument("--out", help="calibration file (default <dataset>/calibration.json)")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("track", parents=[common], help="estimate per-slice motion")
    s.add_argument("--dataset", required=True)
    s.add_argument("--method", choices=("v2v", "s2v", "hmt", "none"), default="hmt")
    s.add_argument("--calibration")
    s.add_argument("--out", required=True, help="trajectory CSV")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("reconstruct", parents=[common], help="motion-corrected volumes")
    s.add_argument("--dataset", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--calibration")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("activate", parents=[common], help="permutation-test activation maps")
    s.add_argument("--dataset", required=True)
    s.add_argument("--reconstruction", required=True)
    s.add_argument("--design", help="CSV with columns m,label (default: dataset design)")
    s.add_argument("--n-perm", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_activate)

    s = sub.add_parser("evaluate", parents=[common], help="distance, AUC and reliability metrics")
    s.add_argument("--dataset", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--calibration")
    s.add_argument("--activation", help="output directory of `activate`")
    s.add_argument("--reconstruction", help="output directory of `reconstruct` (enables reliability)")
    s.add_argument("--design")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="SVG plots from track/evaluate outputs")
    s.add_argument("--trajectory", action="append", help="LABEL=trajectory.csv (repeatable)")
    s.add_argument("--evaluation", action="append", help="LABEL=evaluate-output-dir (repeatable)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        cfg = hio.load_config(args.config)
        args.func(args, cfg)
    except HMTError as exc:
        print(f"error:{type(exc).__name__}:{_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error:{type(exc).__name__}:{_one_line(exc)}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error:{type(exc).__name__}:{_one_line(exc)}", file=sys.stderr)
        return 2
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
