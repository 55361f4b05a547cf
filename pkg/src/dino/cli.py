"""``dino`` command line: generate, train, rollout, eval, spectrum, stability.

Exit codes: 0 success, 1 user error (bad config, missing or corrupt file),
2 numerical failure (solver blow-up, rollout collapse, diverged training).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .diagnostics import MetricSeries, correlation_series, enstrophy_spectrum, high_correlation_time, stability_report
from .field import ScalarField2D
from .model import (
    CheckpointError,
    DinoModel,
    RolloutCollapse,
    load_checkpoint,
    read_checkpoint_manifest,
    rollout,
    save_checkpoint,
)
from .solver import SolverBlowUp, generate_dataset, load_manifest
from .storage import TrajectoryFormatError, load_trajectory, save_trajectory
from .trainer import TrainingDiverged, evaluate_one_step, split_train_val, train, write_report_csv

log = logging.getLogger("dino")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UserError(f"output directory {out} is not writable")
    return out


def _checkpoint_hash(path) -> str:
    m = read_checkpoint_manifest(path)
    return m.get("extra", {}).get("run_hash", m["config_hash"])


def _write_csv(path: Path, run_hash: str, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {run_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _load_data(path):
    path = Path(path)
    if not path.is_file():
        raise UserError(f"dataset manifest {path} not found")
    manifest, trajs = load_manifest(path)
    if not trajs:
        raise UserError(f"dataset manifest {path} lists no usable trajectories")
    return manifest, trajs


def _load_model(path) -> DinoModel:
    if not Path(path).is_file():
        raise UserError(f"checkpoint {path} not found")
    return load_checkpoint(path)


# --- commands --------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    manifest = generate_dataset(
        cfg.ic.n_traj, cfg.solver, cfg.ic.spec(), out, cfg.grid,
        extra={"run_hash": cfg.hash(), "run_config": cfg.to_dict()},
    )
    failed = [int(i) for i in manifest["errors"]]
    print(f"wrote {out / 'manifest.json'} ({cfg.ic.n_traj - len(failed)} ok, {len(failed)} failed)")
    if failed:
        for i, err in manifest["errors"].items():
            print(f"trajectory {i} failed: {err}", file=sys.stderr)
        if args.strict:
            return EXIT_NUMERIC
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    _, trajs = _load_data(args.data)
    train_set, val_set = split_train_val(trajs)
    if args.resume:
        model = load_checkpoint(args.resume, expected_config=cfg.dino_config())
    else:
        model = DinoModel(cfg.dino_config())
    tcfg = replace(cfg.train, checkpoint_dir=str(out))
    extra = {"run_hash": cfg.hash(), "run_config": cfg.to_dict()}
    model, report = train(model, train_set, tcfg, val=val_set, checkpoint_extra=extra,
                          on_epoch=lambda e, l: print(f"epoch {e} loss {l:.6e}", flush=True))
    ckpt = out / "model.dinockpt"
    save_checkpoint(model, ckpt, extra)
    write_report_csv(report, out / "train_report.csv", cfg.hash())
    if val_set:
        print(f"validation one-step rel L2 {evaluate_one_step(model, val_set):.4e}")
    print(f"wrote {ckpt}")
    return EXIT_OK


def _initial_field(args) -> tuple[ScalarField2D, str]:
    src = Path(args.init)
    if not src.is_file():
        raise UserError(f"initial-condition source {src} not found")
    if src.suffix == ".json":
        _, trajs = _load_data(src)
        traj = trajs[args.traj_index]
    else:
        traj = load_trajectory(src)
    return traj.frame(args.frame), str(src)


def cmd_rollout(args) -> int:
    model = _load_model(args.checkpoint)
    run_hash = _checkpoint_hash(args.checkpoint)
    u0, source = _initial_field(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        traj = rollout(model, u0, args.steps)
    except RolloutCollapse as exc:
        exc.partial.meta.update({"config_hash": run_hash, "source": source})
        save_trajectory(exc.partial, out)
        print(f"{exc}; partial trajectory with {len(exc.partial)} frames written to {out}", file=sys.stderr)
        return EXIT_NUMERIC
    traj.meta.update({"config_hash": run_hash, "source": source})
    save_trajectory(traj, out)
    print(f"wrote {out} ({len(traj)} frames)")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    run_hash = _checkpoint_hash(args.checkpoint)
    _, trajs = _load_data(args.truth)
    if args.split == "val":
        trajs = split_train_val(trajs)[1]
    out = _out_dir(args)
    steps = min(args.steps, min(len(t) for t in trajs) - 1)
    rel, corr, persist = [], [], []
    for t in trajs:
        truth = type(t)(t.grid, t.dt, t.frames[: steps + 1], t.meta)
        series = correlation_series(rollout(model, t.frame(0), steps), truth)
        rel.append(series.rel_l2)
        corr.append(series.corr)
        base = np.linalg.norm(truth.frames - truth.frames[0], axis=(1, 2))
        persist.append(base / np.linalg.norm(truth.frames, axis=(1, 2)))
    rel_m, corr_m = np.mean(rel, axis=0), np.mean(corr, axis=0)
    rows = [[k, repr(float(r)), repr(float(c))] for k, (r, c) in enumerate(zip(rel_m, corr_m))]
    _write_csv(out / "metrics.csv", run_hash, ["step", "rel_l2", "corr"], rows)
    summary = {
        "config_hash": run_hash,
        "n_trajectories": len(trajs),
        "steps": steps,
        "final_rel_l2": float(rel_m[-1]),
        "persistence_rel_l2": float(np.mean(persist, axis=0)[-1]),
        "high_correlation_time": high_correlation_time(MetricSeries(rel_m, corr_m), args.threshold),
    }
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_spectrum(args) -> int:
    src = Path(args.trajectory)
    if not src.is_file():
        raise UserError(f"trajectory {src} not found")
    traj = load_trajectory(src)
    idx = len(traj) - 1 if args.frame == "last" else int(args.frame)
    if not -len(traj) <= idx < len(traj):
        raise UserError(f"frame {args.frame} outside 0..{len(traj) - 1}")
    curve = enstrophy_spectrum(traj.frame(idx))
    run_hash = traj.meta.get("config_hash", "unknown")
    out = Path(args.out)
    if out.suffix != ".csv":
        out = _out_dir(args) / "spectrum.csv"
    rows = [[int(k), repr(float(e))] for k, e in zip(curve.shells, curve.enstrophy)]
    _write_csv(out, run_hash, ["k", "enstrophy"], rows)
    print(f"wrote {out} (frame {idx % len(traj)})")
    return EXIT_OK


def cmd_stability(args) -> int:
    model = _load_model(args.checkpoint)
    run_hash = _checkpoint_hash(args.checkpoint)
    _, trajs = _load_data(args.truth)
    out = _out_dir(args)
    u = trajs[args.traj_index].frame(args.frame)
    report = stability_report(model, u.values, iters=args.iters, n_samples=args.samples)
    path = out / "stability.json"
    report.to_json(path, config_hash=run_hash)
    print(f"wrote {path}: sigma_int={report.sigma_int:.4f} rho_full={report.rho_full:.6f} "
          f"rayleigh_diff=({report.rayleigh_diff[0]:.4f}, {report.rayleigh_diff[1]:.4f})")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dino", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="run config JSON")
            sp.add_argument("--seed", type=int, default=None, help="override every seed")
        sp.add_argument("--out", required=True)
        sp.add_argument("--strict", action="store_true", help="fail on any partial failure")
        return sp

    g = common(sub.add_parser("generate", help="simulate a dataset"))
    g.set_defaults(fn=cmd_generate)

    t = common(sub.add_parser("train", help="one-step training"))
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    r = common(sub.add_parser("rollout", help="autoregressive forecast"), config=False)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--init", required=True, help="trajectory file or dataset manifest")
    r.add_argument("--traj-index", type=int, default=0)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--steps", type=int, required=True)
    r.set_defaults(fn=cmd_rollout)

    e = common(sub.add_parser("eval", help="per-step rel L2 and correlation"), config=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--truth", required=True, help="dataset manifest.json")
    e.add_argument("--steps", type=int, default=10)
    e.add_argument("--split", choices=("all", "val"), default="all")
    e.add_argument("--threshold", type=float, default=0.8)
    e.set_defaults(fn=cmd_eval)

    s = common(sub.add_parser("spectrum", help="enstrophy spectrum of one frame"), config=False)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--frame", default="last", help="index or 'last'")
    s.set_defaults(fn=cmd_spectrum)

    st = common(sub.add_parser("stability", help="Jacobian stability report"), config=False)
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--truth", required=True, help="dataset manifest.json")
    st.add_argument("--traj-index", type=int, default=0)
    st.add_argument("--frame", type=int, default=0)
    st.add_argument("--iters", type=int, default=100)
    st.add_argument("--samples", type=int, default=100)
    st.set_defaults(fn=cmd_stability)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (SolverBlowUp, RolloutCollapse, TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, ConfigError, CheckpointError, TrajectoryFormatError,
            FileNotFoundError, PermissionError, IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
