"""Command-line entry point: ``trajdistill <command> [options]``."""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, compression_table, load_config
from .data import FEATURE_MANIFEST, NORM_STATS, featurize_manifest, gen_toy_dataset, load_features, read_manifest_rows
from .distill import run_distillation
from .errors import ConfigError, MissingFile, TrajDistillError
from .evaluation import checkpoint_evaluator, run_grid, summarize, write_results, write_summary
from .features import read_norm_stats
from .teacher import TrainConfig, TrajectoryPool, build_pool, load_trajectory, save_trajectory


def _write_stamp(out: Path, command: str, payload: dict) -> None:
    stamp = {
        "command": command,
        "versions": {"trajdistill": __version__, "numpy": np.__version__, "python": platform.python_version()},
        **payload,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / f"stamp_{command}.json").write_text(json.dumps(stamp, sort_keys=True, indent=1) + "\n")


class Context:
    """Resolved config plus absolute paths for one invocation."""

    def __init__(self, args):
        self.args = args
        self.cfg: RunConfig = load_config(args.config, args.profile)
        if args.seed is not None:
            n = len(self.cfg.seeds)
            self.cfg = replace(self.cfg, teacher_base_seed=args.seed, seeds=[args.seed + k for k in range(n)])
        root = Path(args.config).resolve().parent if args.config else Path.cwd()
        self.features_dir = (root / self.cfg.features_dir).resolve()
        self.trajectory_dir = (root / self.cfg.trajectory_dir).resolve()
        out = os.environ.get("TRAJDISTILL_OUT") or self.cfg.output_dir
        self.output_dir = (root / out).resolve()
        self.workers = args.workers if args.workers is not None else (os.cpu_count() or 1)

    def require(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise MissingFile(f"required artifact {p} not found")

    def dataset(self):
        ds = load_features(self.features_dir)
        if ds.input_shape != self.cfg.input_shape:
            raise ConfigError(f"features have shape {ds.input_shape}, the {self.cfg.profile} profile needs {self.cfg.input_shape}")
        return ds

    def pools(self, dataset) -> dict[str, TrajectoryPool]:
        pools = {}
        for spec in self.cfg.arch_specs():
            paths = [self.trajectory_dir / traj_name(spec, self.cfg.teacher_base_seed + k) for k in range(self.cfg.pool_size)]
            self.require(*paths)
            pools[arch_label(spec)] = TrajectoryPool([load_trajectory(p, spec) for p in paths], dataset.fingerprint)
        return pools

    def validate(self, dataset, teacher_epochs: int) -> None:
        """Reject distillation settings the pools or the data cannot support, before any compute."""
        counts = dataset.class_counts(self.cfg.source_split)
        for ipc in self.cfg.ipcs:
            self.cfg.distill_config(ipc=ipc).validate(teacher_epochs, counts)

    def stamp(self, command: str, **extra) -> None:
        _write_stamp(self.output_dir, command, {"config_hash": self.cfg.config_hash, "config": self.cfg.to_dict(), "seeds": self.cfg.seeds, **extra})


def arch_label(spec) -> str:
    return spec.name if spec.channel_scale == 1 else f"{spec.name}_x{spec.channel_scale:g}"


def traj_name(spec, seed: int) -> str:
    return f"{arch_label(spec)}_seed{seed}.traj"


# --------------------------------------------------------------- commands

def cmd_gen_toy(args) -> dict:
    out = Path(os.environ.get("TRAJDISTILL_OUT") or args.out).resolve()
    seed = 0 if args.seed is None else args.seed
    manifest = gen_toy_dataset(out, args.speakers, args.clips, seed)
    _write_stamp(out, "gen-toy", {"seed": seed, "speakers": args.speakers, "clips_per_speaker_class": args.clips})
    return {"manifest": str(manifest)}


def cmd_features(args) -> dict:
    profile = args.profile or "toy"
    target_len = load_config(args.config, profile).target_len
    out = Path(os.environ.get("TRAJDISTILL_OUT") or args.out).resolve()
    path = featurize_manifest(Path(args.manifest).resolve(), out, target_len)
    stats = read_norm_stats(out / NORM_STATS)
    n = len(read_manifest_rows(path))
    _write_stamp(out, "features", {"manifest": str(Path(args.manifest).resolve()), "profile": profile, "target_len": target_len, "norm_stats_id": stats.stats_id, "items": n})
    return {"features": str(path), "items": n}


def cmd_teach(args) -> dict:
    ctx = Context(args)
    ds = ctx.dataset()
    cfg = ctx.cfg
    ctx.validate(ds, cfg.teacher_epochs)
    ctx.trajectory_dir.mkdir(parents=True, exist_ok=True)
    tcfg = TrainConfig(epochs=cfg.teacher_epochs, batch_size=cfg.teacher_batch_size)
    written = []
    for spec in cfg.arch_specs():
        pool = build_pool(spec, ds, cfg.pool_size, cfg.teacher_base_seed, tcfg, ctx.workers, cfg.source_split, cfg.eval_split)
        for k, traj in enumerate(pool.trajectories):
            path = ctx.trajectory_dir / traj_name(spec, cfg.teacher_base_seed + k)
            save_trajectory(traj, path)
            written.append(str(path))
    ctx.stamp("teach", dataset_fingerprint=ds.fingerprint)
    return {"trajectories": written}


def cmd_distill(args) -> dict:
    ctx = Context(args)
    ds = ctx.dataset()
    pools = ctx.pools(ds)
    cfg = ctx.cfg
    for pool in pools.values():
        ctx.validate(ds, pool.epochs)
    runs = []
    for label, pool in sorted(pools.items()):
        for ipc in cfg.ipcs:
            for seed in cfg.seeds:
                dcfg = cfg.distill_config(ipc=ipc, seed=seed)
                run_dir = ctx.output_dir / "distill" / f"{label}_ipc{ipc}_seed{seed}"
                evaluate = checkpoint_evaluator(ds, cfg.eval_specs(), cfg.eval_epochs, seed, cfg.eval_split) if cfg.checkpoint_eval else None
                _, _, evals = run_distillation(dcfg, pool, ds, run_dir, evaluate, cfg.source_split)
                if evals:
                    (run_dir / "checkpoint_eval.json").write_text(json.dumps(evals, sort_keys=True, indent=1) + "\n")
                runs.append(str(run_dir))
    n_src = len(ds.indices(cfg.source_split))
    report = [{**r, "source_samples": n_src, "pct_of_source": round(100.0 * r["synthetic_samples"] / n_src, 1)} for r in compression_table(cfg.ipcs, ds.num_classes, cfg.split_sizes or None)]
    ctx.stamp("distill", dataset_fingerprint=ds.fingerprint, compression=report)
    return {"runs": runs}


def cmd_eval(args) -> dict:
    ctx = Context(args)
    ds = ctx.dataset()
    pools = ctx.pools(ds)
    cfg = ctx.cfg
    for pool in pools.values():
        ctx.validate(ds, pool.epochs)
    rows = run_grid(
        pools,
        ds,
        cfg.eval_specs(),
        ipcs=cfg.ipcs,
        seeds=cfg.seeds,
        base_cfg=cfg.distill_config(),
        eval_epochs=cfg.eval_epochs,
        split=cfg.eval_split,
        include_control=cfg.include_control,
        source_split=cfg.source_split,
        cache_dir=ctx.output_dir / "grid_cache",
        workers=ctx.workers,
    )
    ctx.output_dir.mkdir(parents=True, exist_ok=True)
    write_results(ctx.output_dir / "results.csv", rows)
    write_summary(ctx.output_dir / "summary.csv", summarize(rows))
    ctx.stamp("eval", dataset_fingerprint=ds.fingerprint)
    return {"results": str(ctx.output_dir / "results.csv"), "summary": str(ctx.output_dir / "summary.csv")}


def cmd_report(args) -> dict:
    cfg = load_config(args.config, args.profile)
    table = compression_table(cfg.ipcs, 7, cfg.split_sizes or None)
    for r in table:
        print(f"IPC={r['ipc']:>4}  {r['synthetic_samples']:>5} samples  {r['pct_of_train']:>5.1f}% of train  {r['pct_of_train_val']:>5.1f}% of train+val")
    return {"compression": table}


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    common.add_argument("--profile", choices=("paper", "toy"), help="defaults profile")

    p = argparse.ArgumentParser(prog="trajdistill", description="Trajectory-matching dataset distillation for log-Mel spectrograms.")
    p.add_argument("--version", action="version", version=f"trajdistill {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", parents=[common], help="generate the synthetic 7-class WAV corpus")
    g.add_argument("out", help="output directory")
    g.add_argument("--speakers", type=int, default=10)
    g.add_argument("--clips", type=int, default=10, help="clips per speaker and class")
    g.set_defaults(func=cmd_gen_toy)

    f = sub.add_parser("features", parents=[common], help="WAV manifest -> LMSP features + norm stats")
    f.add_argument("manifest")
    f.add_argument("out")
    f.set_defaults(func=cmd_features)

    for name, func, text in (
        ("teach", cmd_teach, "train teacher pools and write TRAJ files"),
        ("distill", cmd_distill, "distill synthetic sets and write DSYN checkpoints"),
        ("eval", cmd_eval, "run the evaluation grid and write results CSVs"),
        ("report", cmd_report, "print synthetic-set sizes relative to the real splits"),
    ):
        s = sub.add_parser(name, parents=[common], help=text)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except TrajDistillError as exc:
        print("error: " + json.dumps({"command": args.command, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report anything unexpected in the same format
        print("error: " + json.dumps({"command": args.command, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "status": "ok", **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
