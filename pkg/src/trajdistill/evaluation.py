"""Scratch training on real or distilled data, metrics, and experiment grids."""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import FeatureDataset, SyntheticDataset, load_synthetic, save_synthetic
from .distill import DistillConfig, init_synthetic, run_distillation
from .errors import EmptySplit
from .metrics import Metrics, confusion_matrix, metrics_from_predictions, uar
from .models import ArchSpec, ParamVector, predict
from .teacher import TrainConfig, TrajectoryPool, fit

__all__ = [
    "Metrics",
    "confusion_matrix",
    "uar",
    "train_from_scratch",
    "evaluate",
    "evaluate_split",
    "run_grid",
    "summarize",
    "write_results",
    "write_summary",
    "RESULT_FIELDS",
    "CONTROL",
]

RESULT_FIELDS = ("guide_arch", "eval_arch", "ipc", "split", "seed", "accuracy", "uar")
SUMMARY_FIELDS = ("guide_arch", "eval_arch", "ipc", "split", "n", "accuracy_mean", "accuracy_std", "uar_mean", "uar_std")
CONTROL = "random_subset"


def train_from_scratch(spec: ArchSpec, x: np.ndarray, y: np.ndarray, epochs: int = 30, seed: int = 0, batch_size: int = 32) -> ParamVector:
    """Fresh init, Adam 1e-3 with the step-decay schedule, ``epochs`` passes."""
    if len(x) == 0:
        raise EmptySplit("cannot train on an empty dataset")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None]
    return fit(spec, x, np.asarray(y, dtype=np.int64), seed, TrainConfig(epochs=epochs, batch_size=batch_size))


def evaluate(spec: ArchSpec, params, x: np.ndarray, y: np.ndarray, num_classes: int | None = None) -> Metrics:
    if len(x) == 0:
        raise EmptySplit("cannot evaluate on an empty split")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None]
    return metrics_from_predictions(y, predict(spec, params, x), num_classes or spec.num_classes)


def evaluate_split(spec: ArchSpec, params, dataset: FeatureDataset, split: str = "val") -> Metrics:
    x, y = dataset.arrays(split)
    return evaluate(spec, params, x, y, dataset.num_classes)


def checkpoint_evaluator(dataset: FeatureDataset, eval_specs: list[ArchSpec], epochs: int = 30, seed: int = 0, split: str = "val"):
    """Callback for run_distillation: val UAR of scratch models per architecture."""

    def _eval(syn: SyntheticDataset, step: int) -> dict:
        out = {}
        for spec in eval_specs:
            params = train_from_scratch(spec, syn.pixels, syn.labels, epochs, seed)
            out[f"{spec.name}_uar"] = evaluate_split(spec, params, dataset, split).uar
        return out

    return _eval


# -------------------------------------------------------------------- grid

def _cache_key(pool: TrajectoryPool, cfg: DistillConfig, split) -> str:
    blob = json.dumps([pool.arch.arch_id, pool.dataset_fingerprint, cfg.to_dict(), split], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def distilled_set(pool: TrajectoryPool, dataset: FeatureDataset, cfg: DistillConfig, split="train", cache_dir: str | Path | None = None) -> SyntheticDataset:
    """Run (or reload from ``cache_dir``) one distillation."""
    if cache_dir is not None:
        path = Path(cache_dir) / f"{pool.arch.name}_ipc{cfg.ipc}_seed{cfg.seed}_{_cache_key(pool, cfg, split)}.dsyn"
        if path.exists():
            return load_synthetic(path)
    syn, log, _ = run_distillation(cfg, pool, dataset, split=split)
    syn.provenance["step_losses"] = [rec["L"] for rec in log]
    if cache_dir is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_synthetic(syn, path)
    return syn


def _distill_job(args):
    return distilled_set(*args)


def run_grid(
    pools: dict[str, TrajectoryPool],
    dataset: FeatureDataset,
    eval_specs: list[ArchSpec],
    ipcs=(10,),
    seeds=(0, 1, 2),
    base_cfg: DistillConfig = DistillConfig(),
    eval_epochs: int = 30,
    split: str = "val",
    include_control: bool = True,
    source_split="train",
    cache_dir: str | Path | None = None,
    workers: int = 1,
) -> list[dict]:
    """Evaluate every (guide, eval arch, ipc, seed) cell.

    Each guide pool distills one synthetic set per (ipc, seed) with
    ``base_cfg``; every eval architecture is then trained from scratch on
    it with the same seed.  The control rows (guide ``random_subset``) use
    the undistilled initial subset for the same seed.
    """
    jobs = []
    for guide in sorted(pools):
        for ipc in ipcs:
            for seed in seeds:
                cfg = replace(base_cfg, ipc=ipc, seed=seed)
                jobs.append(((guide, ipc, seed), (pools[guide], dataset, cfg, source_split, cache_dir)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            sets = dict(zip([k for k, _ in jobs], ex.map(_distill_job, [a for _, a in jobs])))
    else:
        sets = {k: _distill_job(a) for k, a in jobs}
    if include_control:
        for ipc in ipcs:
            for seed in seeds:
                sets[(CONTROL, ipc, seed)] = init_synthetic(dataset, ipc, seed, source_split)

    x_eval, y_eval = dataset.arrays(split)
    rows = []
    for (guide, ipc, seed), syn in sorted(sets.items()):
        for spec in eval_specs:
            params = train_from_scratch(spec, syn.pixels, syn.labels, eval_epochs, seed)
            m = evaluate(spec, params, x_eval, y_eval, dataset.num_classes)
            rows.append({"guide_arch": guide, "eval_arch": spec.name, "ipc": ipc, "split": split, "seed": seed, "accuracy": m.accuracy, "uar": m.uar})
    return sorted(rows, key=lambda r: (r["guide_arch"], r["eval_arch"], r["ipc"], r["split"], r["seed"]))


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and sample std (ddof=1) of accuracy and UAR per cell."""
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["guide_arch"], r["eval_arch"], int(r["ipc"]), r["split"]), []).append(r)
    out = []
    for key in sorted(cells):
        acc = np.array([float(r["accuracy"]) for r in cells[key]])
        u = np.array([float(r["uar"]) for r in cells[key]])
        ddof = 1 if len(u) > 1 else 0
        out.append(dict(zip(SUMMARY_FIELDS, (*key, len(u), acc.mean(), acc.std(ddof=ddof), u.mean(), u.std(ddof=ddof)))))
    return out


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def write_results(path: str | Path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in RESULT_FIELDS})


def read_results(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{**r, "ipc": int(r["ipc"]), "seed": int(r["seed"]), "accuracy": float(r["accuracy"]), "uar": float(r["uar"])} for r in csv.DictReader(fh)]


def write_summary(path: str | Path, summary: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=(*SUMMARY_FIELDS, "uar_mean_pm_std"), lineterminator="\n")
        w.writeheader()
        for s in summary:
            w.writerow({**{k: _fmt(s[k]) for k in SUMMARY_FIELDS}, "uar_mean_pm_std": f"{100 * s['uar_mean']:.1f} ± {100 * s['uar_std']:.1f}"})
