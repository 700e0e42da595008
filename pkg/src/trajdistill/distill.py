"""Trajectory-matching distillation.

Each step samples a teacher segment (theta_i, theta_{i+P}), runs Q plain
gradient steps of size alpha on the synthetic set starting from theta_i,
and measures how far the student lands from theta_{i+P} relative to how
far the teacher moved.  The whole unroll, inner gradients included, stays
on one tape, so the outer backward gives exact meta-gradients for the
synthetic pixels and for alpha.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureDataset, SyntheticDataset, save_synthetic
from .errors import ConfigError, InsufficientClassSamples, NoTeacherMotion, NumericError, PoolError
from .models import ArchSpec, ParamVector, forward
from .teacher import TrajectoryPool
from .tensor import Tape, backward, grad, ops, softmax_cross_entropy
from .tensor.tape import Tensor, current_tape

ALPHA_MIN = 1e-8
PAPER_IPCS = (1, 5, 10, 50, 100, 150)
STEP_LOG_FIELDS = ("step", "L", "grad_norm_pixels", "alpha", "trajectory_id", "i")


@dataclass(frozen=True)
class DistillConfig:
    Q: int = 20
    P: int = 3
    e_plus: int = 30
    l_norm: int = 2
    pixel_lr: float = 1000.0
    alpha0: float = 1e-3
    alpha_lr: float = 1e-3
    steps: int = 60
    eval_every: int = 10
    ipc: int = 10
    inner_batch: int = 64
    seed: int = 0
    max_resample: int = 100

    def __post_init__(self):
        for name in ("Q", "P", "e_plus", "l_norm", "ipc", "inner_batch", "eval_every", "max_resample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.pixel_lr < 0 or self.alpha_lr < 0 or self.alpha0 < 0:
            raise ConfigError("learning rates and alpha0 must be non-negative")

    def validate(self, teacher_epochs: int | None = None, class_counts=None, teacher_steps_per_epoch: int | None = None) -> None:
        """Checks that need the pool or the dataset; call before any compute."""
        if teacher_epochs is not None and self.e_plus + self.P > teacher_epochs:
            raise ConfigError(f"e_plus + P = {self.e_plus + self.P} exceeds the {teacher_epochs} teacher epochs")
        if class_counts is not None and min(class_counts) < self.ipc:
            raise ConfigError(f"ipc={self.ipc} exceeds the smallest class count {min(class_counts)}")
        if teacher_steps_per_epoch is not None and 2 * self.Q > self.P * teacher_steps_per_epoch:
            warnings.warn(
                f"Q={self.Q} student steps is not much smaller than the {self.P * teacher_steps_per_epoch} "
                "teacher steps it is matched against",
                stacklevel=2,
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistillState:
    syn: SyntheticDataset
    alpha: float
    rng: np.random.Generator
    step: int = 0
    log: list[dict] = field(default_factory=list)


# ------------------------------------------------------------------ pieces

def init_synthetic(dataset: FeatureDataset, ipc: int, seed: int, split="train") -> SyntheticDataset:
    """Copy ``ipc`` randomly chosen real spectrograms per class."""
    idx = dataset.indices(split)
    rng = np.random.default_rng([seed, 2])
    chosen = []
    for c in range(dataset.num_classes):
        pool = idx[dataset.y[idx] == c]
        if len(pool) < ipc:
            raise InsufficientClassSamples(f"class {dataset.classes[c]!r} has {len(pool)} samples in {split!r}, ipc={ipc}")
        chosen.append(np.sort(rng.choice(pool, ipc, replace=False)))
    chosen = np.concatenate(chosen)
    provenance = {
        "init_seed": seed,
        "source_split": split if isinstance(split, str) else list(split),
        "source_ids": [dataset.ids[i] for i in chosen],
        "classes": list(dataset.classes),
        "dataset_fingerprint": dataset.fingerprint,
        "norm_stats_id": dataset.norm_stats_id,
    }
    pixels = dataset.x[chosen][:, None].astype(np.float32)
    return SyntheticDataset(pixels, dataset.y[chosen].copy(), ipc, dataset.num_classes, provenance)


def sample_segment(pool: TrajectoryPool, e_plus: int, P: int, rng: np.random.Generator):
    """(theta_i, theta_{i+P}, i, j) with j uniform over the pool and i over 0..e_plus-1."""
    if e_plus + P > pool.epochs:
        raise ConfigError(f"e_plus + P = {e_plus + P} exceeds the {pool.epochs} teacher epochs")
    j = int(rng.integers(len(pool)))
    i = int(rng.integers(e_plus))
    traj = pool[j]
    return traj[i], traj[i + P], i, j


class BatchCycler:
    """Consecutive chunks from an endless stream of seeded permutations of range(n)."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, min(n, batch), rng
        self._buf = np.zeros(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._buf) < self.batch:
            self._buf = np.concatenate([self._buf, self.rng.permutation(self.n)])
        out, self._buf = self._buf[: self.batch], self._buf[self.batch :]
        return out


def _gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    n = x.shape[0]
    inner = int(np.prod(x.shape[1:]))
    idx = (rows[:, None] * inner + np.arange(inner)[None, :]).reshape(-1)
    if np.array_equal(rows, np.arange(n)):
        return x
    return ops.gather_flat(x, idx, (len(rows),) + tuple(x.shape[1:]), unique=len(np.unique(rows)) == len(rows))


def unroll(spec: ArchSpec, theta0: Tensor, pixels: Tensor, labels: np.ndarray, alpha: Tensor, Q: int, inner_batch: int, rng: np.random.Generator) -> Tensor:
    """Q recorded SGD steps on the active tape; returns theta_hat_Q."""
    tape = current_tape()
    if tape is None:
        raise RuntimeError("unroll needs an active Tape")
    cycler = BatchCycler(pixels.shape[0], inner_batch, rng)
    theta = theta0
    for _ in range(Q):
        rows = cycler.next()
        loss = softmax_cross_entropy(forward(spec, theta, _gather_rows(pixels, rows)), labels[rows])
        if not np.isfinite(loss.data).all():
            raise NumericError("student loss is not finite")
        (g,) = grad(tape, loss, [theta], create_graph=True)
        theta = ops.sub(theta, ops.mul(alpha, g))
    return theta


def student_unroll(theta_i: ParamVector, syn: SyntheticDataset, alpha: float, Q: int, inner_batch: int, rng: np.random.Generator, spec: ArchSpec, dtype=None):
    """Run the unroll on a fresh tape.

    Returns ``(theta_hat_Q, tape)``; ``tape.leaves`` is ``[pixels, alpha,
    theta_0]`` so callers can differentiate with respect to either of the
    first two.
    """
    if len(syn) == 0:
        raise ValueError("synthetic set is empty")
    dtype = dtype or theta_i.values.dtype
    tape = Tape()
    with tape:
        pixels = tape.leaf(syn.pixels, dtype=dtype)
        a = tape.leaf(np.asarray(alpha, dtype=dtype))
        theta0 = tape.leaf(theta_i.values, dtype=dtype)
        theta = unroll(spec, theta0, pixels, syn.labels, a, Q, inner_batch, rng)
    return theta, tape


def _as_array(p) -> np.ndarray:
    if isinstance(p, ParamVector):
        return p.values
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p)


def _sq_lnorm(d: Tensor, l_norm: int) -> Tensor:
    if l_norm == 2:
        return ops.sum(ops.mul(d, d))
    return ops.power(ops.sum(ops.power(ops.absolute(d), float(l_norm))), 2.0 / l_norm)


def matching_loss(theta_hat, theta_i, theta_target, l_norm: int = 2) -> Tensor:
    """||theta_hat - theta_target||_l^2 / ||theta_i - theta_target||_l^2."""
    target = _as_array(theta_target)
    start = _as_array(theta_i)
    hat = theta_hat if isinstance(theta_hat, Tensor) else Tensor(_as_array(theta_hat))
    if not (hat.shape == start.shape == target.shape):
        raise ValueError("matching_loss needs three vectors of equal length")
    denom = _sq_lnorm(Tensor(start - target), l_norm).data
    if not denom >= 1e-12:
        raise NoTeacherMotion(f"teacher moved only {float(denom):.3g} over the segment")
    num = _sq_lnorm(ops.sub(hat, Tensor(target.astype(hat.dtype))), l_norm)
    return ops.div(num, Tensor(denom.astype(hat.dtype)))


# ------------------------------------------------------------------- loop

def new_state(syn: SyntheticDataset, cfg: DistillConfig) -> DistillState:
    return DistillState(syn.copy(), float(cfg.alpha0), np.random.default_rng([cfg.seed, 3]))


def distill_step(state: DistillState, pool: TrajectoryPool, cfg: DistillConfig) -> DistillState:
    """Sample, unroll, match, and apply one SGD update to pixels and alpha."""
    spec = pool.arch
    for _ in range(cfg.max_resample):
        theta_i, theta_t, i, j = sample_segment(pool, cfg.e_plus, cfg.P, state.rng)
        try:
            matching_loss(theta_i, theta_i, theta_t, cfg.l_norm)
            break
        except NoTeacherMotion:
            continue
    else:
        raise NoTeacherMotion(f"no moving teacher segment found in {cfg.max_resample} draws")

    theta_hat, tape = student_unroll(theta_i, state.syn, state.alpha, cfg.Q, cfg.inner_batch, state.rng, spec)
    pixels, alpha = tape.leaves[0], tape.leaves[1]
    with tape:
        loss = matching_loss(theta_hat, theta_i, theta_t, cfg.l_norm)
    grads = backward(tape, loss, wrt=[pixels, alpha])
    gp, ga = grads[pixels.id].data, float(grads[alpha.id].data)
    if not (np.isfinite(gp).all() and math.isfinite(ga)):
        raise NumericError("meta-gradient is not finite")

    new_pixels = (state.syn.pixels - cfg.pixel_lr * gp).astype(state.syn.pixels.dtype)
    if not np.isfinite(new_pixels).all():
        raise NumericError("synthetic pixels became non-finite")
    state.syn.pixels = new_pixels
    state.alpha = max(state.alpha - cfg.alpha_lr * ga, ALPHA_MIN)
    state.step += 1
    state.log.append(
        {
            "step": state.step,
            "L": float(loss.data),
            "grad_norm_pixels": float(np.linalg.norm(gp.astype(np.float64))),
            "alpha": state.alpha,
            "trajectory_id": j,
            "i": i,
        }
    )
    return state


def write_step_log(path: str | Path, log: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STEP_LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in log:
            w.writerow({k: (repr(rec[k]) if isinstance(rec[k], float) else rec[k]) for k in STEP_LOG_FIELDS})


def read_step_log(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [
            {"step": int(r["step"]), "L": float(r["L"]), "grad_norm_pixels": float(r["grad_norm_pixels"]), "alpha": float(r["alpha"]), "trajectory_id": int(r["trajectory_id"]), "i": int(r["i"])}
            for r in csv.DictReader(fh)
        ]


def _stamp(syn: SyntheticDataset, state: DistillState, cfg: DistillConfig, spec: ArchSpec) -> None:
    syn.provenance.update({"distill": cfg.to_dict(), "guide_arch": spec.to_dict(), "steps_done": state.step, "alpha": state.alpha})


def save_state(state: DistillState, cfg: DistillConfig, spec: ArchSpec, path: str | Path) -> None:
    """Dump enough to inspect or resume a run: DSYN plus a JSON with alpha and RNG state."""
    path = Path(path)
    syn = state.syn.copy()
    _stamp(syn, state, cfg, spec)
    save_synthetic(syn, path)
    meta = {"step": state.step, "alpha": state.alpha, "rng": state.rng.bit_generator.state, "log": state.log}
    path.with_suffix(".state.json").write_text(json.dumps(meta, sort_keys=True, indent=1, default=int) + "\n")


def run_distillation(
    cfg: DistillConfig,
    pool: TrajectoryPool,
    dataset: FeatureDataset,
    out_dir: str | Path | None = None,
    evaluate=None,
    split="train",
) -> tuple[SyntheticDataset, list[dict], list[dict]]:
    """Full run. Returns (final synthetic set, per-step log, checkpoint evals).

    ``evaluate(syn, step)`` is called on a copy of the synthetic set every
    ``cfg.eval_every`` steps and may return a dict to be recorded.  With
    ``out_dir`` set, a DSYN checkpoint is written at every evaluation
    point, plus ``final.dsyn`` and ``steps.csv``.
    """
    if pool.dataset_fingerprint != dataset.fingerprint:
        raise PoolError("trajectory pool was trained on a different dataset")
    spe = math.ceil(len(dataset.indices(pool[0].train_meta.get("train_split", "train"))) / pool[0].train_meta.get("optimizer", {}).get("batch_size", 32))
    cfg.validate(pool.epochs, dataset.class_counts(split), spe)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = new_state(init_synthetic(dataset, cfg.ipc, cfg.seed, split), cfg)
    evals = []
    while state.step < cfg.steps:
        try:
            distill_step(state, pool, cfg)
        except NumericError:
            if out is not None:
                save_state(state, cfg, pool.arch, out / "failed_state.dsyn")
                write_step_log(out / "steps.csv", state.log)
            raise
        if state.step % cfg.eval_every == 0:
            snap = state.syn.copy()
            _stamp(snap, state, cfg, pool.arch)
            if out is not None:
                save_synthetic(snap, out / f"ckpt_step{state.step:04d}.dsyn")
            if evaluate is not None:
                evals.append({"step": state.step, **(evaluate(snap, state.step) or {})})
    final = state.syn.copy()
    _stamp(final, state, cfg, pool.arch)
    if out is not None:
        save_synthetic(final, out / "final.dsyn")
        write_step_log(out / "steps.csv", state.log)
    return final, state.log, evals
