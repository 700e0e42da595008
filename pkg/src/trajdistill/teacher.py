"""Teacher training with per-epoch snapshots, trajectory pools and TRAJ files."""
from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureDataset
from .errors import ArchMismatch, CorruptFile, MissingFile, NumericError, PoolError
from .metrics import metrics_from_predictions
from .models import ArchSpec, ParamVector, build_model, forward, make_layout, predict
from .tensor import Tape, grad, softmax_cross_entropy

_TRAJ = struct.Struct("<4sH32sII")
TRAJ_MAGIC = b"TRAJ"
TRAJ_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 1e-3
    decay: float = 0.7
    decay_every: int = 5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr0 <= 0:
            raise ValueError("epochs, batch_size and lr0 must be positive")


def lr_schedule(epoch: int, lr0: float = 1e-3, decay: float = 0.7, every: int = 5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay ** (epoch // every)


class Adam:
    """Adam with bias correction, updating a flat float vector in place."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8, dtype=np.float32):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray, lr: float) -> None:
        self.t += 1
        with np.errstate(all="ignore"):
            self._update(params, g, lr)

    def _update(self, params, g, lr):
        self.m *= self.b1
        self.m += (1 - self.b1) * g
        self.v *= self.b2
        self.v += (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        params -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params.dtype)


def loss_and_grad(spec: ArchSpec, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    with Tape() as tape:
        theta = tape.leaf(values)
        loss = softmax_cross_entropy(forward(spec, theta, x), y)
        (g,) = grad(tape, loss, [theta])
    return float(loss.data), g.data


def fit(spec: ArchSpec, x: np.ndarray, y: np.ndarray, seed: int, cfg: TrainConfig, on_epoch=None) -> ParamVector:
    """Adam training from a fresh seeded init with the step-decay schedule.

    ``on_epoch(epoch, params, train_loss)`` runs after every epoch; epoch
    numbering starts at 1.  Returns the final parameters.
    """
    params = build_model(spec, seed)
    values = params.values.copy()
    opt = Adam(values.size, cfg.betas, cfg.eps, values.dtype)
    rng = np.random.default_rng([seed, 1])
    x = np.asarray(x, dtype=values.dtype)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr0, cfg.decay, cfg.decay_every)
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, g = loss_and_grad(spec, values, x[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"training loss diverged at epoch {epoch + 1}")
            opt.step(values, g, lr)
            total += loss * len(idx)
        if not np.isfinite(values).all():
            raise NumericError(f"parameters became non-finite at epoch {epoch + 1}")
        if on_epoch is not None:
            on_epoch(epoch + 1, params.replace(values.copy()), total / len(x))
    return params.replace(values)


# ------------------------------------------------------------- trajectories

@dataclass
class TeacherTrajectory:
    snapshots: list[ParamVector]
    arch: ArchSpec
    train_meta: dict = field(default_factory=dict)
    dataset_fingerprint: str = ""

    def __post_init__(self):
        if not self.snapshots:
            raise ValueError("a trajectory needs at least one snapshot")
        ids = {p.arch_id for p in self.snapshots}
        sizes = {len(p) for p in self.snapshots}
        if ids != {self.arch.arch_id} or len(sizes) != 1:
            raise ArchMismatch("snapshots do not share the trajectory's architecture")

    @property
    def epochs(self) -> int:
        return len(self.snapshots) - 1

    def __getitem__(self, i: int) -> ParamVector:
        return self.snapshots[i]


@dataclass
class TrajectoryPool:
    trajectories: list[TeacherTrajectory]
    dataset_fingerprint: str

    def __post_init__(self):
        if not self.trajectories:
            raise PoolError("a pool needs at least one trajectory")
        arch_ids = {t.arch.arch_id for t in self.trajectories}
        prints = {t.dataset_fingerprint for t in self.trajectories}
        if len(arch_ids) != 1:
            raise PoolError("pool members use different architectures")
        if prints != {self.dataset_fingerprint}:
            raise PoolError("pool members were trained on different datasets")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, j: int) -> TeacherTrajectory:
        return self.trajectories[j]

    @property
    def arch(self) -> ArchSpec:
        return self.trajectories[0].arch

    @property
    def epochs(self) -> int:
        return min(t.epochs for t in self.trajectories)


def train_teacher(spec: ArchSpec, dataset: FeatureDataset, seed: int, cfg: TrainConfig = TrainConfig(), train_split="train", val_split="val") -> TeacherTrajectory:
    """Train on ``train_split`` and keep theta_0 plus one snapshot per epoch."""
    x, y = dataset.arrays(train_split)
    xv, yv = dataset.arrays(val_split)
    init = build_model(spec, seed)
    snapshots = [init]
    history = []

    def record(epoch, params, train_loss):
        snapshots.append(params)
        m = metrics_from_predictions(yv, predict(spec, params, xv), dataset.num_classes)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": m.accuracy, "val_uar": m.uar})

    fit(spec, x, y, seed, cfg, on_epoch=record)
    meta = {
        "seed": seed,
        "optimizer": {"name": "adam", **asdict(cfg), "betas": list(cfg.betas)},
        "train_split": train_split,
        "val_split": val_split,
        "history": history,
    }
    return TeacherTrajectory(snapshots, spec, meta, dataset.fingerprint)


def _train_job(args):
    return train_teacher(*args)


def build_pool(spec: ArchSpec, dataset: FeatureDataset, n: int = 5, base_seed: int = 0, cfg: TrainConfig = TrainConfig(), workers: int = 1, train_split="train", val_split="val") -> TrajectoryPool:
    """``n`` teachers with seeds base_seed .. base_seed + n - 1."""
    if n < 1:
        raise ValueError("pool size must be >= 1")
    jobs = [(spec, dataset, base_seed + k, cfg, train_split, val_split) for k in range(n)]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n)) as ex:
            trajs = list(ex.map(_train_job, jobs))
    else:
        trajs = [_train_job(j) for j in jobs]
    return TrajectoryPool(trajs, dataset.fingerprint)


# ------------------------------------------------------------------ TRAJ I/O

def save_trajectory(traj: TeacherTrajectory, path: str | Path) -> None:
    """Binary snapshots (f32 LE, CRC32-terminated) plus a ``.json`` sidecar."""
    stack = np.stack([p.values for p in traj.snapshots]).astype("<f4")
    body = _TRAJ.pack(TRAJ_MAGIC, TRAJ_VERSION, traj.arch.arch_id.encode("ascii"), traj.epochs, stack.shape[1]) + stack.tobytes()
    path = Path(path)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    side = {"arch": traj.arch.to_dict(), "dataset_fingerprint": traj.dataset_fingerprint, "train_meta": traj.train_meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, sort_keys=True, indent=1) + "\n")


def load_trajectory(path: str | Path, spec: ArchSpec | None = None) -> TeacherTrajectory:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} not found")
    raw = path.read_bytes()
    if len(raw) < _TRAJ.size + 4:
        raise CorruptFile(f"{path}: truncated TRAJ file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    magic, version, arch_hash, epochs, count = _TRAJ.unpack_from(body)
    if magic != TRAJ_MAGIC or version != TRAJ_VERSION:
        raise CorruptFile(f"{path}: not a TRAJ v{TRAJ_VERSION} file")
    if len(body) != _TRAJ.size + (epochs + 1) * count * 4:
        raise CorruptFile(f"{path}: payload size does not match header")
    side_path = path.with_suffix(path.suffix + ".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    if spec is None:
        if "arch" not in side:
            raise CorruptFile(f"{path}: no ArchSpec given and sidecar {side_path} missing")
        spec = ArchSpec.from_dict(side["arch"])
    if spec.arch_id.encode("ascii") != arch_hash:
        raise ArchMismatch(f"{path} was written for arch {arch_hash.decode()}, expected {spec.arch_id}")
    layout = make_layout(spec)
    stack = np.frombuffer(body, dtype="<f4", offset=_TRAJ.size).reshape(epochs + 1, count).astype(np.float32)
    snaps = [ParamVector(spec.arch_id, row.copy(), layout) for row in stack]
    return TeacherTrajectory(snaps, spec, side.get("train_meta", {}), side.get("dataset_fingerprint", ""))
