"""Run profiles, JSON run configs and compression-ratio bookkeeping."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .distill import DistillConfig
from .errors import ConfigError
from .features import PAPER_TARGET_LEN, TOY_TARGET_LEN
from .models import ArchSpec

# Speaker-independent DEMoS partition sizes.
PAPER_SPLIT_SIZES = {"train": 3729, "val": 3310, "test": 2326}

PROFILE_SHAPES = {"paper": (373, 64), "toy": (92, 64)}
PROFILE_TARGET_LEN = {"paper": PAPER_TARGET_LEN, "toy": TOY_TARGET_LEN}


@dataclass
class RunConfig:
    profile: str = "toy"
    features_dir: str = "features"
    trajectory_dir: str = "trajectories"
    output_dir: str = "out"
    archs: list[dict] = field(default_factory=list)  # guide architectures
    eval_archs: list[dict] = field(default_factory=list)
    distill: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    teacher_base_seed: int = 0
    pool_size: int = 5
    teacher_epochs: int = 20
    teacher_batch_size: int = 32
    ipcs: list[int] = field(default_factory=lambda: [1, 5, 10])
    eval_epochs: int = 30
    eval_split: str = "val"
    source_split: str = "train"
    checkpoint_eval: bool = False
    include_control: bool = True
    split_sizes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.profile not in PROFILE_SHAPES:
            raise ConfigError(f"profile must be one of {sorted(PROFILE_SHAPES)}, got {self.profile!r}")
        if self.pool_size < 1 or self.teacher_epochs < 1 or self.eval_epochs < 1:
            raise ConfigError("pool_size, teacher_epochs and eval_epochs must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(i < 1 for i in self.ipcs):
            raise ConfigError("every ipc must be >= 1")
        shape = list(PROFILE_SHAPES[self.profile])
        for a in self.archs + self.eval_archs:
            if list(a.get("input_shape", shape)) != shape:
                raise ConfigError(f"architecture {a.get('name')} input_shape {a.get('input_shape')} conflicts with the {self.profile} profile {shape}")
        try:
            self.distill_config()
            self.arch_specs()
            self.eval_specs()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def input_shape(self) -> tuple[int, int]:
        return PROFILE_SHAPES[self.profile]

    @property
    def target_len(self) -> int:
        return PROFILE_TARGET_LEN[self.profile]

    def _specs(self, entries) -> list[ArchSpec]:
        return [ArchSpec.from_dict({**a, "input_shape": self.input_shape}) for a in entries]

    def arch_specs(self) -> list[ArchSpec]:
        return self._specs(self.archs)

    def eval_specs(self) -> list[ArchSpec]:
        return self._specs(self.eval_archs or self.archs)

    def distill_config(self, **overrides) -> DistillConfig:
        return DistillConfig(**{**self.distill, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def profile_defaults(profile: str) -> RunConfig:
    if profile == "paper":
        archs = [{"name": n} for n in ("cnn6", "resnet9", "vgg15")]
        return RunConfig(
            profile="paper",
            archs=archs,
            distill=DistillConfig().to_dict(),
            pool_size=5,
            teacher_epochs=50,
            ipcs=[1, 5, 10, 50, 100, 150],
            split_sizes=dict(PAPER_SPLIT_SIZES),
        )
    if profile == "toy":
        return RunConfig(
            profile="toy",
            archs=[{"name": "cnn4_tiny"}, {"name": "cnn6", "channel_scale": 0.0625}],
            distill=DistillConfig(e_plus=12, pixel_lr=100.0, alpha0=3e-3, alpha_lr=1e-7).to_dict(),
            pool_size=5,
            teacher_epochs=20,
            ipcs=[1, 5, 10],
        )
    raise ConfigError(f"unknown profile {profile!r}")


def load_config(path: str | Path | None, profile: str | None = None) -> RunConfig:
    """Profile defaults overlaid with the keys present in a JSON file."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    profile = profile or data.get("profile", "toy")
    base = profile_defaults(profile).to_dict()
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "distill" in data:
        data["distill"] = {**base["distill"], **data["distill"]}
    return RunConfig(**{**base, **data, "profile": profile})


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")


# ------------------------------------------------------------ compression

def compression_report(ipc: int, num_classes: int = 7, split_sizes: dict | None = None) -> dict:
    """Synthetic-set size as a percentage of the train and train+val splits."""
    sizes = split_sizes or PAPER_SPLIT_SIZES
    n_syn = ipc * num_classes
    train = sizes["train"]
    train_val = sizes["train"] + sizes["val"]
    return {
        "ipc": ipc,
        "synthetic_samples": n_syn,
        "train_samples": train,
        "train_val_samples": train_val,
        "pct_of_train": round(100.0 * n_syn / train, 1),
        "pct_of_train_val": round(100.0 * n_syn / train_val, 1),
    }


def compression_table(ipcs, num_classes: int = 7, split_sizes: dict | None = None) -> list[dict]:
    return [compression_report(i, num_classes, split_sizes) for i in ipcs]
