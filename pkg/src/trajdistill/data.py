"""Datasets: manifest ingestion, speaker-independent splits, the toy corpus
generator and the DSYN format for distilled sets."""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFile,
    EmptySplit,
    MissingFile,
    ShapeMismatch,
    SplitLeak,
    TooFewSpeakers,
)
from .features import AudioClip, NormStats, apply_norm, extract, fit_norm_stats, read_lmsp, read_norm_stats, wav_bytes, write_lmsp, write_norm_stats

SPLITS = ("train", "val", "test")
TOY_CLASSES = ("anger", "disgust", "fear", "guilt", "happiness", "sadness", "surprise")
MANIFEST_FIELDS = ("path", "label", "speaker", "split")
FEATURE_MANIFEST = "features.csv"
NORM_STATS = "norm_stats.lmns"

_DSYN = struct.Struct("<4sHIIII")
DSYN_MAGIC = b"DSYN"
DSYN_VERSION = 1


@dataclass
class ManifestRow:
    path: str
    label: str
    speaker: str
    split: str


@dataclass
class FeatureDataset:
    """Immutable log-Mel spectrograms with labels, speakers and split tags.

    ``x`` is (N, frames, mel_bins) float32; ``y`` holds class indices into
    ``classes``.
    """

    x: np.ndarray
    y: np.ndarray
    speakers: tuple[str, ...]
    splits: tuple[str, ...]
    classes: tuple[str, ...]
    ids: tuple[str, ...] = ()
    norm_stats_id: str | None = None

    def __post_init__(self):
        n = len(self.x)
        if not self.ids:
            self.ids = tuple(str(i) for i in range(n))
        if not (len(self.y) == len(self.speakers) == len(self.splits) == len(self.ids) == n):
            raise ShapeMismatch("dataset columns have different lengths")
        self.x.setflags(write=False)
        self.y.setflags(write=False)
        check_speaker_disjoint(self.speakers, self.splits)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def input_shape(self) -> tuple[int, int]:
        return tuple(self.x.shape[1:])

    def indices(self, split: str | tuple[str, ...]) -> np.ndarray:
        wanted = (split,) if isinstance(split, str) else tuple(split)
        return np.array([i for i, s in enumerate(self.splits) if s in wanted], dtype=np.int64)

    def arrays(self, split: str | tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
        """(x[N,1,F,M], y[N]) for one split or a union of splits."""
        idx = self.indices(split)
        if idx.size == 0:
            raise EmptySplit(f"split {split!r} is empty")
        return self.x[idx][:, None], self.y[idx]

    def class_counts(self, split: str | tuple[str, ...]) -> np.ndarray:
        return np.bincount(self.y[self.indices(split)], minlength=self.num_classes)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x, dtype="<f4").tobytes())
        h.update(np.asarray(self.y, dtype="<i8").tobytes())
        h.update(json.dumps([self.speakers, self.splits, self.classes]).encode())
        return h.hexdigest()[:32]

    def with_splits(self, splits) -> "FeatureDataset":
        return FeatureDataset(self.x, self.y, self.speakers, tuple(splits), self.classes, self.ids, self.norm_stats_id)


@dataclass
class SyntheticDataset:
    """Learnable per-class spectrograms; labels are fixed and class-major."""

    pixels: np.ndarray  # (ipc * K, 1, F, M)
    labels: np.ndarray  # (ipc * K,)
    ipc: int
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 1:
            raise ShapeMismatch(f"pixels must be (N, 1, F, M), got {self.pixels.shape}")
        if len(self.pixels) != self.ipc * self.num_classes or len(self.labels) != len(self.pixels):
            raise ShapeMismatch("pixel/label counts do not equal ipc * num_classes")
        if not np.array_equal(np.bincount(self.labels, minlength=self.num_classes), np.full(self.num_classes, self.ipc)):
            raise ShapeMismatch("synthetic labels are not exactly ipc per class")

    def __len__(self) -> int:
        return len(self.pixels)

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.pixels.copy(), self.labels.copy(), self.ipc, self.num_classes, json.loads(json.dumps(self.provenance)))


def check_speaker_disjoint(speakers, splits) -> None:
    seen: dict[str, str] = {}
    for spk, split in zip(speakers, splits):
        if split not in SPLITS:
            raise ValueError(f"unknown split tag {split!r}")
        prev = seen.setdefault(spk, split)
        if prev != split:
            raise SplitLeak(f"speaker {spk!r} appears in both {prev!r} and {split!r}")


# ------------------------------------------------------------------ manifest

def read_manifest_rows(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest {path} not found")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:4]) != MANIFEST_FIELDS:
            raise CorruptFile(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        rows = [ManifestRow(r["path"], r["label"], r["speaker"], r["split"]) for r in reader]
    check_speaker_disjoint([r.speaker for r in rows], [r.split for r in rows])
    for split in SPLITS:
        if not any(r.split == split for r in rows):
            raise EmptySplit(f"{path}: split {split!r} has no items")
    return rows


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.path, r.label, r.speaker, r.split])


def read_manifest(path: str | Path, norm_stats: NormStats | str | Path | None = None) -> FeatureDataset:
    """Load a manifest of LMSP files, optionally z-normalising every item.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    rows = read_manifest_rows(path)
    specs = []
    for r in rows:
        p = Path(r.path) if Path(r.path).is_absolute() else path.parent / r.path
        if not p.exists():
            raise MissingFile(f"feature file {p} listed in {path} not found")
        specs.append(read_lmsp(p).values)
    shapes = {s.shape for s in specs}
    if len(shapes) != 1:
        raise ShapeMismatch(f"{path}: feature files have differing shapes {sorted(shapes)}")
    stats_id = None
    if norm_stats is not None:
        stats = norm_stats if isinstance(norm_stats, NormStats) else read_norm_stats(norm_stats)
        specs = [apply_norm(s, stats).values for s in specs]
        stats_id = stats.stats_id
    classes = tuple(sorted({r.label for r in rows}))
    lookup = {c: i for i, c in enumerate(classes)}
    return FeatureDataset(
        x=np.stack(specs).astype(np.float32),
        y=np.array([lookup[r.label] for r in rows], dtype=np.int64),
        speakers=tuple(r.speaker for r in rows),
        splits=tuple(r.split for r in rows),
        classes=classes,
        ids=tuple(r.path for r in rows),
        norm_stats_id=stats_id,
    )


def featurize_manifest(manifest: str | Path, out_dir: str | Path, target_len: int) -> Path:
    """Extract LMSP features for every WAV in a manifest.

    Writes ``lmsp/*.lmsp``, a feature manifest and per-bin normalisation
    statistics fitted on the train split; returns the feature manifest path.
    """
    manifest = Path(manifest)
    out = Path(out_dir)
    rows = read_manifest_rows(manifest)
    (out / "lmsp").mkdir(parents=True, exist_ok=True)
    new_rows, train_specs, seen = [], [], set()
    for r in rows:
        src = Path(r.path) if Path(r.path).is_absolute() else manifest.parent / r.path
        if not src.exists():
            raise MissingFile(f"audio file {src} listed in {manifest} not found")
        rel = f"lmsp/{Path(r.path).stem}.lmsp"
        if rel in seen:
            raise ValueError(f"two audio files map to the feature file {rel}")
        seen.add(rel)
        spec = extract(src, target_len)
        write_lmsp(out / rel, spec)
        new_rows.append(ManifestRow(rel, r.label, r.speaker, r.split))
        if r.split == "train":
            train_specs.append(spec)
    write_norm_stats(out / NORM_STATS, fit_norm_stats(train_specs))
    write_manifest(out / FEATURE_MANIFEST, new_rows)
    return out / FEATURE_MANIFEST


def load_features(features_dir: str | Path) -> FeatureDataset:
    """Read a featurize_manifest output directory with normalisation applied."""
    d = Path(features_dir)
    for name in (FEATURE_MANIFEST, NORM_STATS):
        if not (d / name).exists():
            raise MissingFile(f"{d / name} not found")
    return read_manifest(d / FEATURE_MANIFEST, d / NORM_STATS)


# ---------------------------------------------------------- speaker splits

def assign_speaker_splits(speakers, ratios=(0.4, 0.3, 0.3), seed: int = 0) -> dict[str, str]:
    """Map each speaker to a split so sample counts approach ``ratios``.

    Speakers are shuffled with ``seed`` and then visited largest first; the
    first three seed one split each and every later speaker joins the split
    furthest below its target count.
    """
    names, counts = np.unique(np.asarray(list(speakers), dtype=str), return_counts=True)
    if len(names) < 3:
        raise TooFewSpeakers(f"need at least 3 speakers, got {len(names)}")
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive numbers")
    ratios = np.asarray(ratios, dtype=np.float64) / np.sum(ratios)
    perm = np.random.default_rng(seed).permutation(len(names))
    order = perm[np.argsort(-counts[perm], kind="stable")]
    target = ratios * counts.sum()
    filled = np.zeros(3)
    out = {}
    for rank, k in enumerate(order):
        s = rank if rank < 3 else int(np.argmax(target - filled))
        out[str(names[k])] = SPLITS[s]
        filled[s] += counts[k]
    return out


def split_speaker_independent(dataset: FeatureDataset, ratios=(0.4, 0.3, 0.3), seed: int = 0) -> FeatureDataset:
    mapping = assign_speaker_splits(dataset.speakers, ratios, seed)
    return dataset.with_splits(mapping[s] for s in dataset.speakers)


# -------------------------------------------------------------- toy corpus

def synth_toy_clip(cls: int, f0_scale: float, rng: np.random.Generator, seconds: float = 1.5, rate: int = 16000, snr_db: float = 10.0) -> np.ndarray:
    """One clip of class ``cls``: a 3-harmonic chirp with amplitude modulation.

    Class c has base pitch 200 + 100c Hz (times the speaker's ``f0_scale``),
    modulation rate 2 + c Hz and chirp slope 50c Hz/s; white noise is added
    at ``snr_db``.
    """
    t = np.arange(int(round(seconds * rate))) / rate
    f0 = (200.0 + 100.0 * cls) * f0_scale * (1.0 + 0.02 * rng.standard_normal())
    phase = 2 * np.pi * (f0 * t + 0.5 * 50.0 * cls * t**2)
    tone = sum(np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h for h in (1, 2, 3))
    depth = rng.uniform(0.5, 0.9)
    env = (1.0 + depth * np.sin(2 * np.pi * (2.0 + cls) * t + rng.uniform(0, 2 * np.pi))) / (1.0 + depth)
    signal = tone * env
    signal *= 0.3 / np.sqrt(np.mean(signal**2))
    noise_power = np.mean(signal**2) / 10 ** (snr_db / 10)
    out = signal + rng.standard_normal(t.size) * np.sqrt(noise_power)
    return np.clip(out, -1.0, 32767 / 32768)


def gen_toy_dataset(
    out_dir: str | Path,
    num_speakers: int = 10,
    clips_per_speaker_class: int = 10,
    seed: int = 0,
    f0_jitter: float = 0.25,
    ratios=(0.4, 0.3, 0.3),
) -> Path:
    """Write a 7-class WAV corpus plus ``manifest.csv``; returns the manifest path.

    Every speaker gets a pitch scale drawn uniformly from 1 +/- ``f0_jitter``,
    which blurs the pitch cue between neighbouring classes.
    """
    if num_speakers < 3:
        raise TooFewSpeakers(f"need at least 3 speakers, got {num_speakers}")
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speakers = [f"spk{i:02d}" for i in range(num_speakers)]
    scales = 1.0 + rng.uniform(-f0_jitter, f0_jitter, size=num_speakers)
    mapping = assign_speaker_splits(
        np.repeat(speakers, len(TOY_CLASSES) * clips_per_speaker_class), ratios, seed
    )
    rows = []
    for spk, scale in zip(speakers, scales):
        for c, name in enumerate(TOY_CLASSES):
            for k in range(clips_per_speaker_class):
                rel = f"wav/{spk}_{name}_{k:02d}.wav"
                clip = AudioClip(synth_toy_clip(c, scale, rng), 16000)
                (out / rel).write_bytes(wav_bytes(clip))
                rows.append(ManifestRow(rel, name, spk, mapping[spk]))
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


# ---------------------------------------------------------------- DSYN I/O

def save_synthetic(ds: SyntheticDataset, path: str | Path) -> None:
    """Write the DSYN binary plus a ``.json`` provenance sidecar."""
    n, _, f, m = ds.pixels.shape
    body = (
        _DSYN.pack(DSYN_MAGIC, DSYN_VERSION, ds.num_classes, ds.ipc, f, m)
        + np.ascontiguousarray(ds.pixels, dtype="<f4").tobytes()
        + ds.labels.astype("<u2").tobytes()
    )
    path = Path(path)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(ds.provenance, sort_keys=True, indent=1) + "\n")


def load_synthetic(path: str | Path) -> SyntheticDataset:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} not found")
    raw = path.read_bytes()
    if len(raw) < _DSYN.size + 4:
        raise CorruptFile(f"{path}: truncated DSYN file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    magic, version, k, ipc, f, m = _DSYN.unpack_from(body)
    if magic != DSYN_MAGIC or version != DSYN_VERSION:
        raise CorruptFile(f"{path}: not a DSYN v{DSYN_VERSION} file")
    n = k * ipc
    if len(body) != _DSYN.size + n * f * m * 4 + n * 2:
        raise CorruptFile(f"{path}: payload size does not match header")
    off = _DSYN.size
    pixels = np.frombuffer(body, dtype="<f4", count=n * f * m, offset=off).reshape(n, 1, f, m).astype(np.float32)
    labels = np.frombuffer(body, dtype="<u2", count=n, offset=off + n * f * m * 4).astype(np.int64)
    side = path.with_suffix(path.suffix + ".json")
    provenance = json.loads(side.read_text()) if side.exists() else {}
    return SyntheticDataset(pixels, labels, ipc, k, provenance)
