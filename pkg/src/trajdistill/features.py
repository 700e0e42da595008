"""WAV -> log-Mel spectrogram front-end and the LMSP feature file format.

Fixed choices: periodic Hann window, power spectrum, HTK mel scale with
triangular filters over 0-8 kHz, natural log with a 1e-10 floor, and no
centre padding, so ``frames = (len - win) // hop + 1``.
"""
from __future__ import annotations

import hashlib
import io
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import CorruptFile, MalformedWav, TooShort, UnsupportedEncoding

TARGET_RATE = 16000
LOG_FLOOR = 1e-10
PAPER_TARGET_LEN = 95_744  # -> (373, 64)
TOY_TARGET_LEN = 23_808  # -> (92, 64)

_LMSP = struct.Struct("<4sHII")
_NRM = struct.Struct("<4sHI")
LMSP_MAGIC = b"LMSP"
NRM_MAGIC = b"LMNS"
FORMAT_VERSION = 1


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ValueError("audio samples must be finite")

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class LogMelSpec:
    values: np.ndarray  # (frames, mel_bins)
    norm_stats_id: str | None = None

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def stats_id(self) -> str:
        h = hashlib.sha256(self.mean.astype("<f4").tobytes() + self.std.astype("<f4").tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------- audio

def load_wav(data: bytes | str | Path) -> AudioClip:
    """Decode 16-bit PCM WAV (mono or stereo) into float samples in [-1, 1)."""
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWav("missing RIFF/WAVE header")
    try:
        with wave.open(io.BytesIO(data), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedEncoding(str(exc)) from exc
        raise MalformedWav(str(exc)) from exc
    except (EOFError, struct.error) as exc:
        raise MalformedWav(str(exc)) from exc
    if width != 2:
        raise UnsupportedEncoding(f"only 16-bit PCM is supported, got {8 * width}-bit")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"only mono or stereo is supported, got {channels} channels")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        pcm = pcm[: pcm.size // 2 * 2].reshape(-1, 2).mean(axis=1)
    return AudioClip(pcm.astype(np.float32), rate)


def wav_bytes(clip: AudioClip) -> bytes:
    pcm = np.clip(np.round(clip.samples.astype(np.float64) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate))
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def resample_to_16k(clip: AudioClip) -> AudioClip:
    """Linear-interpolation resampling; output length floor(N * 16000 / rate)."""
    if clip.sample_rate == TARGET_RATE:
        return clip
    if clip.sample_rate < 8000:
        raise ValueError(f"sample rate {clip.sample_rate} below the supported 8 kHz minimum")
    n = clip.samples.size
    n_out = n * TARGET_RATE // clip.sample_rate
    t = np.arange(n_out, dtype=np.float64) * (clip.sample_rate / TARGET_RATE)
    out = np.interp(t, np.arange(n, dtype=np.float64), clip.samples.astype(np.float64))
    return AudioClip(out.astype(np.float32), TARGET_RATE)


def unify_duration(clip: AudioClip, target_len: int) -> AudioClip:
    """Truncate long clips; tile short ones by self-repetition, then truncate."""
    n = clip.samples.size
    if n < 1:
        raise ValueError("cannot unify the duration of an empty clip")
    if n == target_len:
        return clip
    if n > target_len:
        return AudioClip(clip.samples[:target_len].copy(), clip.sample_rate)
    reps = -(-target_len // n)
    return AudioClip(np.tile(clip.samples, reps)[:target_len], clip.sample_rate)


# ------------------------------------------------------------------ log-mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_fft: int = 512, sample_rate: int = TARGET_RATE, n_mels: int = 64, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular HTK filterbank, unnormalised."""
    bins = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - lo) / (mid - lo)
    down = (hi - bins) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_spectrogram(samples: np.ndarray, win: int = 512, hop: int = 256) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.size < win:
        raise TooShort(f"clip has {x.size} samples, window needs {win}")
    frames = (x.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(frames)[:, None]
    spec = np.fft.rfft(x[idx] * _hann(win), n=win, axis=1)
    return spec.real**2 + spec.imag**2


def log_mel_spectrogram(clip: AudioClip, win: int = 512, hop: int = 256, mel_bins: int = 64) -> LogMelSpec:
    if clip.sample_rate != TARGET_RATE:
        raise ValueError(f"expected a {TARGET_RATE} Hz clip, got {clip.sample_rate} Hz")
    power = power_spectrogram(clip.samples, win, hop)
    mel = power @ mel_filterbank(win, TARGET_RATE, mel_bins).T
    return LogMelSpec(np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32))


def extract(data: bytes | str | Path, target_len: int) -> LogMelSpec:
    """Full pipeline: decode, resample, unify duration, log-Mel."""
    clip = unify_duration(resample_to_16k(load_wav(data)), target_len)
    return log_mel_spectrogram(clip)


# ------------------------------------------------------------ normalisation

def fit_norm_stats(specs) -> NormStats:
    """Per-mel-bin mean and std over every frame of every spectrogram."""
    stack = np.concatenate([np.asarray(s.values if isinstance(s, LogMelSpec) else s, dtype=np.float64) for s in specs], axis=0)
    mean = stack.mean(axis=0)
    std = np.maximum(stack.std(axis=0), 1e-6)
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def apply_norm(spec: LogMelSpec | np.ndarray, stats: NormStats) -> LogMelSpec:
    v = spec.values if isinstance(spec, LogMelSpec) else np.asarray(spec)
    out = (v.astype(np.float64) - stats.mean) / stats.std
    return LogMelSpec(out.astype(np.float32), stats.stats_id)


# ----------------------------------------------------------------- file I/O

def write_lmsp(path: str | Path, spec: LogMelSpec | np.ndarray) -> None:
    v = np.asarray(spec.values if isinstance(spec, LogMelSpec) else spec, dtype="<f4")
    header = _LMSP.pack(LMSP_MAGIC, FORMAT_VERSION, v.shape[0], v.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(v).tobytes())


def read_lmsp(path: str | Path) -> LogMelSpec:
    raw = Path(path).read_bytes()
    if len(raw) < _LMSP.size:
        raise CorruptFile(f"{path}: truncated LMSP header")
    magic, version, frames, bins = _LMSP.unpack_from(raw)
    if magic != LMSP_MAGIC or version != FORMAT_VERSION:
        raise CorruptFile(f"{path}: not an LMSP v{FORMAT_VERSION} file")
    payload = raw[_LMSP.size :]
    if len(payload) != frames * bins * 4:
        raise CorruptFile(f"{path}: payload has {len(payload)} bytes, header implies {frames * bins * 4}")
    return LogMelSpec(np.frombuffer(payload, dtype="<f4").reshape(frames, bins).astype(np.float32))


def write_norm_stats(path: str | Path, stats: NormStats) -> None:
    pairs = np.stack([stats.mean, stats.std], axis=1).astype("<f4")
    Path(path).write_bytes(_NRM.pack(NRM_MAGIC, FORMAT_VERSION, pairs.shape[0]) + pairs.tobytes())


def read_norm_stats(path: str | Path) -> NormStats:
    raw = Path(path).read_bytes()
    if len(raw) < _NRM.size:
        raise CorruptFile(f"{path}: truncated norm-stats header")
    magic, version, bins = _NRM.unpack_from(raw)
    if magic != NRM_MAGIC or version != FORMAT_VERSION or len(raw) != _NRM.size + bins * 8:
        raise CorruptFile(f"{path}: malformed norm-stats file")
    pairs = np.frombuffer(raw[_NRM.size :], dtype="<f4").reshape(bins, 2)
    return NormStats(pairs[:, 0].astype(np.float32), pairs[:, 1].astype(np.float32))
