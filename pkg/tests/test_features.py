import io
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdistill.errors import CorruptFile, MalformedWav, TooShort, UnsupportedEncoding
from trajdistill.features import (
    LOG_FLOOR,
    AudioClip,
    NormStats,
    apply_norm,
    extract,
    fit_norm_stats,
    hz_to_mel,
    load_wav,
    log_mel_spectrogram,
    mel_filterbank,
    mel_to_hz,
    read_lmsp,
    read_norm_stats,
    resample_to_16k,
    unify_duration,
    wav_bytes,
    write_lmsp,
    write_norm_stats,
)


def pcm_wav(frames: np.ndarray, rate=16000, width=2) -> bytes:
    frames = np.asarray(frames)
    channels = 1 if frames.ndim == 1 else frames.shape[1]
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(frames.astype("<i2" if width == 2 else "u1").tobytes())
    return buf.getvalue()


def test_load_silence():
    clip = load_wav(pcm_wav(np.zeros(100, dtype=np.int16)))
    assert clip.sample_rate == 16000
    np.testing.assert_array_equal(clip.samples, 0)


def test_load_scale_law():
    assert load_wav(pcm_wav(np.array([16384, -32768], dtype=np.int16))).samples.tolist() == [0.5, -1.0]


def test_load_stereo_averages():
    lr = np.tile(np.array([[round(0.2 * 32768), round(0.4 * 32768)]], dtype=np.int16), (50, 1))
    np.testing.assert_allclose(load_wav(pcm_wav(lr)).samples, 0.3, atol=1e-4)


def test_load_errors():
    with pytest.raises(MalformedWav):
        load_wav(b"not a wav file at all")
    good = pcm_wav(np.zeros(10, dtype=np.int16))
    with pytest.raises(MalformedWav):
        load_wav(good[:30])
    with pytest.raises(UnsupportedEncoding):
        load_wav(pcm_wav(np.zeros(10), width=1))


def test_resample_identity_and_length():
    clip = AudioClip(np.arange(100) / 100, 16000)
    assert resample_to_16k(clip) is clip
    assert len(resample_to_16k(AudioClip(np.zeros(1000), 8000))) == 2000
    assert len(resample_to_16k(AudioClip(np.zeros(441), 44100))) == 160


@given(rate=st.integers(8000, 48000), value=st.floats(-0.9, 0.9), n=st.integers(1, 400))
@settings(max_examples=30, deadline=None)
def test_resample_preserves_constants(rate, value, n):
    out = resample_to_16k(AudioClip(np.full(n, value), rate))
    np.testing.assert_allclose(out.samples, np.float32(value), rtol=0, atol=1e-7)


def test_unify_duration():
    abc = AudioClip([1.0, 2.0, 3.0], 16000)
    assert unify_duration(abc, 7).samples.tolist() == [1, 2, 3, 1, 2, 3, 1]
    ten = AudioClip(np.arange(10) / 10, 16000)
    np.testing.assert_array_equal(unify_duration(ten, 4).samples, ten.samples[:4])
    assert unify_duration(ten, 10) is ten


def test_paper_shape():
    clip = AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, 95_744), 16000)
    assert log_mel_spectrogram(clip).shape == (373, 64)


def test_mel_scale_points():
    assert hz_to_mel(0) == 0
    assert hz_to_mel(700) == pytest.approx(2595 * np.log10(2))
    assert hz_to_mel(700) == pytest.approx(781.17, abs=0.01)
    assert mel_to_hz(hz_to_mel(1234.5)) == pytest.approx(1234.5)


def test_silence_hits_floor():
    spec = log_mel_spectrogram(AudioClip(np.zeros(4000), 16000))
    np.testing.assert_array_equal(spec.values, np.float32(np.log(LOG_FLOOR)))
    assert np.log(LOG_FLOOR) == pytest.approx(-23.0259, abs=1e-4)


def test_too_short():
    with pytest.raises(TooShort):
        log_mel_spectrogram(AudioClip(np.zeros(511), 16000))


@given(n=st.integers(512, 5000))
@settings(max_examples=30, deadline=None)
def test_frame_count_formula(n):
    spec = log_mel_spectrogram(AudioClip(np.full(n, 0.1), 16000))
    assert spec.frames == (n - 512) // 256 + 1 and spec.mel_bins == 64


def test_filterbank_shape_and_ordering():
    fb = mel_filterbank()
    assert fb.shape == (64, 257)
    assert (fb.sum(axis=1) > 0).all()
    centres = fb.argmax(axis=1)
    assert (np.diff(centres) >= 0).all()
    assert all((fb[i] * fb[i + 1]).sum() > 0 for i in range(10, 63))


def test_energy_monotonicity():
    x = np.random.default_rng(1).uniform(-0.3, 0.3, 3000)
    lo = log_mel_spectrogram(AudioClip(x, 16000)).values
    hi = log_mel_spectrogram(AudioClip(2 * x, 16000)).values
    above = lo > np.log(LOG_FLOOR) + 1e-3
    assert above.any() and (hi[above] > lo[above]).all()


def test_pipeline_determinism(tmp_path):
    raw = wav_bytes(AudioClip(np.random.default_rng(2).uniform(-0.5, 0.5, 30_000), 22050))
    a, b = extract(raw, 23_808), extract(raw, 23_808)
    assert a.shape == (92, 64)
    assert a.values.tobytes() == b.values.tobytes()


def test_norm_stats():
    rng = np.random.default_rng(3)
    specs = [rng.normal(5, 3, (20, 4)).astype(np.float32) for _ in range(3)]
    specs[0][:, 2] = specs[1][:, 2] = specs[2][:, 2] = 7.0
    stats = fit_norm_stats(specs)
    normed = np.concatenate([apply_norm(s, stats).values for s in specs])
    np.testing.assert_allclose(normed[:, [0, 1, 3]].mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(normed[:, [0, 1, 3]].std(axis=0), 1, atol=1e-5)
    np.testing.assert_array_equal(normed[:, 2], 0)
    assert stats.std[2] == np.float32(1e-6)


def test_apply_norm_is_affine():
    stats = NormStats(np.array([1.0, -2.0], dtype=np.float32), np.array([2.0, 0.5], dtype=np.float32))
    x = np.array([[3.0, 1.0], [0.0, -1.0]])
    a, b = 2.0, 0.5
    lhs = apply_norm(a * x + b, stats).values
    rhs = a * apply_norm(x, stats).values + (b + (a - 1) * stats.mean) / stats.std
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


def test_lmsp_and_stats_round_trip(tmp_path):
    v = np.random.default_rng(4).standard_normal((5, 3)).astype(np.float32)
    write_lmsp(tmp_path / "a.lmsp", v)
    assert read_lmsp(tmp_path / "a.lmsp").values.tobytes() == v.tobytes()
    raw = (tmp_path / "a.lmsp").read_bytes()
    (tmp_path / "b.lmsp").write_bytes(raw[:-4])
    with pytest.raises(CorruptFile):
        read_lmsp(tmp_path / "b.lmsp")
    stats = fit_norm_stats([v])
    write_norm_stats(tmp_path / "s.lmns", stats)
    back = read_norm_stats(tmp_path / "s.lmns")
    assert back.mean.tobytes() == stats.mean.tobytes() and back.std.tobytes() == stats.std.tobytes()
    assert back.stats_id == stats.stats_id
