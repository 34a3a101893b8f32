import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from sefvc.audio import (
    LOG_EPS,
    MelExtractor,
    PPEExtractor,
    Waveform,
    compute_mel,
    extract_ppe,
    load_waveform,
    save_waveform,
)
from sefvc.exceptions import AudioError, TooShortError

from .helpers import sine


def _autocorr_pitch(x, sr=16000, fmin=60, fmax=400):
    """Independent oracle: biased autocorrelation of the whole signal, integer-lag peak."""
    x = x - x.mean()
    r = np.correlate(x, x, mode="full")[x.size - 1 :]
    lo, hi = int(sr / fmax), int(sr / fmin)
    return sr / (lo + np.argmax(r[lo:hi]))


# -- load / save ----------------------------------------------------------


def test_load_16k_mono(tmp_path):
    x = (np.random.default_rng(0).uniform(-0.5, 0.5, 32000) * 32767).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", 16000, x)
    w = load_waveform(tmp_path / "a.wav")
    assert len(w) == 32000 and w.sample_rate == 16000
    np.testing.assert_allclose(w.samples, x / 32768.0, atol=1e-7)


@pytest.mark.parametrize("sr,n", [(48000, 48000), (44100, 44100), (22050, 12345), (8000, 4001)])
def test_resampled_length(tmp_path, sr, n):
    x = (0.1 * np.sin(np.arange(n) * 0.01) * 32767).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", sr, x)
    assert len(load_waveform(tmp_path / "a.wav")) == (n * 16000) // sr


def test_stereo_policy(tmp_path):
    left = np.full(1000, 1000, np.int16)
    right = np.full(1000, 3000, np.int16)
    wavfile.write(tmp_path / "s.wav", 16000, np.stack([left, right], axis=1))
    w = load_waveform(tmp_path / "s.wav")
    np.testing.assert_allclose(w.samples, 2000 / 32768.0, atol=1e-7)
    with pytest.raises(AudioError):
        load_waveform(tmp_path / "s.wav", stereo="error")


def test_peak_normalised(tmp_path):
    wavfile.write(tmp_path / "f.wav", 16000, np.array([0.5, -4.0, 2.0], np.float32))
    w = load_waveform(tmp_path / "f.wav")
    assert np.max(np.abs(w.samples)) == pytest.approx(1.0)


@pytest.mark.parametrize("content", [b"", b"RIFF garbage"])
def test_unreadable(tmp_path, content):
    (tmp_path / "bad.wav").write_bytes(content)
    with pytest.raises(AudioError):
        load_waveform(tmp_path / "bad.wav")


def test_zero_length(tmp_path):
    wavfile.write(tmp_path / "z.wav", 16000, np.zeros(0, np.int16))
    with pytest.raises(AudioError):
        load_waveform(tmp_path / "z.wav")


def test_save_load_round_trip(tmp_path):
    w = sine(300, 0.5, 0.5)
    save_waveform(tmp_path / "o.wav", w)
    sr, raw = wavfile.read(tmp_path / "o.wav")
    assert sr == 16000 and raw.dtype == np.int16
    np.testing.assert_allclose(load_waveform(tmp_path / "o.wav").samples, w.samples, atol=1 / 32767)


# -- mel ------------------------------------------------------------------


@pytest.mark.parametrize("hop,frames", [(10, 100), (20, 50)])
def test_mel_frame_counts(hop, frames):
    mel = compute_mel(sine(440), hop)
    assert mel.values.shape == (frames, 80)


def test_silence_is_log_eps():
    mel = compute_mel(Waveform(np.zeros(16000, np.float32)), 20)
    np.testing.assert_allclose(mel.values, np.log(LOG_EPS), rtol=0, atol=1e-6)


def test_too_short_for_window():
    with pytest.raises(TooShortError):
        compute_mel(Waveform(np.zeros(799, np.float32)), 10)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**31 - 1))
def test_two_to_one_frame_contract(n_tokens, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n_tokens * 320).astype(np.float32)
    w = Waveform(x)
    assert compute_mel(w, 10).n_frames == 2 * compute_mel(w, 20).n_frames


@settings(max_examples=25, deadline=None)
@given(st.integers(800, 4000), st.floats(1e-6, 1.0), st.integers(0, 2**31 - 1))
def test_mel_always_finite(n, scale, seed):
    x = (scale * np.random.default_rng(seed).standard_normal(n)).astype(np.float32)
    assert np.all(np.isfinite(compute_mel(Waveform(np.clip(x, -1, 1)), 20).values))


def test_mel_peak_bin_tracks_frequency():
    low = compute_mel(sine(300), 20).values.mean(axis=0).argmax()
    high = compute_mel(sine(3000), 20).values.mean(axis=0).argmax()
    assert high > low


# -- PPE ------------------------------------------------------------------


def test_sine_pitch_matches_autocorrelation_oracle():
    w = sine(220)
    oracle = _autocorr_pitch(w.samples.astype(np.float64))
    assert abs(oracle - 16000 / 72.7) / 220 < 0.02  # oracle itself sits at lag ~72.7
    track = extract_ppe(w)
    assert abs(np.median(track.pitch) - 220) <= 0.05 * 220
    assert abs(np.median(track.pitch) - oracle) <= 0.05 * oracle
    assert np.all(track.pov[1:-1] > 0.5)


@pytest.mark.parametrize("f0", [70, 110, 180, 260, 380])
def test_pitch_across_range(f0):
    assert np.median(extract_ppe(sine(f0)).pitch) == pytest.approx(f0, rel=0.02)


def test_silence_ppe():
    t = extract_ppe(Waveform(np.zeros(16000, np.float32)))
    assert np.all(t.energy == 0) and np.all(t.pitch == 0) and np.all(t.pov == 0)


def test_white_noise_mostly_unvoiced():
    x = np.random.default_rng(1).uniform(-1, 1, 32000).astype(np.float32)
    t = extract_ppe(Waveform(x))
    assert np.mean(t.pov < 0.45) >= 0.9


def test_ppe_shapes_and_ranges(corpus):
    t = extract_ppe(corpus[0])
    assert len(t.pitch) == len(corpus[0]) // 320
    assert np.all((t.pov >= 0) & (t.pov <= 1)) and np.all(t.energy >= 0)
    assert np.all(t.pitch[t.pov < 0.45] == 0)


def test_ppe_too_short():
    with pytest.raises(TooShortError):
        extract_ppe(Waveform(np.zeros(399, np.float32)))


def test_ppe_deterministic(corpus):
    a, b = extract_ppe(corpus[1]), extract_ppe(corpus[1])
    np.testing.assert_array_equal(a.pitch, b.pitch)
    np.testing.assert_array_equal(a.energy, b.energy)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 1.0))
def test_scaling_scales_energy_only(c):
    base = sine(165, 0.6, 0.9)
    scaled = Waveform(base.samples * np.float32(c))
    a, b = extract_ppe(base), extract_ppe(scaled)
    np.testing.assert_allclose(b.energy, c * a.energy, rtol=1e-4, atol=1e-7)
    voiced = (a.pitch > 0) & (b.pitch > 0)
    assert voiced.sum() >= len(a) - 2
    assert np.max(np.abs(a.pitch[voiced] - b.pitch[voiced])) < 1.0


def test_as_features_log_pitch():
    t = extract_ppe(sine(200))
    feats = t.as_features()
    assert feats.shape == (len(t), 3)
    np.testing.assert_allclose(feats[:, 0], np.where(t.pitch > 0, np.log1p(t.pitch), 0), rtol=1e-6)


def test_extractors_are_estimators():
    w = sine(200)
    assert MelExtractor(hop_ms=20).fit().transform(w).shape == (50, 80)
    assert PPEExtractor().get_params()["threshold"] == 0.45
    custom = PPEExtractor(pitch_tracker=lambda x: (np.full(3, 100.0), np.ones(3), np.zeros(3)))
    assert custom.transform(w)[:, 1].tolist() == [1.0, 1.0, 1.0]
