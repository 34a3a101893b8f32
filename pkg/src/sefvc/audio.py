"""Waveform I/O, log-mel spectrograms and pitch/voicing/energy tracks."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import AudioError, TooShortError

SAMPLE_RATE = 16000
TOKEN_HOP = 320  # samples per 20 ms token frame
LOG_EPS = 1e-5

N_FFT = 1024
WIN_LENGTH = 800  # 50 ms
PITCH_WIN = 400  # 25 ms


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise AudioError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise AudioError("zero-length audio")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def crop(self, start: int, stop: int) -> "Waveform":
        return Waveform(self.samples[start:stop], self.sample_rate, self.source_id)


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # frames x n_mels
    hop_ms: int

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_mels(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class ProsodyTrack:
    pitch: np.ndarray
    pov: np.ndarray
    energy: np.ndarray
    hop_ms: int = 20

    def __post_init__(self):
        if not (len(self.pitch) == len(self.pov) == len(self.energy)):
            raise AudioError("pitch, pov and energy tracks differ in length")

    def __len__(self) -> int:
        return int(len(self.pitch))

    def as_features(self) -> np.ndarray:
        """Stack into ``(frames, 3)``: log(1 + F0) on voiced frames, POV, energy."""
        logf0 = np.where(self.pitch > 0, np.log1p(self.pitch), 0.0)
        return np.stack([logf0, self.pov, self.energy], axis=1).astype(np.float32)

    def slice(self, start: int, stop: int) -> "ProsodyTrack":
        return ProsodyTrack(self.pitch[start:stop], self.pov[start:stop], self.energy[start:stop], self.hop_ms)


# ---------------------------------------------------------------------------
# I/O


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioError(f"unsupported sample encoding {data.dtype}")


def load_waveform(path, stereo: str = "average") -> Waveform:
    """Read a PCM WAV file as a mono 16 kHz waveform.

    ``stereo`` chooses what happens with multi-channel input: ``"average"``
    downmixes, ``"error"`` raises. Samples whose peak exceeds 1 are rescaled
    to unit peak; quieter signals keep their level.
    """
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"no such file: {path}")
    try:
        sr, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise AudioError(f"unreadable wav {path}: {exc}") from exc
    x = _to_float(np.asarray(data))
    if x.ndim == 2:
        if x.shape[1] == 1:
            x = x[:, 0]
        elif stereo == "average":
            x = x.mean(axis=1)
        else:
            raise AudioError(f"{path} has {x.shape[1]} channels; mono expected")
    if x.size == 0:
        raise AudioError(f"zero-length audio in {path}")
    if sr != SAMPLE_RATE:
        n_out = (x.size * SAMPLE_RATE) // sr
        g = math.gcd(SAMPLE_RATE, sr)
        x = resample_poly(x, SAMPLE_RATE // g, sr // g)[:n_out]
        if x.size == 0:
            raise AudioError(f"zero-length audio after resampling {path}")
    peak = float(np.max(np.abs(x)))
    if peak > 1.0:
        x = x / peak
    return Waveform(x.astype(np.float32), SAMPLE_RATE, str(path))


def save_waveform(path, wav: Waveform | np.ndarray) -> None:
    """Write 16-bit PCM at 16 kHz."""
    samples = wav.samples if isinstance(wav, Waveform) else np.asarray(wav, dtype=np.float32)
    pcm = np.clip(np.round(samples.astype(np.float64) * 32767.0), -32768, 32767).astype(np.int16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, SAMPLE_RATE, pcm)


# ---------------------------------------------------------------------------
# mel front-end


def _hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    logstep = math.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(f >= min_log_hz, min_log_hz / f_sp + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mel)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@functools.lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = 80, n_fft: int = N_FFT, sr: int = SAMPLE_RATE, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Slaney-style triangular filters with area normalisation, ``(n_mels, n_fft//2+1)``."""
    fmax = sr / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    hz = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(hz)
    ramps = hz[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz[2 : n_mels + 2] - hz[:n_mels]))[:, None]
    weights.flags.writeable = False
    return weights


def hop_samples(hop_ms: int) -> int:
    if hop_ms not in (10, 20):
        raise AudioError(f"hop_ms must be 10 or 20, got {hop_ms}")
    return SAMPLE_RATE * hop_ms // 1000


def log_mel(wav: torch.Tensor, hop_ms: int = 20, n_mels: int = 80) -> torch.Tensor:
    """Differentiable log-mel of ``(batch, samples)`` audio -> ``(batch, frames, n_mels)``.

    Frames are centre-padded and the trailing partial frame dropped, so
    ``frames == samples // hop``.
    """
    hop = hop_samples(hop_ms)
    squeeze = wav.dim() == 1
    if squeeze:
        wav = wav.unsqueeze(0)
    n = wav.shape[-1]
    if n < WIN_LENGTH:
        raise TooShortError(f"{n} samples is shorter than one {WIN_LENGTH}-sample analysis window")
    window = torch.hann_window(WIN_LENGTH, dtype=wav.dtype, device=wav.device)
    spec = torch.stft(
        wav, N_FFT, hop_length=hop, win_length=WIN_LENGTH, window=window,
        center=True, pad_mode="reflect", return_complex=True,
    )
    power = spec.real.pow(2) + spec.imag.pow(2)
    mag = torch.sqrt(power + 1e-12)[..., : n // hop]
    fb = torch.tensor(mel_filterbank(n_mels), dtype=wav.dtype, device=wav.device)
    mel = torch.matmul(fb, mag)
    out = torch.log(torch.clamp(mel, min=LOG_EPS)).transpose(1, 2)
    return out[0] if squeeze else out


def compute_mel(w: Waveform, hop_ms: int = 10, n_mels: int = 80) -> MelSpectrogram:
    with torch.no_grad():
        values = log_mel(torch.from_numpy(w.samples), hop_ms, n_mels).numpy()
    return MelSpectrogram(values, hop_ms)


# ---------------------------------------------------------------------------
# pitch / voicing / energy


def nccf_pitch(
    samples: np.ndarray,
    sr: int = SAMPLE_RATE,
    hop: int = TOKEN_HOP,
    win: int = PITCH_WIN,
    fmin: float = 60.0,
    fmax: float = 400.0,
    threshold: float = 0.45,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalised cross-correlation F0 tracker.

    Returns ``(pitch_hz, pov, energy)`` per centre-padded frame. POV is the
    clipped peak NCCF value; frames whose peak is below ``threshold`` get
    pitch 0.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < win:
        raise TooShortError(f"{x.size} samples is shorter than the {win}-sample pitch window")
    n_frames = x.size // hop
    min_lag = max(2, int(math.floor(sr / fmax)))
    max_lag = int(math.ceil(sr / fmin))
    span = win + max_lag + 1
    half = win // 2
    padded = np.concatenate([np.zeros(half), x, np.zeros(span)])
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, span)[starts]

    sq = frames * frames
    csum = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(sq, axis=1)], axis=1)
    e0 = csum[:, win]
    energy = np.sqrt(e0 / win)

    lags = np.arange(min_lag - 1, max_lag + 2)
    ref = frames[:, :win]
    nccf = np.empty((n_frames, lags.size))
    for j, lag in enumerate(lags):
        num = np.einsum("ij,ij->i", ref, frames[:, lag : lag + win])
        elag = csum[:, lag + win] - csum[:, lag]
        den = np.sqrt(e0 * elag)
        nccf[:, j] = np.where(den > 1e-20, num / np.where(den > 1e-20, den, 1.0), 0.0)

    inner = nccf[:, 1:-1]
    is_peak = (inner >= nccf[:, :-2]) & (inner >= nccf[:, 2:])
    best = inner.max(axis=1)
    # smallest-lag local peak close to the global maximum guards against octave-down errors
    candidate = is_peak & (inner >= 0.95 * best[:, None]) & (best[:, None] > 0)
    first = np.where(candidate.any(axis=1), candidate.argmax(axis=1), inner.argmax(axis=1))

    rows = np.arange(n_frames)
    a = nccf[rows, first]
    b = nccf[rows, first + 1]
    c = nccf[rows, first + 2]
    denom = a - 2 * b + c
    offset = np.where(np.abs(denom) > 1e-12, 0.5 * (a - c) / np.where(np.abs(denom) > 1e-12, denom, 1.0), 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    lag_f = lags[first + 1] + offset

    pov = np.clip(b, 0.0, 1.0)
    voiced = b >= threshold
    pitch = np.where(voiced, sr / lag_f, 0.0)
    return pitch, pov, energy


def extract_ppe(w: Waveform, threshold: float = 0.45, fmin: float = 60.0, fmax: float = 400.0) -> ProsodyTrack:
    pitch, pov, energy = nccf_pitch(w.samples, w.sample_rate, TOKEN_HOP, PITCH_WIN, fmin, fmax, threshold)
    return ProsodyTrack(pitch, pov, energy, hop_ms=20)


# ---------------------------------------------------------------------------
# estimator wrappers


class MelExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping waveforms to log-mel matrices."""

    def __init__(self, hop_ms: int = 10, n_mels: int = 80):
        self.hop_ms = hop_ms
        self.n_mels = n_mels

    def fit(self, X=None, y=None):
        hop_samples(self.hop_ms)
        return self

    def transform(self, X):
        if isinstance(X, Waveform):
            return compute_mel(X, self.hop_ms, self.n_mels).values
        return [compute_mel(w, self.hop_ms, self.n_mels).values for w in X]


class PPEExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer producing ``(frames, 3)`` prosody features.

    ``pitch_tracker`` may replace the built-in tracker; it must accept the
    sample array and return ``(pitch_hz, pov, energy)`` at a 20 ms hop.
    """

    def __init__(self, threshold: float = 0.45, fmin: float = 60.0, fmax: float = 400.0, pitch_tracker=None):
        self.threshold = threshold
        self.fmin = fmin
        self.fmax = fmax
        self.pitch_tracker = pitch_tracker

    def fit(self, X=None, y=None):
        return self

    def track(self, w: Waveform) -> ProsodyTrack:
        if self.pitch_tracker is not None:
            return ProsodyTrack(*self.pitch_tracker(w.samples), hop_ms=20)
        return extract_ppe(w, self.threshold, self.fmin, self.fmax)

    def transform(self, X):
        if isinstance(X, Waveform):
            return self.track(X).as_features()
        return [self.track(w).as_features() for w in X]
