"""Synthetic speech-like corpus for smoke tests and demos.

A "speaker" is a pitch range, a vocal-tract length factor and a spectral
tilt; an utterance is a sequence of vowel-like and fricative-like segments
rendered with a glottal pulse train through formant resonators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .audio import SAMPLE_RATE, Waveform

_VOWELS = np.array(
    [
        [730, 1090, 2440],
        [270, 2290, 3010],
        [530, 1840, 2480],
        [300, 870, 2240],
        [640, 1190, 2390],
        [490, 1350, 1690],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class ToySpeaker:
    name: str
    f0: float = 120.0
    tract: float = 1.0  # formant scaling
    tilt: float = 0.97  # one-pole lowpass coefficient on the source
    breath: float = 0.02


def _resonator(x, freq, bw):
    r = np.exp(-np.pi * bw / SAMPLE_RATE)
    theta = 2 * np.pi * freq / SAMPLE_RATE
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1 - r], a, x)


def synth_utterance(speaker: ToySpeaker, duration_s: float, seed: int = 0, utt_id: str | None = None) -> Waveform:
    rng = np.random.default_rng(seed)
    n = int(duration_s * SAMPLE_RATE)
    out = np.zeros(n)
    pos = 0
    phase = 0.0
    while pos < n:
        seg = min(n - pos, int(rng.uniform(0.08, 0.22) * SAMPLE_RATE))
        t = np.arange(seg) / SAMPLE_RATE
        env = np.sin(np.pi * np.arange(seg) / seg) ** 0.5
        if rng.random() < 0.8:
            f0 = speaker.f0 * (1 + 0.15 * rng.uniform(-1, 1)) * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 5) * t))
            inst = phase + np.cumsum(f0) / SAMPLE_RATE
            phase = float(inst[-1] % 1.0)
            src = (np.diff(np.floor(inst), prepend=np.floor(inst[0])) > 0).astype(np.float64)
            src = lfilter([1.0], [1.0, -speaker.tilt], src) + speaker.breath * rng.standard_normal(seg)
            formants = _VOWELS[rng.integers(len(_VOWELS))] * speaker.tract
            y = sum(_resonator(src, f, 60 + 0.04 * f) * g for f, g in zip(formants, (1.0, 0.6, 0.3)))
        else:
            noise = rng.standard_normal(seg)
            y = 0.3 * _resonator(noise, rng.uniform(3000, 6000) * speaker.tract, 1500)
        out[pos : pos + seg] = y * env
        pos += seg
    out = out / (np.max(np.abs(out)) + 1e-9) * 0.6
    return Waveform(out.astype(np.float32), SAMPLE_RATE, utt_id or f"{speaker.name}_{seed}")


def toy_speakers() -> list[ToySpeaker]:
    return [
        ToySpeaker("spk_low", f0=100.0, tract=0.9, tilt=0.98, breath=0.01),
        ToySpeaker("spk_mid", f0=150.0, tract=1.0, tilt=0.96, breath=0.02),
        ToySpeaker("spk_high", f0=220.0, tract=1.15, tilt=0.93, breath=0.04),
    ]


def toy_corpus(n_utterances: int = 3, duration_s: float = 6.0, seed: int = 0) -> list[Waveform]:
    speakers = toy_speakers()
    return [
        synth_utterance(speakers[i % len(speakers)], duration_s, seed=seed + i, utt_id=f"{speakers[i % len(speakers)].name}_utt{i}")
        for i in range(n_utterances)
    ]
