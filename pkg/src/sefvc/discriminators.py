"""Multi-period and multi-scale waveform discriminators."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .exceptions import ConfigError, TooShortError

LRELU_SLOPE = 0.1


@dataclass
class DiscriminatorConfig:
    periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    n_scales: int = 3
    width: int = 32  # MPD tops out at 8 * width, MSD at 8 * width

    def __post_init__(self):
        self.periods = tuple(int(p) for p in self.periods)
        if self.width < 2 or self.width % 2:
            raise ConfigError(f"discriminator width must be an even integer >= 2, got {self.width}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["periods"] = list(self.periods)
        return d


class DiscriminatorOutput(NamedTuple):
    scores: list[torch.Tensor]
    feature_maps: list[list[torch.Tensor]]


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, width: int):
        super().__init__()
        self.period = period
        chans = [1, width, 2 * width, 4 * width, 8 * width]
        self.convs = nn.ModuleList(
            weight_norm(nn.Conv2d(chans[i], chans[i + 1], (5, 1), (3, 1), padding=(2, 0))) for i in range(4)
        )
        self.convs.append(weight_norm(nn.Conv2d(chans[-1], chans[-1], (5, 1), 1, padding=(2, 0))))
        self.conv_post = weight_norm(nn.Conv2d(chans[-1], 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):
        b, t = x.shape
        if t % self.period:
            n_pad = self.period - t % self.period
            x = F.pad(x.unsqueeze(1), (0, n_pad), "reflect").squeeze(1)
            t = t + n_pad
        x = x.view(b, 1, t // self.period, self.period)
        fmap = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return torch.flatten(x, 1), fmap


class ScaleDiscriminator(nn.Module):
    _spec = [  # (out multiple of width/2, kernel, stride, groups)
        (1, 15, 1, 1),
        (2, 41, 2, 4),
        (4, 41, 2, 16),
        (8, 41, 4, 16),
        (16, 41, 4, 16),
        (16, 41, 1, 16),
        (16, 5, 1, 1),
    ]

    def __init__(self, width: int):
        super().__init__()
        base = width // 2
        self.convs = nn.ModuleList()
        c_in = 1
        for mult, k, s, g in self._spec:
            c_out = base * mult
            groups = math.gcd(math.gcd(c_in, c_out), g)
            self.convs.append(weight_norm(nn.Conv1d(c_in, c_out, k, s, groups=groups, padding=k // 2)))
            c_in = c_out
        self.conv_post = weight_norm(nn.Conv1d(c_in, 1, 3, 1, padding=1))

    def forward(self, x):
        x = x.unsqueeze(1)
        fmap = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return torch.flatten(x, 1), fmap


def halve(x: torch.Tensor) -> torch.Tensor:
    """Average-pool by 2 after right edge replication: length -> ceil(len / 2)."""
    if x.shape[-1] % 2:
        x = torch.cat([x, x[..., -1:]], dim=-1)
    return F.avg_pool1d(x.unsqueeze(1), 2, 2).squeeze(1)


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, periods=(2, 3, 5, 7, 11), width: int = 32):
        super().__init__()
        self.periods = tuple(periods)
        self.discriminators = nn.ModuleList(PeriodDiscriminator(p, width) for p in self.periods)

    def forward(self, wav) -> DiscriminatorOutput:
        if wav.dim() == 1:
            wav = wav.unsqueeze(0)
        if wav.shape[-1] <= max(self.periods):
            raise TooShortError(f"MPD needs more than {max(self.periods)} samples, got {wav.shape[-1]}")
        scores, fmaps = [], []
        for d in self.discriminators:
            s, f = d(wav)
            scores.append(s)
            fmaps.append(f)
        return DiscriminatorOutput(scores, fmaps)


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, n_scales: int = 3, width: int = 32):
        super().__init__()
        self.discriminators = nn.ModuleList(ScaleDiscriminator(width) for _ in range(n_scales))

    def forward(self, wav) -> DiscriminatorOutput:
        if wav.dim() == 1:
            wav = wav.unsqueeze(0)
        if wav.shape[-1] < 1:
            raise TooShortError("MSD got an empty waveform")
        scores, fmaps = [], []
        x = wav
        for i, d in enumerate(self.discriminators):
            if i > 0:
                x = halve(x)
            s, f = d(x)
            scores.append(s)
            fmaps.append(f)
        return DiscriminatorOutput(scores, fmaps)


class Discriminators(nn.Module):
    """MPD and MSD side by side; outputs are concatenated MPD-first."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        self.mpd = MultiPeriodDiscriminator(cfg.periods, cfg.width)
        self.msd = MultiScaleDiscriminator(cfg.n_scales, cfg.width)

    def forward(self, wav) -> DiscriminatorOutput:
        p = self.mpd(wav)
        s = self.msd(wav)
        return DiscriminatorOutput(p.scores + s.scores, p.feature_maps + s.feature_maps)
