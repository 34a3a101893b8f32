"""Generator and discriminator objectives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

from .audio import log_mel
from .exceptions import ConfigError, NonFiniteLossError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    rec: float = 45.0
    feat: float = 2.0
    mel: float = 60.0
    aux: float = 5.0
    adv: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    l_rec: float
    l_feat: float
    l_mel: float
    l_aux: float
    l_adv: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _masked_l1(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a - b).abs()
    if mask is None:
        return diff.mean()
    m = mask.to(diff.dtype)
    while m.dim() < diff.dim():
        m = m.unsqueeze(-1)
    m = m.expand_as(diff)
    return (diff * m).sum() / m.sum().clamp_min(1.0)


def reconstruction_loss(real_wav, fake_wav, frame_mask=None, n_mels: int = 80) -> torch.Tensor:
    """L1 between 20 ms-hop log-mels of the real and generated waveforms."""
    if real_wav.shape != fake_wav.shape:
        raise ShapeError(f"waveform lengths differ: {tuple(real_wav.shape)} vs {tuple(fake_wav.shape)}")
    return _masked_l1(log_mel(real_wav, 20, n_mels), log_mel(fake_wav, 20, n_mels), frame_mask)


def feature_matching_loss(real_maps, fake_maps) -> torch.Tensor:
    """Mean absolute difference, averaged over every map of every sub-discriminator.

    Real maps are treated as constants.
    """
    if len(real_maps) != len(fake_maps):
        raise ShapeError("feature map structures differ in sub-discriminator count")
    terms = []
    for dr, dg in zip(real_maps, fake_maps):
        if len(dr) != len(dg):
            raise ShapeError("feature map structures differ in layer count")
        for r, g in zip(dr, dg):
            r = torch.as_tensor(r)
            g = torch.as_tensor(g)
            if r.shape != g.shape:
                raise ShapeError(f"feature map shapes differ: {tuple(r.shape)} vs {tuple(g.shape)}")
            terms.append((r.detach() - g).abs().mean())
    if not terms:
        raise ShapeError("no feature maps given")
    return torch.stack(terms).mean()


def encoder_mel_loss(mel_head_output, target_mel, frame_mask=None) -> torch.Tensor:
    return _masked_l1(mel_head_output, target_mel, frame_mask)


def aux_loss(ppe_pred, ppe_gt, frame_mask=None) -> torch.Tensor:
    return _masked_l1(ppe_pred, ppe_gt, frame_mask)


def adversarial_losses(real_scores, fake_scores) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN terms averaged over sub-discriminators.

    Returns ``(g_adv, d_loss)`` with ``d_loss = mean((real - 1)^2) + mean(fake^2)``
    and ``g_adv = mean((fake - 1)^2)`` per sub-discriminator. Pass fake scores
    computed on detached audio when forming ``d_loss``.
    """
    if len(real_scores) != len(fake_scores):
        raise ShapeError("score structures differ")
    d_terms, g_terms = [], []
    for r, f in zip(real_scores, fake_scores):
        r = torch.as_tensor(r)
        f = torch.as_tensor(f)
        d_terms.append(((r - 1) ** 2).mean() + (f**2).mean())
        g_terms.append(((f - 1) ** 2).mean())
    return torch.stack(g_terms).mean(), torch.stack(d_terms).mean()


def generator_adversarial_loss(fake_scores) -> torch.Tensor:
    return torch.stack([((torch.as_tensor(f) - 1) ** 2).mean() for f in fake_scores]).mean()


def discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    return adversarial_losses(real_scores, fake_scores)[1]


def total_generator_loss(components: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of the five generator terms.

    ``components`` maps ``rec, feat, mel, aux, adv`` to scalars (floats or
    0-d tensors). Returns ``(total, breakdown)``; ``total`` keeps the autograd
    graph when tensors are given.
    """
    names = ("rec", "feat", "mel", "aux", "adv")
    missing = [n for n in names if n not in components]
    if missing:
        raise KeyError(f"missing loss components: {missing}")
    values = {}
    for n in names:
        v = components[n]
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(fv):
            raise NonFiniteLossError(f"loss component {n} is not finite ({fv})")
        values[n] = fv
    total = sum(getattr(weights, n) * components[n] for n in names)
    breakdown = LossBreakdown(
        l_rec=values["rec"], l_feat=values["feat"], l_mel=values["mel"], l_aux=values["aux"], l_adv=values["adv"],
        total=math.fsum(getattr(weights, n) * values[n] for n in names),
    )
    return total, breakdown
