"""Generator network: token embedding, two conformer encoders with
cross-attention to the encoded reference, prosody adaptor, HiFiGAN-style
waveform generator.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .exceptions import ConfigError, ModeError, ShapeError

SAMPLES_PER_TOKEN = 320
LRELU_SLOPE = 0.1


@dataclass
class ModelConfig:
    vocab_size: int = 2000
    attn_dim: int = 184
    attn_heads: int = 2
    conformer_blocks_per_encoder: int = 2
    ff_mult: int = 4
    conv_kernel: int = 15
    conv_kernel_mel_encoder: int = 5
    max_rel_pos: int = 64
    n_mels: int = 80
    ppe_dim: int = 3
    upsample_rates: tuple[int, ...] = (5, 4, 4, 4)
    upsample_initial_channel: int = 128
    resblock_kernel_sizes: tuple[int, ...] = (3, 7, 11)
    resblock_dilations: tuple[int, ...] = (1, 3, 5)
    speaker_mode: str = "cross_attention"
    speaker_embedding_dim: int = 512

    def __post_init__(self):
        self.upsample_rates = tuple(int(u) for u in self.upsample_rates)
        self.resblock_kernel_sizes = tuple(int(k) for k in self.resblock_kernel_sizes)
        self.resblock_dilations = tuple(int(d) for d in self.resblock_dilations)
        if self.attn_dim % self.attn_heads:
            raise ConfigError(f"attn_dim {self.attn_dim} is not divisible by attn_heads {self.attn_heads}")
        if math.prod(self.upsample_rates) != SAMPLES_PER_TOKEN:
            raise ConfigError(f"upsample_rates {self.upsample_rates} multiply to {math.prod(self.upsample_rates)}, need {SAMPLES_PER_TOKEN}")
        if self.upsample_initial_channel >> len(self.upsample_rates) < 1:
            raise ConfigError("upsample_initial_channel too small for the number of upsampling stages")
        if self.speaker_mode not in ("cross_attention", "embedding"):
            raise ConfigError(f"speaker_mode must be 'cross_attention' or 'embedding', got {self.speaker_mode!r}")
        if self.conv_kernel % 2 == 0 or self.conv_kernel_mel_encoder % 2 == 0:
            raise ConfigError("convolution kernels must be odd")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ReferenceMemory(NamedTuple):
    """Encoded reference frames ``(B, T_ref, D)`` with a validity mask ``(B, T_ref)``.

    No positional information is attached to the frames.
    """

    values: torch.Tensor
    mask: torch.Tensor

    def permute(self, perm: torch.Tensor) -> "ReferenceMemory":
        return ReferenceMemory(self.values[:, perm], self.mask[:, perm])


class BackboneOutput(NamedTuple):
    waveform: torch.Tensor  # (B, 320 * T)
    mel: torch.Tensor  # (B, T, n_mels)
    ppe_pred: torch.Tensor  # (B, T, 3)


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


# ---------------------------------------------------------------------------
# attention


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention.

    With ``max_rel_pos`` set, a learned per-head bias indexed by the clipped
    query-key offset is added to the logits (self-attention). Without it the
    keys carry no positional signal at all (cross-attention).
    """

    def __init__(self, dim: int, heads: int, max_rel_pos: int | None = None):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.max_rel_pos = max_rel_pos
        if max_rel_pos is not None:
            self.rel_bias = nn.Embedding(2 * max_rel_pos + 1, heads)
            nn.init.normal_(self.rel_bias.weight, std=0.02)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, key_value, key_mask=None):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key_value))
        v = self._split(self.v_proj(key_value))
        logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if self.max_rel_pos is not None:
            tq, tk = query.shape[1], key_value.shape[1]
            offset = torch.arange(tk, device=query.device)[None, :] - torch.arange(tq, device=query.device)[:, None]
            offset = offset.clamp(-self.max_rel_pos, self.max_rel_pos) + self.max_rel_pos
            logits = logits + self.rel_bias(offset).permute(2, 0, 1).unsqueeze(0)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out_proj(out)


def cross_attend(attn: MultiHeadAttention, queries: torch.Tensor, memory: ReferenceMemory) -> torch.Tensor:
    if not bool(memory.mask.any(dim=1).all()):
        raise ShapeError("reference memory is fully masked for at least one batch item")
    return attn(queries, memory.values, memory.mask)


# ---------------------------------------------------------------------------
# conformer


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.lin1 = nn.Linear(dim, dim * mult)
        self.lin2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.lin2(F.silu(self.lin1(self.norm(x))))


class ConvModule(nn.Module):
    # LayerNorm replaces BatchNorm after the depthwise conv: batch statistics
    # would couple padded batch items.
    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise1 = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise2 = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        x = F.glu(self.pointwise1(self.norm(x)), dim=-1)
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        x = self.depthwise(x.transpose(1, 2)).transpose(1, 2)
        x = F.silu(self.mid_norm(x))
        return self.pointwise2(x)


class ConformerBlock(nn.Module):
    """Macaron conformer block with cross-attention between self-attention
    and the convolution module."""

    def __init__(self, cfg: ModelConfig, cross_attention: bool = True):
        super().__init__()
        d = cfg.attn_dim
        self.ff1 = FeedForward(d, cfg.ff_mult)
        self.self_norm = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.attn_heads, cfg.max_rel_pos)
        if cross_attention:
            self.cross_norm = nn.LayerNorm(d)
            self.cross_attn = MultiHeadAttention(d, cfg.attn_heads, None)
        else:
            self.cross_attn = None
        self.conv = ConvModule(d, cfg.conv_kernel)
        self.ff2 = FeedForward(d, cfg.ff_mult)
        self.final_norm = nn.LayerNorm(d)

    def forward(self, x, mask=None, memory: ReferenceMemory | None = None):
        x = x + 0.5 * self.ff1(x)
        x = x + self.self_attn(self.self_norm(x), self.self_norm(x), mask)
        if self.cross_attn is not None:
            x = x + cross_attend(self.cross_attn, self.cross_norm(x), memory)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        x = self.final_norm(x)
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        return x


class SemanticEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, cross_attention: bool = True):
        super().__init__()
        self.blocks = nn.ModuleList(ConformerBlock(cfg, cross_attention) for _ in range(cfg.conformer_blocks_per_encoder))

    def forward(self, x, mask=None, memory=None):
        for block in self.blocks:
            x = block(x, mask, memory)
        return x


class MelEncoder(nn.Module):
    """Single-conv pre-net mapping reference log-mels to attention memory."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.conv_kernel_mel_encoder
        self.conv = nn.Conv1d(cfg.n_mels, cfg.attn_dim, k, padding=k // 2)

    def forward(self, mel, mask=None) -> ReferenceMemory:
        if mel.dim() != 3 or mel.shape[1] < 1:
            raise ShapeError(f"reference mel must be (batch, frames>=1, n_mels), got {tuple(mel.shape)}")
        if mask is None:
            mask = torch.ones(mel.shape[:2], dtype=torch.bool, device=mel.device)
        mel = mel * mask.unsqueeze(-1)
        h = self.conv(mel.transpose(1, 2)).transpose(1, 2)
        return ReferenceMemory(h * mask.unsqueeze(-1), mask)


class FeatureAdaptor(nn.Module):
    """Predicts (log F0, POV, energy) and re-injects a projection of the
    ground-truth or predicted track into the residual stream."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.attn_dim
        self.conv1 = nn.Conv1d(d, d, 3, padding=1)
        self.norm1 = nn.LayerNorm(d)
        self.conv2 = nn.Conv1d(d, d, 3, padding=1)
        self.norm2 = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.ppe_dim)
        self.embed = nn.Linear(cfg.ppe_dim, d)

    def predict(self, hidden, mask=None):
        h = hidden if mask is None else hidden * mask.unsqueeze(-1)
        h = self.norm1(F.relu(self.conv1(h.transpose(1, 2)).transpose(1, 2)))
        if mask is not None:
            h = h * mask.unsqueeze(-1)
        h = self.norm2(F.relu(self.conv2(h.transpose(1, 2)).transpose(1, 2)))
        return self.out(h)

    def forward(self, hidden, mask=None, gt_ppe=None):
        pred = self.predict(hidden, mask)
        source = gt_ppe if gt_ppe is not None else pred
        return hidden + self.embed(source), pred


# ---------------------------------------------------------------------------
# waveform generator


def _padding(kernel: int, dilation: int = 1) -> int:
    return (kernel * dilation - dilation) // 2


class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, dilations):
        super().__init__()
        self.convs1 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel, dilation=d, padding=_padding(kernel, d))) for d in dilations
        )
        self.convs2 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel, padding=_padding(kernel))) for _ in dilations
        )

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c2(F.leaky_relu(c1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE))
            x = x + xt
        return x


class HifiGenerator(nn.Module):
    """Transposed-conv upsampler with multi-receptive-field residual blocks.

    Produces exactly ``prod(upsample_rates)`` samples per input frame.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.upsample_initial_channel
        self.conv_pre = weight_norm(nn.Conv1d(cfg.attn_dim, ch, 7, padding=3))
        if cfg.speaker_mode == "embedding":
            self.spk_proj = nn.Conv1d(cfg.speaker_embedding_dim, ch, 1)
        else:
            self.spk_proj = None
        self.ups = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        for i, u in enumerate(cfg.upsample_rates):
            c_in, c_out = ch >> i, ch >> (i + 1)
            self.ups.append(
                weight_norm(nn.ConvTranspose1d(c_in, c_out, 2 * u, stride=u, padding=u // 2 + u % 2, output_padding=u % 2))
            )
            for k in cfg.resblock_kernel_sizes:
                self.resblocks.append(ResBlock(c_out, k, cfg.resblock_dilations))
        self.num_kernels = len(cfg.resblock_kernel_sizes)
        self.conv_post = weight_norm(nn.Conv1d(ch >> len(cfg.upsample_rates), 1, 7, padding=3))

    def forward(self, hidden, speaker_embedding=None):
        x = self.conv_pre(hidden.transpose(1, 2))
        if self.spk_proj is not None:
            x = x + self.spk_proj(speaker_embedding.unsqueeze(-1))
        for i, up in enumerate(self.ups):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            blocks = self.resblocks[i * self.num_kernels : (i + 1) * self.num_kernels]
            x = sum(block(x) for block in blocks) / self.num_kernels
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x).squeeze(1)


# ---------------------------------------------------------------------------
# full backbone


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        cross = cfg.speaker_mode == "cross_attention"
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.attn_dim)
        self.mel_encoder = MelEncoder(cfg) if cross else None
        self.encoder1 = SemanticEncoder(cfg, cross)
        self.adaptor = FeatureAdaptor(cfg)
        self.encoder2 = SemanticEncoder(cfg, cross)
        self.mel_head = nn.Linear(cfg.attn_dim, cfg.n_mels)
        self.generator = HifiGenerator(cfg)

    def encode_reference(self, mel: torch.Tensor, mask: torch.Tensor | None = None) -> ReferenceMemory:
        if self.mel_encoder is None:
            raise ModeError("speaker-embedding mode has no reference encoder")
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        return self.mel_encoder(mel, mask)

    def forward(
        self,
        tokens: torch.Tensor,
        reference: torch.Tensor | ReferenceMemory | None = None,
        token_mask: torch.Tensor | None = None,
        ref_mask: torch.Tensor | None = None,
        gt_ppe: torch.Tensor | None = None,
        speaker_embedding: torch.Tensor | None = None,
    ) -> BackboneOutput:
        """Run tokens ``(B, T)`` against a reference log-mel ``(B, T_ref, n_mels)``
        or an already encoded :class:`ReferenceMemory`.

        ``gt_ppe`` ``(B, T, 3)`` is required in training mode and refused in
        eval mode.
        """
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[1] < 1:
            raise ShapeError("token sequence is empty")
        if self.training and gt_ppe is None:
            raise ModeError("training mode requires ground-truth PPE")
        if not self.training and gt_ppe is not None:
            raise ModeError("ground-truth PPE is only accepted in training mode")

        memory = None
        if self.cfg.speaker_mode == "cross_attention":
            if reference is None:
                raise ModeError("cross-attention mode needs a reference mel")
            memory = reference if isinstance(reference, ReferenceMemory) else self.encode_reference(reference, ref_mask)
            if memory.values.shape[1] < 1:
                raise ShapeError("reference is empty")
        elif speaker_embedding is None:
            raise ModeError("speaker-embedding mode needs a speaker vector")
        elif speaker_embedding.dim() == 1:
            speaker_embedding = speaker_embedding.unsqueeze(0)

        h = self.embedding(tokens)
        if token_mask is not None:
            h = h * token_mask.unsqueeze(-1)
        h = self.encoder1(h, token_mask, memory)
        h, ppe_pred = self.adaptor(h, token_mask, gt_ppe)
        h = self.encoder2(h, token_mask, memory)
        mel = self.mel_head(h)
        wav = self.generator(h, speaker_embedding)
        return BackboneOutput(wav, mel, ppe_pred)


def zero_output_projections(block: ConformerBlock) -> None:
    """Zero every residual-branch output projection of a block."""
    with torch.no_grad():
        for lin in (block.ff1.lin2, block.ff2.lin2, block.self_attn.out_proj, block.conv.pointwise2):
            lin.weight.zero_()
            lin.bias.zero_()
        if block.cross_attn is not None:
            block.cross_attn.out_proj.weight.zero_()
            block.cross_attn.out_proj.bias.zero_()
