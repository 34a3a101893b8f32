"""Two-segment sampling, GAN alternation, learning-rate schedule and checkpoints."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .audio import SAMPLE_RATE, TOKEN_HOP, MelSpectrogram, Waveform, compute_mel, extract_ppe, log_mel
from .discriminators import DiscriminatorConfig, Discriminators
from .exceptions import CheckpointError, ConfigError, NonFiniteLossError, TooShortError
from .losses import (
    LossBreakdown,
    LossWeights,
    aux_loss,
    discriminator_loss,
    encoder_mel_loss,
    feature_matching_loss,
    generator_adversarial_loss,
    reconstruction_loss,
    total_generator_loss,
)
from .model import Backbone, ModelConfig, lengths_to_mask
from .tensorfile import pack_tensors, read_tensor, unpack_tensors

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 200_000
    batch_size: int = 8
    max_steps: int = 50_000
    seed: int = 0
    ref_len_min_s: float = 2.0
    ref_len_max_s: float = 3.0
    content_min_s: float = 1.0
    max_content_frames: int = 100
    grad_clip: float = 10.0
    adv_start_step: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ConfigError("lr_init must be > 0")
        if not 0 < self.ref_len_min_s <= self.ref_len_max_s:
            raise ConfigError("need 0 < ref_len_min_s <= ref_len_max_s")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        if self.lr_decay_every < 1 or self.batch_size < 1:
            raise ConfigError("lr_decay_every and batch_size must be >= 1")
        if self.max_content_frames < 3 and self.max_content_frames != 0:
            raise ConfigError("max_content_frames must be 0 (no cap) or >= 3")


def lr_at(step: int, cfg: TrainConfig = TrainConfig()) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr_init * cfg.lr_decay_factor ** (step // cfg.lr_decay_every)


# ---------------------------------------------------------------------------
# data


def split_utterance(w: Waveform, rng: np.random.Generator, cfg: TrainConfig = TrainConfig()) -> tuple[Waveform, Waveform]:
    """Cut a random reference crop and return it with the suffix that follows it.

    The crop length is uniform in ``[ref_len_min_s, ref_len_max_s]``; its start
    is uniform over the positions that leave at least ``content_min_s`` of
    audio after it. Raises :class:`TooShortError` when no such start exists.
    """
    n = len(w)
    lo = int(round(cfg.ref_len_min_s * SAMPLE_RATE))
    hi = int(round(cfg.ref_len_max_s * SAMPLE_RATE))
    cmin = int(round(cfg.content_min_s * SAMPLE_RATE))
    if n < lo + cmin:
        raise TooShortError(f"{w.source_id or 'utterance'}: {n / SAMPLE_RATE:.2f}s cannot hold a reference and content")
    ref_len = int(rng.integers(lo, hi + 1))
    last_start = n - ref_len - cmin
    if last_start < 0:
        raise TooShortError(f"{w.source_id or 'utterance'}: no valid start for a {ref_len / SAMPLE_RATE:.2f}s reference")
    start = int(rng.integers(0, last_start + 1))
    return w.crop(start, start + ref_len), w.crop(start + ref_len, n)


@dataclass
class Utterance:
    """One training utterance with its token ids and prosody at the 20 ms rate."""

    waveform: Waveform
    tokens: np.ndarray
    ppe: np.ndarray  # frames x 3
    speaker_embedding: np.ndarray | None = None  # only for the speaker-embedding ablation

    def __post_init__(self):
        n = min(len(self.tokens), len(self.ppe), len(self.waveform) // TOKEN_HOP)
        self.tokens = np.asarray(self.tokens[:n], dtype=np.int64)
        self.ppe = np.asarray(self.ppe[:n], dtype=np.float32)

    @property
    def source_id(self) -> str:
        return self.waveform.source_id

    @classmethod
    def from_waveform(cls, w: Waveform, tokens, speaker_embedding=None) -> "Utterance":
        return cls(w, tokens, extract_ppe(w).as_features(), speaker_embedding)


@dataclass
class TrainingSample:
    ref_mel: np.ndarray  # T_ref x n_mels, 10 ms hop
    tokens: np.ndarray
    gt_ppe: np.ndarray
    target_wav: np.ndarray
    source_id: str
    ref_source_id: str
    speaker_embedding: np.ndarray | None = None


def make_sample(utt: Utterance, rng: np.random.Generator, cfg: TrainConfig = TrainConfig(), n_mels: int = 80) -> TrainingSample:
    ref, content = split_utterance(utt.waveform, rng, cfg)
    first = -(-(len(utt.waveform) - len(content)) // TOKEN_HOP)
    last = len(utt.tokens)
    if last - first < 3:
        raise TooShortError(f"{utt.source_id}: content has fewer than 3 token frames")
    if cfg.max_content_frames and last - first > cfg.max_content_frames:
        first = int(rng.integers(first, last - cfg.max_content_frames + 1))
        last = first + cfg.max_content_frames
    target = utt.waveform.samples[first * TOKEN_HOP : last * TOKEN_HOP]
    return TrainingSample(
        ref_mel=compute_mel(ref, 10, n_mels).values,
        tokens=utt.tokens[first:last],
        gt_ppe=utt.ppe[first:last],
        target_wav=target,
        source_id=content.source_id,
        ref_source_id=ref.source_id,
        speaker_embedding=utt.speaker_embedding,
    )


@dataclass
class Batch:
    tokens: torch.Tensor
    token_mask: torch.Tensor
    ref_mel: torch.Tensor
    ref_mask: torch.Tensor
    gt_ppe: torch.Tensor
    target_wav: torch.Tensor
    ids: list[str] = field(default_factory=list)
    speaker_embedding: torch.Tensor | None = None


def collate(samples: Sequence[TrainingSample]) -> Batch:
    t_max = max(len(s.tokens) for s in samples)
    r_max = max(len(s.ref_mel) for s in samples)
    b = len(samples)
    n_mels = samples[0].ref_mel.shape[1]
    tokens = torch.zeros(b, t_max, dtype=torch.long)
    ppe = torch.zeros(b, t_max, 3)
    wav = torch.zeros(b, t_max * TOKEN_HOP)
    ref = torch.zeros(b, r_max, n_mels)
    for i, s in enumerate(samples):
        t = len(s.tokens)
        tokens[i, :t] = torch.from_numpy(s.tokens)
        ppe[i, :t] = torch.from_numpy(s.gt_ppe)
        wav[i, : t * TOKEN_HOP] = torch.from_numpy(s.target_wav)
        ref[i, : len(s.ref_mel)] = torch.from_numpy(s.ref_mel)
    token_mask = lengths_to_mask(torch.tensor([len(s.tokens) for s in samples]), t_max)
    ref_mask = lengths_to_mask(torch.tensor([len(s.ref_mel) for s in samples]), r_max)
    spk = None
    if all(s.speaker_embedding is not None for s in samples):
        spk = torch.from_numpy(np.stack([np.asarray(s.speaker_embedding, dtype=np.float32) for s in samples]))
    return Batch(tokens, token_mask, ref, ref_mask, ppe, wav, [s.source_id for s in samples], spk)


# ---------------------------------------------------------------------------
# training


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> list[bool]:
    prev = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(flag)
    return prev


def _restore_requires_grad(module: torch.nn.Module, prev: list[bool]) -> None:
    for p, f in zip(module.parameters(), prev):
        p.requires_grad_(f)


def generator_objective(out, batch: Batch, disc: Discriminators, weights: LossWeights, n_mels: int = 80,
                        adv_on: bool = True, sample_mask: torch.Tensor | None = None):
    """Weighted generator loss for one forward pass; returns ``(total, breakdown)``.

    Discriminator parameters are excluded from the graph.
    """
    real = batch.target_wav
    if sample_mask is None:
        sample_mask = batch.token_mask.repeat_interleave(TOKEN_HOP, dim=1).to(real.dtype)
    fake = out.waveform * sample_mask
    with torch.no_grad():
        target_mel = log_mel(real, 20, n_mels)
    comps = {
        "rec": reconstruction_loss(real, fake, batch.token_mask, n_mels),
        "mel": encoder_mel_loss(out.mel, target_mel, batch.token_mask),
        "aux": aux_loss(out.ppe_pred, batch.gt_ppe, batch.token_mask),
    }
    if adv_on:
        prev = _set_requires_grad(disc, False)
        try:
            with torch.no_grad():
                real_maps = disc(real).feature_maps
            g_out = disc(fake)
        finally:
            _restore_requires_grad(disc, prev)
        comps["feat"] = feature_matching_loss(real_maps, g_out.feature_maps)
        comps["adv"] = generator_adversarial_loss(g_out.scores)
    else:
        comps["feat"] = comps["adv"] = torch.zeros((), dtype=real.dtype)
    return total_generator_loss(comps, weights)


def _finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())


class Trainer:
    """Owns the generator, the discriminators, both optimisers and the data RNG."""

    def __init__(
        self,
        model_config: ModelConfig | None = None,
        disc_config: DiscriminatorConfig | None = None,
        train_config: TrainConfig | None = None,
        loss_weights: LossWeights | None = None,
    ):
        self.model_config = model_config or ModelConfig()
        self.disc_config = disc_config or DiscriminatorConfig()
        self.cfg = train_config or TrainConfig()
        self.weights = loss_weights or LossWeights()
        if self.cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(self.cfg.seed)
        self.generator = Backbone(self.model_config)
        self.discriminators = Discriminators(self.disc_config)
        betas = (self.cfg.beta1, self.cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=self.cfg.lr_init, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminators.parameters(), lr=self.cfg.lr_init, betas=betas)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.step = 0
        self.extra_meta: dict = {}
        self.extra_tensors: dict[str, np.ndarray] = {}

    # -- data ------------------------------------------------------------
    def sample_batch(self, utterances: Sequence[Utterance], max_tries: int = 100) -> Batch:
        samples = []
        tries = 0
        while len(samples) < self.cfg.batch_size:
            utt = utterances[int(self.rng.integers(len(utterances)))]
            try:
                samples.append(make_sample(utt, self.rng, self.cfg, self.model_config.n_mels))
            except TooShortError as exc:
                log.warning("skipping sample: %s", exc)
                tries += 1
                if tries >= max_tries:
                    raise
        return collate(samples)

    # -- one update ------------------------------------------------------
    def train_step(self, batch: Batch) -> tuple[LossBreakdown, float]:
        """One discriminator update on detached audio, then one generator update."""
        gen, disc = self.generator, self.discriminators
        gen.train()
        disc.train()
        lr = lr_at(self.step, self.cfg)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        adv_on = self.step >= self.cfg.adv_start_step
        sample_mask = batch.token_mask.repeat_interleave(TOKEN_HOP, dim=1).to(batch.target_wav.dtype)
        real = batch.target_wav

        out = gen(batch.tokens, batch.ref_mel, batch.token_mask, batch.ref_mask, batch.gt_ppe, batch.speaker_embedding)
        fake = out.waveform * sample_mask

        d_loss_value = 0.0
        if adv_on:
            d_real = disc(real)
            d_fake = disc(fake.detach())
            d_loss = discriminator_loss(d_real.scores, d_fake.scores)
            if not _finite(d_loss):
                raise NonFiniteLossError(f"step {self.step}: discriminator loss not finite on batch {batch.ids}")
            self.opt_d.zero_grad(set_to_none=True)
            if d_loss.requires_grad:
                d_loss.backward()
                torch.nn.utils.clip_grad_norm_(disc.parameters(), self.cfg.grad_clip)
                self.opt_d.step()
            d_loss_value = float(d_loss.detach())

        try:
            total, breakdown = generator_objective(out, batch, disc, self.weights, self.model_config.n_mels, adv_on, sample_mask)
        except NonFiniteLossError as exc:
            log.error("step %d: aborting update for batch %s: %s", self.step, batch.ids, exc)
            raise
        self.opt_g.zero_grad(set_to_none=True)
        if isinstance(total, torch.Tensor) and total.requires_grad:
            total.backward()
            torch.nn.utils.clip_grad_norm_(gen.parameters(), self.cfg.grad_clip)
            self.opt_g.step()
        self.step += 1
        return breakdown, d_loss_value

    def fit(self, utterances: Sequence[Utterance], n_steps: int | None = None, metrics_path=None, checkpoint_dir=None, callback=None):
        """Run until ``self.step`` reaches ``n_steps`` (default ``max_steps``)."""
        if not utterances:
            raise ValueError("no training utterances")
        n_steps = self.cfg.max_steps if n_steps is None else n_steps
        fh = open(metrics_path, "a") if metrics_path else None
        history = []
        try:
            while self.step < n_steps:
                batch = self.sample_batch(utterances)
                step = self.step
                breakdown, d_loss = self.train_step(batch)
                record = {"step": step, **breakdown.to_dict(), "d_loss": d_loss, "lr": lr_at(step, self.cfg)}
                history.append(record)
                if fh and step % self.cfg.log_every == 0:
                    fh.write(json.dumps(record) + "\n")
                    fh.flush()
                if callback is not None:
                    callback(self, record)
                if checkpoint_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"step_{self.step:08d}.ckpt")
                    self.save(Path(checkpoint_dir) / "latest.ckpt")
        finally:
            if fh:
                fh.close()
        return history

    # -- checkpoints -------------------------------------------------------
    def _optimizer_tensors(self, prefix: str, opt: torch.optim.Optimizer):
        state = opt.state_dict()
        tensors = {}
        scalars = {}
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                if isinstance(value, torch.Tensor):
                    tensors[f"{prefix}/{idx}/{key}"] = value.detach().cpu().numpy()
                else:
                    scalars[f"{idx}/{key}"] = value
        groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in state["param_groups"]]
        return tensors, {"param_groups": groups, "scalars": scalars}

    @staticmethod
    def _load_optimizer(opt: torch.optim.Optimizer, prefix: str, tensors: dict, meta: dict) -> None:
        state: dict = {}
        for name, arr in tensors.items():
            if not name.startswith(prefix + "/"):
                continue
            _, idx, key = name.split("/", 2)
            t = torch.from_numpy(arr)
            state.setdefault(int(idx), {})[key] = t.reshape(()) if key == "step" else t
        for name, value in meta.get("scalars", {}).items():
            idx, key = name.split("/", 1)
            state.setdefault(int(idx), {})[key] = value
        groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in meta["param_groups"]]
        opt.load_state_dict({"state": state, "param_groups": groups})

    def state_meta(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT,
            "package_version": __version__,
            "model_config": self.model_config.to_dict(),
            "config_hash": self.model_config.config_hash(),
            "disc_config": self.disc_config.to_dict(),
            "train_config": asdict(self.cfg),
            "loss_weights": self.weights.to_dict(),
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            **self.extra_meta,
        }

    def save(self, path) -> None:
        tensors = {f"gen/{k}": v.detach().cpu().numpy() for k, v in self.generator.state_dict().items()}
        tensors.update({f"disc/{k}": v.detach().cpu().numpy() for k, v in self.discriminators.state_dict().items()})
        meta = self.state_meta()
        for prefix, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            t, m = self._optimizer_tensors(prefix, opt)
            tensors.update(t)
            meta[prefix] = m
        tensors.update(self.extra_tensors)
        write_container(path, tensors, meta)

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "Trainer":
        tensors, meta = read_container(path)
        cfg = ModelConfig.from_dict(meta["model_config"])
        if expected_hash is not None and cfg.config_hash() != expected_hash:
            raise CheckpointError(f"config hash {cfg.config_hash()} does not match expected {expected_hash}")
        tc = dict(meta["train_config"])
        trainer = cls(
            cfg,
            DiscriminatorConfig(**meta["disc_config"]),
            TrainConfig(**tc),
            LossWeights(**meta["loss_weights"]),
        )
        trainer.load_state(tensors, meta)
        return trainer

    def load_state(self, tensors: dict, meta: dict) -> None:
        if meta.get("config_hash") != self.model_config.config_hash():
            raise CheckpointError("checkpoint was written for a different model configuration")
        _load_module(self.generator, "gen/", tensors)
        _load_module(self.discriminators, "disc/", tensors)
        self._load_optimizer(self.opt_g, "opt_g", tensors, meta["opt_g"])
        self._load_optimizer(self.opt_d, "opt_d", tensors, meta["opt_d"])
        self.step = int(meta["step"])
        self.rng.bit_generator.state = meta["rng_state"]
        self.extra_meta = {k: v for k, v in meta.items() if k in ("feature_extractor", "codebook_meta")}
        self.extra_tensors = {k: v for k, v in tensors.items() if k.startswith("codebook/")}


def _load_module(module: torch.nn.Module, prefix: str, tensors: dict) -> None:
    own = module.state_dict()
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"state mismatch under {prefix!r}: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(f"shape mismatch for {prefix}{k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    module.load_state_dict(state)


def write_container(path, tensors: dict, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(pack_tensors(tensors, meta))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no such checkpoint: {path}")
    try:
        tf = read_tensor(path)
        tensors = unpack_tensors(tf)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    meta = {k: v for k, v in tf.meta.items() if k != "index"}
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint format {version!r} is not supported (expected {CHECKPOINT_FORMAT})")
    return tensors, meta
