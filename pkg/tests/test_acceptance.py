"""Acceptance criteria; one PASS/FAIL line each is printed in the terminal summary."""

import math

import numpy as np
import pytest
import torch
from scipy import stats

from sefvc.audio import SAMPLE_RATE, TOKEN_HOP, compute_mel
from sefvc.discriminators import DiscriminatorConfig
from sefvc.estimator import convert_tokens
from sefvc.evaluation import cosine_similarity, toy_embedding
from sefvc.losses import (
    LossWeights,
    aux_loss,
    discriminator_loss,
    encoder_mel_loss,
    feature_matching_loss,
    generator_adversarial_loss,
    reconstruction_loss,
    total_generator_loss,
)
from sefvc.model import Backbone, ModelConfig
from sefvc.tensorfile import from_bytes, to_bytes
from sefvc.tokenizer import KMeansCodebook, ToyFeatureExtractor, nearest_centroid
from sefvc.toydata import toy_corpus
from sefvc.trainer import TrainConfig, Trainer, Utterance, collate, lr_at, make_sample, split_utterance

from .helpers import gradient_check

OVERFIT_STEPS = 2000
BASELINE_STEP = 10


# -- 1 ----------------------------------------------------------------------


def test_c01_permutation_invariance(criterion):
    worst = 0.0
    for seed in range(20):
        torch.manual_seed(seed)
        m = Backbone().eval()
        g = torch.Generator().manual_seed(seed)
        tokens = torch.randint(0, 2000, (1, 20), generator=g)
        for n_ref in (1, 100, 300):
            with torch.no_grad():
                mem = m.encode_reference(torch.randn(1, n_ref, 80, generator=g) - 4)
                a = m(tokens, mem).waveform
                b = m(tokens, mem.permute(torch.randperm(n_ref, generator=g))).waveform
            worst = max(worst, float((a - b).abs().max()))
    criterion("C1 permutation invariance", worst < 1e-4, f"max |diff| = {worst:.2e} (< 1e-4)")


# -- 2 ----------------------------------------------------------------------


def test_c02_length_contract(criterion):
    m = Backbone().eval()
    got = {}
    for n in (1, 7, 50, 333):
        with torch.no_grad():
            got[n] = m(torch.randint(0, 2000, (1, n)), torch.randn(1, 150, 80)).waveform.shape[-1]
    criterion("C2 length contract", all(v == 320 * k for k, v in got.items()), f"samples = {got}")


# -- 3 ----------------------------------------------------------------------


def test_c03_gradient_fidelity(criterion):
    cfg = ModelConfig(vocab_size=16, attn_dim=8, attn_heads=1, conformer_blocks_per_encoder=1, upsample_initial_channel=16,
                      resblock_kernel_sizes=(3,), resblock_dilations=(1,))
    frac, records = gradient_check(cfg, DiscriminatorConfig(width=2), seed=0, per_tensor=3)
    criterion("C3 gradient fidelity", frac >= 0.99 and len(records) >= 100,
              f"{frac:.1%} of {len(records)} sampled parameters within rtol 1e-3")


# -- 4 ----------------------------------------------------------------------


def test_c04_kmeans_oracle(criterion):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 32)).astype(np.float32)
    km = KMeansCodebook(n_clusters=16, random_state=0).fit(x)
    c = km.cluster_centers_.astype(np.float64)
    brute = np.argmin(((x[:, None, :].astype(np.float64) - c[None]) ** 2).sum(-1), axis=1)
    agree = float(np.mean(km.predict(x) == brute))

    sigma = 1.0
    blobs = np.concatenate([rng.normal(-10, sigma, (500, 32)), rng.normal(10, sigma, (500, 32))])
    kb = KMeansCodebook(n_clusters=2, random_state=0).fit(blobs)
    truth = np.stack([blobs[:500].mean(0), blobs[500:].mean(0)])
    order = np.argsort(kb.cluster_centers_[:, 0])
    err = float(np.max(np.abs(kb.cluster_centers_[order] - truth)))
    criterion("C4 k-means oracle", agree == 1.0 and err < 0.1 * sigma,
              f"assignment agreement {agree:.1%}, blob-mean error {err:.2e} sigma")


# -- 5 ----------------------------------------------------------------------


def test_c05_loss_arithmetic(criterion):
    ones = {k: torch.ones((), dtype=torch.float64) for k in ("rec", "feat", "mel", "aux", "adv")}
    total, bd = total_generator_loss(ones, LossWeights())
    wav = torch.from_numpy(toy_corpus(1, 1.0)[0].samples).double().unsqueeze(0)
    maps = [[torch.randn(3, 4, dtype=torch.float64)]]
    m = torch.randn(1, 5, 80, dtype=torch.float64)
    zeros = {
        "rec": reconstruction_loss(wav, wav.clone()).item(),
        "feat": feature_matching_loss(maps, [[maps[0][0].clone()]]).item(),
        "mel": encoder_mel_loss(m, m.clone()).item(),
        "aux": aux_loss(m[..., :3], m[..., :3].clone()).item(),
        "adv_g": generator_adversarial_loss([torch.ones(4)]).item(),
        "adv_d": discriminator_loss([torch.ones(4)], [torch.zeros(4)]).item(),
    }
    ok = total.item() == 113.0 and bd.total == 113.0 and all(v == 0 for v in zeros.values())
    criterion("C5 loss arithmetic", ok, f"total = {total.item()!r}, zero-input losses = {zeros}")


# -- 6 ----------------------------------------------------------------------


def test_c06_schedule(criterion):
    pts = {s: lr_at(s) for s in (0, 200_000, 400_000)}
    grid = sorted(set(range(0, 1_000_001, 997)) | {199_999, 200_000, 399_999, 400_000})
    lrs = [lr_at(s) for s in grid]
    mono = all(a >= b for a, b in zip(lrs, lrs[1:]))
    ok = pts == {0: 2e-4, 200_000: 1e-4, 400_000: 5e-5} and mono
    criterion("C6 learning-rate schedule", ok, f"{pts}, non-increasing on {len(grid)} steps: {mono}")


# -- 7 and 8 share one overfit run ----------------------------------------------


def _eval_rec_loss(gen, batch) -> float:
    gen.train()
    with torch.no_grad():
        out = gen(batch.tokens, batch.ref_mel, batch.token_mask, batch.ref_mask, batch.gt_ppe)
        mask = batch.token_mask.repeat_interleave(TOKEN_HOP, dim=1).to(out.waveform.dtype)
        return float(reconstruction_loss(batch.target_wav, out.waveform * mask, batch.token_mask))


def _self_recon_mel_l1(gen, utt, ref_s=2.5) -> float:
    ref = utt.waveform.crop(0, int(ref_s * SAMPLE_RATE))
    wav = convert_tokens(gen, utt.tokens, ref)
    from sefvc.audio import Waveform

    n = len(wav)
    a = compute_mel(Waveform(wav, SAMPLE_RATE), 20).values
    b = compute_mel(utt.waveform.crop(0, n), 20).values
    return float(np.mean(np.abs(a - b)))


@pytest.fixture(scope="module")
def overfit():
    torch.use_deterministic_algorithms(True)
    waves = toy_corpus(1, 6.0, seed=0)
    fx = ToyFeatureExtractor()
    feats = [fx.extract(w) for w in waves]
    km = KMeansCodebook(n_clusters=64, random_state=0).fit(feats)
    utts = [Utterance.from_waveform(w, km.predict(f.values)) for w, f in zip(waves, feats)]
    tcfg = TrainConfig(batch_size=1, max_content_frames=50, checkpoint_every=0)
    trainer = Trainer(ModelConfig(vocab_size=64, upsample_initial_channel=64), DiscriminatorConfig(width=16), tcfg)
    eval_rng = np.random.default_rng(1234)
    eval_batch = collate([make_sample(utts[0], eval_rng, tcfg) for _ in range(4)])
    baseline = {}

    def callback(tr, rec):
        if rec["step"] == BASELINE_STEP:
            baseline["train_rec"] = rec["l_rec"]
            baseline["eval_rec"] = _eval_rec_loss(tr.generator, eval_batch)
            baseline["self_mel"] = _self_recon_mel_l1(tr.generator, utts[0])

    history = trainer.fit(utts, OVERFIT_STEPS, callback=callback)
    final = {
        "train_rec": float(np.mean([r["l_rec"] for r in history[-50:]])),
        "eval_rec": _eval_rec_loss(trainer.generator, eval_batch),
        "self_mel": _self_recon_mel_l1(trainer.generator, utts[0]),
    }
    return trainer, utts, baseline, final


@pytest.mark.slow
def test_c07_overfit(overfit, criterion):
    _, _, base, final = overfit
    rec_drop = 1 - final["eval_rec"] / base["eval_rec"]
    mel_drop = 1 - final["self_mel"] / base["self_mel"]
    detail = (
        f"L_rec {base['eval_rec']:.3f} -> {final['eval_rec']:.3f} ({rec_drop:.1%} drop, need 80%); "
        f"self-recon mel-L1 {base['self_mel']:.3f} -> {final['self_mel']:.3f} ({mel_drop:.1%} drop, need 60%); "
        f"training-stream L_rec {base['train_rec']:.3f} -> {final['train_rec']:.3f} (last-50 mean)"
    )
    criterion("C7 overfit convergence", rec_drop >= 0.8 and mel_drop >= 0.6, detail)


@pytest.mark.slow
def test_c08_reference_length_echo(overfit, criterion):
    trainer, utts, _, _ = overfit
    utt = utts[0]
    target = toy_embedding(utt.waveform)
    offsets_s = (0.0, 0.25, 0.5, 0.75, 1.0)
    means = {}
    for L in (2.0, 3.0, 5.0):
        scores = []
        for off in offsets_s:
            a = int(off * SAMPLE_RATE)
            ref = utt.waveform.crop(a, a + int(L * SAMPLE_RATE))
            from sefvc.audio import Waveform

            out = Waveform(convert_tokens(trainer.generator, utt.tokens, ref), SAMPLE_RATE)
            scores.append(cosine_similarity(toy_embedding(out), target))
        means[L] = math.fsum(scores) / len(scores)
    vals = [means[L] for L in (2.0, 3.0, 5.0)]
    drops = [a - b for a, b in zip(vals, vals[1:]) if b < a]
    ok = len(drops) == 0 or (len(drops) == 1 and drops[0] <= 0.005)
    criterion("C8 reference-length echo", ok, "mean self-SECS " + ", ".join(f"{L:g}s={v:.6f}" for L, v in means.items()))


# -- 9 ----------------------------------------------------------------------


def test_c09_segment_split(criterion):
    corpus = toy_corpus(3, 6.0, seed=5)
    rng = np.random.default_rng(0)
    lens, same = [], True
    for i in range(10000):
        w = corpus[i % 3]
        ref, content = split_utterance(w, rng)
        lens.append(len(ref) / SAMPLE_RATE)
        same &= ref.source_id == content.source_id == w.source_id
    p = stats.kstest(lens, stats.uniform(loc=2.0, scale=1.0).cdf).pvalue
    utts = [Utterance.from_waveform(w, np.zeros(len(w) // TOKEN_HOP, np.int64)) for w in corpus]
    for i in range(100):
        s = make_sample(utts[i % 3], rng)
        same &= s.source_id == s.ref_source_id == utts[i % 3].source_id
    criterion("C9 segment-split statistics", p > 0.01 and same, f"KS p = {p:.3f} (n=10000), shared source_id: {same}")


# -- 10 ---------------------------------------------------------------------


def test_c10_determinism_and_round_trips(criterion, tmp_path):
    corpus = toy_corpus(2, 6.0, seed=0)
    rng = np.random.default_rng(0)
    utts = [Utterance.from_waveform(w, rng.integers(0, 16, len(w) // TOKEN_HOP)) for w in corpus]
    cfg = ModelConfig(vocab_size=16, attn_dim=16, attn_heads=2, conformer_blocks_per_encoder=1, upsample_initial_channel=16,
                      resblock_kernel_sizes=(3,), resblock_dilations=(1,))
    tcfg = TrainConfig(batch_size=2, max_content_frames=20, checkpoint_every=0, seed=9)

    def run():
        tr = Trainer(cfg, DiscriminatorConfig(width=4), tcfg)
        hist = tr.fit(utts, 5)
        return tr, [tuple(v for k, v in sorted(r.items())) for r in hist]

    tr, a = run()
    _, b = run()
    same_stream = a == b
    tr.save(tmp_path / "a.ckpt")
    back = Trainer.load(tmp_path / "a.ckpt", cfg.config_hash())
    back.save(tmp_path / "b.ckpt")
    ckpt_exact = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes() and all(
        torch.equal(v, back.generator.state_dict()[k]) for k, v in tr.generator.state_dict().items()
    )
    x = np.random.default_rng(1).normal(size=(7, 3, 5)).astype(np.float32)
    x[0, 0, 0] = -0.0
    x[0, 0, 1] = np.float32(1e-45)
    tf = from_bytes(to_bytes(x, {"k": [1, 2]}))
    tensor_exact = tf.values.tobytes() == x.tobytes() and tf.meta == {"k": [1, 2]}
    criterion("C10 determinism and round-trips", same_stream and ckpt_exact and tensor_exact,
              f"identical loss streams: {same_stream}, checkpoint bit-exact: {ckpt_exact}, tensor file bit-exact: {tensor_exact}")
