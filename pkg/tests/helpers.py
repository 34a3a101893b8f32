import numpy as np

from sefvc.audio import Waveform


def sine(freq, seconds=1.0, amp=1.0, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32))


def micro_batch(cfg, n_tokens=4, n_ref=12, seed=0, dtype=None):
    import torch

    from sefvc.trainer import Batch

    dtype = dtype or torch.float64
    g = torch.Generator().manual_seed(seed)
    t = torch.arange(n_tokens * 320, dtype=dtype) / 16000
    wav = 0.4 * torch.sin(2 * np.pi * 180 * t) + 0.05 * torch.rand(n_tokens * 320, generator=g, dtype=dtype)
    return Batch(
        tokens=torch.randint(0, cfg.vocab_size, (1, n_tokens), generator=g),
        token_mask=torch.ones(1, n_tokens, dtype=torch.bool),
        ref_mel=torch.randn(1, n_ref, cfg.n_mels, generator=g, dtype=dtype) - 4,
        ref_mask=torch.ones(1, n_ref, dtype=torch.bool),
        gt_ppe=torch.rand(1, n_tokens, 3, generator=g, dtype=dtype),
        target_wav=wav.unsqueeze(0),
        ids=["micro"],
    )


def gradient_check(cfg, disc_cfg, seed=0, per_tensor=3, h=1e-5, rtol=1e-3, atol=1e-7):
    """Compare autograd gradients of the total generator loss with central differences.

    Returns ``(fraction_ok, records)``; each record is ``(name, index, analytic, numeric)``.
    Runs in float64.
    """
    import torch

    from sefvc.discriminators import Discriminators
    from sefvc.losses import LossWeights
    from sefvc.model import Backbone
    from sefvc.trainer import generator_objective

    torch.manual_seed(seed)
    gen = Backbone(cfg).double().train()
    disc = Discriminators(disc_cfg).double().train()
    batch = micro_batch(cfg, seed=seed)
    weights = LossWeights()

    def loss():
        out = gen(batch.tokens, batch.ref_mel, batch.token_mask, batch.ref_mask, batch.gt_ppe)
        return generator_objective(out, batch, disc, weights, cfg.n_mels)[0]

    gen.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    records = []
    for name, p in gen.named_parameters():
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
            records.append((name, int(i), grad[i].item(), (up - down) / (2 * h)))
    ok = [abs(a - n) <= rtol * max(abs(a), abs(n)) + atol for _, _, a, n in records]
    return float(np.mean(ok)), records
