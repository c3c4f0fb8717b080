"""Tiny configurations and batches shared across test modules."""

import torch

from degradiff.encoder import EncoderConfig
from degradiff.scorenet import ScoreNetConfig
from degradiff.sde import sample_perturbed
from degradiff.training import Batch, TrainConfig

# two residual blocks, four channels
GRAD_NET = ScoreNetConfig(base_channels=4, channel_multipliers=(1,), blocks_per_resolution=1,
                          mid_blocks=0, embed_dim=8)
GRAD_ENCODER = EncoderConfig(feature_dim=4, hidden_dim=4, branch_dim=4, embed_dim=8, n_mels=8)

# six residual blocks; used for the overfit and pipeline runs
TINY_NET = ScoreNetConfig(base_channels=8, channel_multipliers=(1, 2), blocks_per_resolution=1,
                          mid_blocks=2, embed_dim=32)
TINY_ENCODER = EncoderConfig(embed_dim=32, feature_dim=16, hidden_dim=16, branch_dim=8)


def tiny_config(**kw) -> TrainConfig:
    base = dict(net=TINY_NET, encoder=TINY_ENCODER, batch_size=4, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def random_batch(B=2, F=8, T=6, n_samples=4000, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    cdt = torch.complex128 if dtype == torch.float64 else torch.complex64
    return Batch(
        clean=torch.randn(B, F, T, generator=g, dtype=cdt),
        noisy=torch.randn(B, F, T, generator=g, dtype=cdt),
        noisy_wav=0.1 * torch.randn(B, n_samples, generator=g, dtype=dtype),
        noise_class=torch.randint(0, 11, (B,), generator=g),
        t60=torch.rand(B, generator=g, dtype=dtype),
        alpha_norm=torch.rand(B, generator=g, dtype=dtype),
    )


def frozen_noise(batch, config, seed=0):
    """Fixed (t, perturbed state) so the loss is a deterministic function of the weights."""
    g = torch.Generator().manual_seed(seed)
    B = len(batch)
    real = batch.clean.real.dtype
    t = config.sde.t_eps + (1 - config.sde.t_eps) * torch.rand(B, generator=g, dtype=real)
    return t, sample_perturbed(batch.clean, batch.noisy, t, config.sde, g)


def finite_difference_check(model, loss_fn, step=1e-5, floor=1e-6):
    """Max relative error between autograd and central differences over every parameter entry."""
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    worst, where = 0.0, None
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = loss_fn().item()
                flat[i] = orig - step
                minus = loss_fn().item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * step)
                a = analytic.view(-1)[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if err > worst:
                    worst, where = err, (name, i, a, numeric)
    return worst, where
