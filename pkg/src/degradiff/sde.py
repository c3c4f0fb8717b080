"""Mean-reverting (Ornstein-Uhlenbeck, variance-exploding) SDE

    dx = gamma (y - x) dt + g(t) dw,  g(t) = s_min (s_max/s_min)^t sqrt(2 ln(s_max/s_min))

with its closed-form perturbation kernel, the denoising score matching loss,
and reverse-time samplers. Tensors are complex torch tensors; ``t`` may be a
float or a per-item tensor broadcast against the trailing dimensions.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import ConfigurationError, DivergenceError


@dataclass(frozen=True)
class SdeParams:
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    t_eps: float = 0.03
    n_steps: int = 30
    snr: float = 0.5  # corrector target step-size ratio r

    def __post_init__(self):
        # gamma = 0 is admitted as the no-reversion limit
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigurationError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if not 0 < self.t_eps < 1:
            raise ConfigurationError(f"t_eps {self.t_eps} outside (0, 1)")
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)


@dataclass
class PerturbedState:
    mean: torch.Tensor
    std: torch.Tensor
    sample: torch.Tensor
    z: torch.Tensor
    t: torch.Tensor


def _as_time(t, like: torch.Tensor | None = None) -> torch.Tensor:
    dtype = torch.float64
    device = None
    if like is not None:
        dtype = like.real.dtype if like.is_complex() else like.dtype
        device = like.device
    return torch.as_tensor(t, dtype=dtype, device=device)


def _expand(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Reshape a per-item coefficient to broadcast over the trailing dims of x."""
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def diffusion_coeff(t, params: SdeParams):
    lr = params.log_ratio
    return params.sigma_min * (params.sigma_max / params.sigma_min) ** t * math.sqrt(2 * lr)


def marginal_std(t, params: SdeParams):
    """Solution of  v' = -2 gamma v + g(t)^2,  v(0) = 0, returned as sqrt(v)."""
    lr = params.log_ratio
    g = params.gamma
    exp = torch.exp if isinstance(t, torch.Tensor) else math.exp
    sqrt = torch.sqrt if isinstance(t, torch.Tensor) else math.sqrt
    var = params.sigma_min**2 * lr / (g + lr) * (exp(2 * lr * t) - exp(-2 * g * t))
    return sqrt(var)


def mean_weight(t, params: SdeParams):
    """Weight on x0 in the kernel mean (the remainder goes to y)."""
    exp = torch.exp if isinstance(t, torch.Tensor) else math.exp
    return exp(-params.gamma * t)


def perturbation_kernel(x0: torch.Tensor, y: torch.Tensor, t, params: SdeParams):
    if x0.shape != y.shape:
        raise ConfigurationError(f"shape mismatch {tuple(x0.shape)} vs {tuple(y.shape)}")
    t = _as_time(t, x0)
    w = _expand(mean_weight(t, params), x0)
    mean = w * x0 + (1 - w) * y
    return mean, marginal_std(t, params)


def complex_normal(shape, generator=None, dtype=torch.complex64, device=None) -> torch.Tensor:
    """Unit-variance circular complex Gaussian (each part has variance 1/2)."""
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    parts = torch.randn((2, *shape), generator=generator, dtype=real_dtype, device=device)
    return torch.complex(parts[0], parts[1]) * math.sqrt(0.5)


def sample_perturbed(x0, y, t, params: SdeParams, generator=None, std_override=None) -> PerturbedState:
    mean, std = perturbation_kernel(x0, y, t, params)
    if std_override is not None:
        std = _as_time(std_override, x0) * torch.ones_like(_as_time(t, x0))
    z = complex_normal(x0.shape, generator, x0.dtype, x0.device)
    sample = mean + _expand(std, x0) * z
    return PerturbedState(mean=mean, std=std, sample=sample, z=z, t=_as_time(t, x0))


def dsm_loss(score_estimate: torch.Tensor, z: torch.Tensor, std) -> torch.Tensor:
    """Mean of |std * score + z|^2: sigma^2-weighted denoising score matching."""
    if score_estimate.shape != z.shape:
        raise ConfigurationError(f"shape mismatch {tuple(score_estimate.shape)} vs {tuple(z.shape)}")
    std = _as_time(std, z)
    err = _expand(std, z) * score_estimate + z
    return torch.mean(err.real**2 + err.imag**2)


def gaussian_score(x0, y, params: SdeParams):
    """Exact score of the kernel around a fixed (x0, y) pair; a test oracle."""
    def score(x, y_, t):
        mean, std = perturbation_kernel(x0, y, t, params)
        return -(x - mean) / _expand(std, x) ** 2
    return score


def _check_finite(x: torch.Tensor, step: int, where: str):
    if not torch.isfinite(torch.view_as_real(x) if x.is_complex() else x).all():
        raise DivergenceError(f"non-finite state at reverse step {step} ({where})")


def prior_sample(y: torch.Tensor, params: SdeParams, generator=None) -> torch.Tensor:
    std = marginal_std(1.0, params)
    return y + std * complex_normal(y.shape, generator, y.dtype, y.device)


@torch.no_grad()
def reverse_pc_sampler(score_fn, y: torch.Tensor, params: SdeParams, generator=None,
                       trajectory: list | None = None) -> torch.Tensor:
    """Reverse-diffusion predictor followed by one annealed Langevin corrector per step.

    Returns the noise-free predictor mean of the final step.
    """
    x = prior_sample(y, params, generator)
    ts = torch.linspace(1.0, params.t_eps, params.n_steps + 1, dtype=torch.float64)
    x_mean = x
    for i in range(params.n_steps):
        t, t_next = float(ts[i]), float(ts[i + 1])
        dt = t - t_next
        g = diffusion_coeff(t, params)
        score = score_fn(x, y, t)
        drift = params.gamma * (y - x) - g**2 * score
        x_mean = x - drift * dt
        x = x_mean + g * math.sqrt(dt) * complex_normal(x.shape, generator, x.dtype, x.device)
        _check_finite(x, i, "predictor")
        # corrector at the new time
        score = score_fn(x, y, t_next)
        z = complex_normal(x.shape, generator, x.dtype, x.device)
        s_norm = torch.linalg.vector_norm(score)
        z_norm = torch.linalg.vector_norm(z)
        if s_norm > 0:
            eps = 2 * (params.snr * z_norm / s_norm) ** 2
            x_mean = x + eps * score
            x = x_mean + torch.sqrt(2 * eps) * z
        else:
            x_mean = x
        _check_finite(x, i, "corrector")
        if trajectory is not None:
            trajectory.append(x_mean.clone())
    return x_mean


@torch.no_grad()
def reverse_ode_sampler(score_fn, y: torch.Tensor, params: SdeParams, generator=None,
                        x_init: torch.Tensor | None = None,
                        trajectory: list | None = None) -> torch.Tensor:
    """Fixed-step RK4 on the probability-flow ODE from t=1 down to t_eps."""
    x = prior_sample(y, params, generator) if x_init is None else x_init.clone()

    def f(x, t):
        g = diffusion_coeff(t, params)
        return params.gamma * (y - x) - 0.5 * g**2 * score_fn(x, y, t)

    ts = torch.linspace(1.0, params.t_eps, params.n_steps + 1, dtype=torch.float64)
    for i in range(params.n_steps):
        t, t_next = float(ts[i]), float(ts[i + 1])
        h = t_next - t
        k1 = f(x, t)
        k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(x + h * k3, t_next)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(x, i, "ode")
        if trajectory is not None:
            trajectory.append(x.clone())
    return x


TRAJECTORY_MAGIC = b"DDTR"


def dump_trajectory(path, states) -> None:
    """Binary tensor file: magic, uint32 ndim, uint64 dims, little-endian float32 payload.

    Complex states are stored with a trailing (real, imag) axis.
    """
    stack = torch.stack([torch.as_tensor(s) for s in states])
    if stack.is_complex():
        stack = torch.view_as_real(stack)
    arr = stack.detach().cpu().numpy().astype("<f4")
    with open(Path(path), "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_trajectory(path):
    import numpy as np

    with open(Path(path), "rb") as fh:
        if fh.read(4) != TRAJECTORY_MAGIC:
            raise ConfigurationError(f"{path}: not a trajectory file")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        return np.frombuffer(fh.read(), dtype="<f4").reshape(shape)
