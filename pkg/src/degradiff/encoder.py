"""Degradation encoder: frame features -> pooled representation -> three
auxiliary heads, per-branch projections and the fusion MLP producing the
conditioning vector."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .degrade import NUM_NOISE_CLASSES, T60_RANGE
from .errors import ConfigurationError, LengthError

BRANCHES = ("noise", "reverb", "distort")


@dataclass
class EncoderConfig:
    sample_rate: int = 16000
    n_mels: int = 40
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    feature_dim: int = 64  # d_w
    hidden_dim: int = 64  # d_h
    branch_dim: int = 32  # d_b
    embed_dim: int = 128  # d, must equal the score network's
    conv_kernel: int = 5
    log_floor: float = 1e-5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeadPredictions:
    noise_logits: torch.Tensor  # (B, 11)
    t60_pred: torch.Tensor  # (B,)
    distort_pred: torch.Tensor  # (B,)


@dataclass
class ConditioningBundle:
    h: torch.Tensor
    c_noise: torch.Tensor
    c_reverb: torch.Tensor
    c_distort: torch.Tensor
    c_extra: torch.Tensor
    branch_mask: torch.Tensor  # (B, 3) bool, False = dropped
    head_outputs: HeadPredictions
    weights: torch.Tensor | None = None

    @property
    def branches(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.c_noise, self.c_reverb, self.c_distort


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = fmax or sample_rate / 2

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:, None] - edges[1:-1, None])
    return np.maximum(0.0, np.minimum(lower, upper))


class LogMelConvExtractor(nn.Module):
    """Log-mel filterbank followed by two stride-2 1-D convolutions.

    Any module mapping (B, samples) to (B, T', feature_dim) can stand in.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.register_buffer("window", torch.hann_window(config.win_length, periodic=True, dtype=torch.float64))
        self.register_buffer(
            "mel", torch.as_tensor(mel_filterbank(config.n_mels, config.n_fft, config.sample_rate))
        )
        k = config.conv_kernel
        self.conv1 = nn.Conv1d(config.n_mels, config.feature_dim, k, stride=2, padding=k // 2)
        self.conv2 = nn.Conv1d(config.feature_dim, config.feature_dim, k, stride=2, padding=k // 2)

    def min_samples(self) -> int:
        return max(self.config.win_length, self.config.sample_rate // 4)

    def log_mel(self, wav: torch.Tensor) -> torch.Tensor:
        """(B, samples) -> (B, frames, n_mels); no centre padding."""
        c = self.config
        if wav.shape[-1] < self.min_samples():
            raise LengthError(f"{wav.shape[-1]} samples; the encoder needs >= {self.min_samples()}")
        frames = wav.unfold(-1, c.win_length, c.hop_length)
        window = self.window.to(wav.dtype)
        power = torch.fft.rfft(frames * window, n=c.n_fft).abs() ** 2
        mel = power @ self.mel.to(wav.dtype).T
        return torch.log(mel + c.log_floor)

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        x = self.log_mel(wav.to(self.conv1.weight.dtype)).transpose(1, 2)
        x = F.silu(self.conv1(x))
        x = F.silu(self.conv2(x))
        return x.transpose(1, 2)


def _mlp(n_in, n_hidden, n_out):
    return nn.Sequential(nn.Linear(n_in, n_hidden), nn.SiLU(), nn.Linear(n_hidden, n_out))


class DegradationEncoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None, extractor: nn.Module | None = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        self.extractor = extractor if extractor is not None else LogMelConvExtractor(config)
        self.projector = nn.Linear(config.feature_dim, config.hidden_dim)
        self.noise_head = _mlp(config.hidden_dim, config.hidden_dim, NUM_NOISE_CLASSES)
        self.reverb_head = _mlp(config.hidden_dim, config.hidden_dim, 1)
        self.distort_head = _mlp(config.hidden_dim, config.hidden_dim, 1)
        self.branch = nn.ModuleDict(
            {k: nn.Linear(config.hidden_dim, config.branch_dim, bias=False) for k in BRANCHES}
        )
        self.fusion = _mlp(3 * config.branch_dim, config.embed_dim, config.embed_dim)
        nn.init.zeros_(self.fusion[2].weight)
        nn.init.zeros_(self.fusion[2].bias)

    def head_parameters(self) -> list[nn.Parameter]:
        """Parameters reached only through the auxiliary losses."""
        return [*self.noise_head.parameters(), *self.reverb_head.parameters(),
                *self.distort_head.parameters()]

    def conditioning_parameters(self) -> list[nn.Parameter]:
        return [*self.branch.parameters(), *self.fusion.parameters()]

    # -- stages -----------------------------------------------------------

    def extract_features(self, wav: torch.Tensor) -> torch.Tensor:
        if wav.ndim == 1:
            wav = wav[None]
        return self.extractor(wav)

    def pool_project(self, features: torch.Tensor) -> torch.Tensor:
        return F.silu(self.projector(features.mean(dim=1)))

    def heads(self, h: torch.Tensor) -> HeadPredictions:
        return HeadPredictions(
            noise_logits=self.noise_head(h),
            t60_pred=self.reverb_head(h)[:, 0],
            distort_pred=self.distort_head(h)[:, 0],
        )

    def branch_embed(self, h: torch.Tensor):
        return tuple(self.branch[k](h) for k in BRANCHES)

    def fuse(self, c_noise, c_reverb, c_distort, weights: torch.Tensor | None = None) -> torch.Tensor:
        db = self.config.branch_dim
        for name, c in zip(BRANCHES, (c_noise, c_reverb, c_distort)):
            if c.shape[-1] != db:
                raise ConfigurationError(f"{name} branch has length {c.shape[-1]}, expected {db}")
        if weights is not None:
            weights = torch.as_tensor(weights, dtype=c_noise.dtype)
            if weights.ndim == 1:
                weights = weights.expand(c_noise.shape[0], 3)
            if torch.any(weights < 0):
                raise ConfigurationError("branch weights must be non-negative")
            c_noise = weights[:, 0:1] * c_noise
            c_reverb = weights[:, 1:2] * c_reverb
            c_distort = weights[:, 2:3] * c_distort
        return self.fusion(torch.cat([c_noise, c_reverb, c_distort], dim=-1))

    # -- full pass --------------------------------------------------------

    def forward(self, wav: torch.Tensor, weights=None) -> ConditioningBundle:
        h = self.pool_project(self.extract_features(wav))
        preds = self.heads(h)
        c = self.branch_embed(h)
        if isinstance(weights, str):
            if weights != "adaptive":
                raise ConfigurationError(f"unknown weighting {weights!r}")
            weights = adaptive_weights(preds)
        c_extra = self.fuse(*c, weights=weights)
        mask = torch.ones(h.shape[0], 3, dtype=torch.bool, device=h.device)
        return ConditioningBundle(h, *c, c_extra, mask, preds,
                                  None if weights is None else torch.as_tensor(weights))

    def cfg_dropout(self, bundle: ConditioningBundle, p: float, generator=None) -> ConditioningBundle:
        """Zero each branch embedding independently with probability ``p`` and refuse."""
        if not 0 <= p <= 1:
            raise ConfigurationError(f"dropout probability {p} outside [0, 1]")
        if p == 0:
            return bundle
        B = bundle.h.shape[0]
        keep = torch.rand(B, 3, generator=generator) >= p
        keep = keep & bundle.branch_mask
        branches = [c * keep[:, i:i + 1].to(c.dtype) for i, c in enumerate(bundle.branches)]
        c_extra = self.fuse(*branches, weights=bundle.weights)
        return replace(bundle, c_noise=branches[0], c_reverb=branches[1], c_distort=branches[2],
                       c_extra=c_extra, branch_mask=keep)


def cfg_dropout(bundle: ConditioningBundle, p: float, encoder: DegradationEncoder, generator=None):
    return encoder.cfg_dropout(bundle, p, generator)


def adaptive_weights(preds: HeadPredictions) -> torch.Tensor:
    """Per-branch confidence weights, shape (B, 3).

    Noise: the top softmax probability. Regression branches:
    ``1 / (1 + distance of the prediction outside its label domain)``,
    which is exactly 1 for in-range predictions.
    """
    noise_w = torch.softmax(preds.noise_logits, dim=-1).max(dim=-1).values
    t60 = preds.t60_pred
    dist = preds.distort_pred
    reverb_w = 1.0 / (1.0 + (t60 - t60.clamp(0.0, T60_RANGE[1])).abs())
    distort_w = 1.0 / (1.0 + (dist - dist.clamp(0.0, 1.0)).abs())
    return torch.stack([noise_w, reverb_w, distort_w], dim=-1)


def frame_count(n_samples: int, config: EncoderConfig | None = None) -> int:
    """Log-mel frames before the strided convolutions."""
    config = config or EncoderConfig()
    return (n_samples - config.win_length) // config.hop_length + 1


def conv_frame_count(n_samples: int, config: EncoderConfig | None = None) -> int:
    config = config or EncoderConfig()
    n = frame_count(n_samples, config)
    for _ in range(2):
        n = math.floor((n + 2 * (config.conv_kernel // 2) - config.conv_kernel) / 2) + 1
    return n
