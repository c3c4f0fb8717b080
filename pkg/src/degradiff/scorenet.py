"""Small NCSN++-style U-Net score network over complex spectrograms.

The timestep embedding reaches every residual block. Degradation
conditioning enters in one of four ways (:class:`InjectionMode`):

* ``LayerWise``       - added to the timestep embedding, so every block sees it
* ``InputAddition``   - a learned linear map added once to the input features
* ``NoEncoder``       - no conditioning at all
* ``ZeroConditioning``- layer-wise path fed with a zero vector
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError


class InjectionMode(str, enum.Enum):
    LayerWise = "LayerWise"
    InputAddition = "InputAddition"
    NoEncoder = "NoEncoder"
    ZeroConditioning = "ZeroConditioning"


@dataclass
class ScoreNetConfig:
    base_channels: int = 16
    channel_multipliers: tuple = (1, 2, 2)
    blocks_per_resolution: int = 2
    mid_blocks: int = 2
    embed_dim: int = 128
    film: bool = False
    attention: bool = False
    input_mode: str = "StackedRealImag"
    dropout: float = 0.0

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if self.embed_dim % 2:
            raise ConfigurationError(f"embed_dim must be even, got {self.embed_dim}")
        if self.attention:
            raise ConfigurationError("attention blocks are not supported")
        if self.input_mode != "StackedRealImag":
            raise ConfigurationError(f"unknown input_mode {self.input_mode!r}")
        if not self.channel_multipliers or self.blocks_per_resolution < 1 or self.base_channels < 1:
            raise ConfigurationError("need at least one resolution level with one block")

    @property
    def num_blocks(self) -> int:
        return 2 * len(self.channel_multipliers) * self.blocks_per_resolution + self.mid_blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


def sinusoidal_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """[sin(w_i * scale * t), cos(w_i * scale * t)] for dim/2 log-spaced frequencies."""
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.fc1.weight.dtype
        raw = sinusoidal_embedding(torch.as_tensor(t, dtype=dtype), self.dim)
        return self.fc2(F.silu(self.fc1(raw)))


def inject(e_t: torch.Tensor, c_extra: torch.Tensor) -> torch.Tensor:
    if e_t.shape[-1] != c_extra.shape[-1]:
        raise ConfigurationError(f"embedding length {e_t.shape[-1]} != conditioning length {c_extra.shape[-1]}")
    return e_t + c_extra


def _groups(ch: int) -> int:
    return max(1, min(ch // 4, 32))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, film: bool = False, dropout: float = 0.0):
        super().__init__()
        self.film = film
        self.norm0 = nn.GroupNorm(_groups(in_ch), in_ch, eps=1e-6)
        self.conv0 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch if film else out_ch)
        self.norm1 = nn.GroupNorm(_groups(out_ch), out_ch, eps=1e-6)
        self.dropout = nn.Dropout(dropout)
        self.conv1 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.tracing = False
        self.trace: dict = {}

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv0(F.silu(self.norm0(x)))
        proj = self.emb_proj(F.silu(emb))[:, :, None, None]
        if self.film:
            scale, shift = proj.chunk(2, dim=1)
            h = h * (1 + scale) + shift
        else:
            h = h + proj
        pre = h
        h = self.conv1(self.dropout(F.silu(self.norm1(h))))
        out = self.skip(x) + h
        if self.tracing:
            self.trace = {"emb": emb, "pre": pre, "out": out}
        return out


class ScoreNet(nn.Module):
    def __init__(self, config: ScoreNetConfig | None = None):
        super().__init__()
        self.config = config = config or ScoreNetConfig()
        d = config.embed_dim
        C = config.base_channels
        self.time_embed = TimestepEmbedding(d)
        self.input_cond = nn.Linear(d, 4)
        self.conv_in = nn.Conv2d(4, C, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_ch = []
        ch = C
        levels = len(config.channel_multipliers)
        for i, mult in enumerate(config.channel_multipliers):
            out = C * mult
            for _ in range(config.blocks_per_resolution):
                self.down_blocks.append(ResBlock(ch, out, d, config.film, config.dropout))
                ch = out
                skip_ch.append(ch)
            if i < levels - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid_blocks = nn.ModuleList(
            [ResBlock(ch, ch, d, config.film, config.dropout) for _ in range(config.mid_blocks)]
        )

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i, mult in reversed(list(enumerate(config.channel_multipliers))):
            out = C * mult
            for _ in range(config.blocks_per_resolution):
                self.up_blocks.append(ResBlock(ch + skip_ch.pop(), out, d, config.film, config.dropout))
                ch = out
            if i > 0:
                self.upsamplers.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = nn.GroupNorm(_groups(ch), ch, eps=1e-6)
        self.conv_out = nn.Conv2d(ch, 2, 3, padding=1)
        self._multiple = 2 ** (levels - 1)

    @property
    def blocks(self) -> list[ResBlock]:
        return [*self.down_blocks, *self.mid_blocks, *self.up_blocks]

    @property
    def deepest_block(self) -> ResBlock:
        if len(self.mid_blocks):
            return self.mid_blocks[len(self.mid_blocks) // 2]
        return self.down_blocks[-1]

    def set_tracing(self, on: bool = True):
        for b in self.blocks:
            b.tracing = on
            b.trace = {}

    def conditioning_modules(self) -> list[nn.Module]:
        return [self.input_cond]

    def forward(self, x_t: torch.Tensor, y: torch.Tensor, t, c_extra: torch.Tensor | None = None,
                mode: InjectionMode = InjectionMode.LayerWise, input_path: bool = True) -> torch.Tensor:
        """Score estimate with the shape of ``x_t`` ((B, F, T) complex)."""
        mode = InjectionMode(mode)
        if x_t.shape != y.shape or x_t.ndim != 3:
            raise ConfigurationError(f"x_t {tuple(x_t.shape)} and y {tuple(y.shape)} must match as (B, F, T)")
        B, n_freq, n_time = x_t.shape
        dtype = self.conv_in.weight.dtype
        t = torch.as_tensor(t, dtype=dtype)
        if t.ndim == 0:
            t = t.expand(B)
        e_t = self.time_embed(t)

        if mode is InjectionMode.NoEncoder:
            if c_extra is not None:
                raise ConfigurationError("NoEncoder mode takes no conditioning vector")
            emb = e_t
        elif mode is InjectionMode.ZeroConditioning:
            if c_extra is not None and torch.any(c_extra != 0):
                raise ConfigurationError("ZeroConditioning mode requires a zero (or absent) conditioning vector")
            emb = inject(e_t, torch.zeros_like(e_t))
        else:
            if c_extra is None:
                raise ConfigurationError(f"{mode.value} mode requires a conditioning vector")
            if c_extra.shape != e_t.shape:
                raise ConfigurationError(f"c_extra shape {tuple(c_extra.shape)} != {tuple(e_t.shape)}")
            emb = inject(e_t, c_extra) if mode is InjectionMode.LayerWise else e_t

        h = torch.stack([x_t.real, x_t.imag, y.real, y.imag], dim=1).to(dtype)
        if mode is InjectionMode.InputAddition and input_path:
            h = h + self.input_cond(c_extra)[:, :, None, None]
        m = self._multiple
        pad_f, pad_t = (-n_freq) % m, (-n_time) % m
        if pad_f or pad_t:
            h = F.pad(h, (0, pad_t, 0, pad_f))

        h = self.conv_in(h)
        skips = []
        blocks = iter(self.down_blocks)
        downs = iter(self.downsamplers)
        levels = len(self.config.channel_multipliers)
        for i in range(levels):
            for _ in range(self.config.blocks_per_resolution):
                h = next(blocks)(h, emb)
                skips.append(h)
            if i < levels - 1:
                h = next(downs)(h)
        for block in self.mid_blocks:
            h = block(h, emb)
        blocks = iter(self.up_blocks)
        ups = iter(self.upsamplers)
        for i in reversed(range(levels)):
            for _ in range(self.config.blocks_per_resolution):
                h = next(blocks)(torch.cat([h, skips.pop()], dim=1), emb)
            if i > 0:
                h = next(ups)(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.conv_out(F.silu(self.norm_out(h)))
        h = h[:, :, :n_freq, :n_time]
        return torch.complex(h[:, 0], h[:, 1])


def timestep_embed(t, d: int = 128, embedder: TimestepEmbedding | None = None) -> torch.Tensor:
    """Convenience wrapper: embedding vector(s) for time(s) ``t``."""
    embedder = embedder or TimestepEmbedding(d)
    with torch.no_grad():
        return embedder(torch.as_tensor(t, dtype=embedder.fc1.weight.dtype))
