"""Joint objective, optimisation step with EMA, checkpoint container."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import DegradationEncoder, EncoderConfig
from .errors import ConfigurationError, NumericError, VersioningError
from .scorenet import InjectionMode, ScoreNet, ScoreNetConfig
from .sde import SdeParams, dsm_loss, sample_perturbed

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "degradiff-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lambda_: float = 0.3
    learning_rate: float = 1e-4
    ema_decay: float = 0.999
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    injection_mode: InjectionMode = InjectionMode.LayerWise
    cfg_p: float = 0.1
    max_steps: int | None = None
    use_ema: bool = True
    sde: SdeParams = field(default_factory=SdeParams)
    net: ScoreNetConfig = field(default_factory=ScoreNetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        self.injection_mode = InjectionMode(self.injection_mode)
        if self.lambda_ < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lambda_}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigurationError(f"ema_decay {self.ema_decay} outside [0, 1)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0 <= self.cfg_p <= 1:
            raise ConfigurationError(f"cfg_p {self.cfg_p} outside [0, 1]")
        if self.net.embed_dim != self.encoder.embed_dim:
            raise ConfigurationError(
                f"score net embed_dim {self.net.embed_dim} != encoder embed_dim {self.encoder.embed_dim}"
            )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("sde", "net", "encoder")}
        d["lambda"] = d.pop("lambda_")
        d["injection_mode"] = self.injection_mode.value
        d["sde"] = asdict(self.sde)
        d["net"] = self.net.to_dict()
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        if "sde" in d:
            d["sde"] = SdeParams(**d["sde"])
        if "net" in d:
            d["net"] = ScoreNetConfig(**d["net"])
        if "encoder" in d:
            d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


def load_config(path) -> TrainConfig:
    """Read a TOML or JSON training config."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib

        data = tomllib.loads(text)
    elif path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        raise ConfigurationError(f"{path}: config must be .toml or .json")
    return TrainConfig.from_dict(data.get("train", data))


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossBreakdown:
    score: float
    noise_ce: float
    reverb_mse: float
    distort_mse: float
    total: float
    lambda_: float

    def as_log(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d


def total_loss(score_loss, head_losses, lambda_: float) -> LossBreakdown:
    """Score loss plus ``lambda_`` times the sum of (noise CE, reverb MSE, distort MSE)."""
    comps = {"score": score_loss}
    comps.update(zip(("noise_ce", "reverb_mse", "distort_mse"), head_losses))
    vals = {}
    for name, v in comps.items():
        v = float(v)
        if not math.isfinite(v):
            raise NumericError(f"non-finite {name} loss: {v}")
        if v < 0:
            raise NumericError(f"negative {name} loss: {v}")
        vals[name] = v
    total = vals["score"] + lambda_ * (vals["noise_ce"] + vals["reverb_mse"] + vals["distort_mse"])
    return LossBreakdown(total=total, lambda_=float(lambda_), **vals)


def head_losses(preds, noise_class: torch.Tensor, t60: torch.Tensor, alpha_norm: torch.Tensor):
    return (
        F.cross_entropy(preds.noise_logits, noise_class),
        F.mse_loss(preds.t60_pred, t60.to(preds.t60_pred.dtype)),
        F.mse_loss(preds.distort_pred, alpha_norm.to(preds.distort_pred.dtype)),
    )


# ---------------------------------------------------------------------------
# model and state


class EnhancementModel(nn.Module):
    def __init__(self, net_config: ScoreNetConfig | None = None,
                 encoder_config: EncoderConfig | None = None):
        super().__init__()
        self.scorenet = ScoreNet(net_config)
        self.encoder = DegradationEncoder(encoder_config)

    def conditioning(self, wav: torch.Tensor, mode: InjectionMode, weights=None):
        """Encoder bundle (or None) and the c_extra the score net consumes in ``mode``."""
        mode = InjectionMode(mode)
        if mode is InjectionMode.NoEncoder:
            return None, None
        bundle = self.encoder(wav, weights=weights)
        if mode is InjectionMode.ZeroConditioning:
            return bundle, None
        return bundle, bundle.c_extra


@dataclass
class Batch:
    clean: torch.Tensor  # (B, F, T) complex compressed spectrograms
    noisy: torch.Tensor
    noisy_wav: torch.Tensor  # (B, samples)
    noise_class: torch.Tensor  # (B,) int64
    t60: torch.Tensor  # (B,) seconds, 0 when absent
    alpha_norm: torch.Tensor  # (B,) in [0, 1], 0 when absent

    def __len__(self):
        return self.clean.shape[0]


@dataclass
class ModelState:
    model: EnhancementModel
    optimizer: torch.optim.Optimizer
    ema: dict
    step: int = 0
    epoch: int = 0

    def ema_model(self) -> EnhancementModel:
        model = copy.deepcopy(self.model)
        model.load_state_dict({**model.state_dict(), **self.ema}, strict=True)
        return model.eval()


def init_state(config: TrainConfig, dtype=torch.float32) -> ModelState:
    torch.manual_seed(config.seed)
    model = EnhancementModel(config.net, config.encoder).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    ema = {k: v.detach().clone() for k, v in model.named_parameters()}
    return ModelState(model, opt, ema)


@torch.no_grad()
def ema_update(shadow: dict, current, decay: float) -> dict:
    """shadow <- decay * shadow + (1 - decay) * current, in place."""
    if not 0 <= decay < 1:
        raise ConfigurationError(f"decay {decay} outside [0, 1)")
    cur = dict(current)
    if set(cur) != set(shadow):
        raise ConfigurationError("EMA shadow and current parameters differ in names")
    for name, s in shadow.items():
        c = cur[name].detach()
        if c.shape != s.shape:
            raise ConfigurationError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(c.shape)}")
        s.mul_(decay).add_(c, alpha=1 - decay)
    return shadow


def compute_losses(model: EnhancementModel, batch: Batch, config: TrainConfig, generator=None,
                   t=None, perturbed=None, dropout: bool = True):
    """Differentiable total loss and its components (tensors)."""
    sde = config.sde
    B = len(batch)
    real_dtype = batch.clean.real.dtype
    if t is None:
        t = sde.t_eps + (1 - sde.t_eps) * torch.rand(B, generator=generator, dtype=real_dtype)
    if perturbed is None:
        perturbed = sample_perturbed(batch.clean, batch.noisy, t, sde, generator)
    mode = config.injection_mode
    zero = torch.zeros((), dtype=real_dtype)
    heads = (zero, zero, zero)
    c_extra = None
    if mode is not InjectionMode.NoEncoder:
        bundle = model.encoder(batch.noisy_wav)
        if dropout and config.cfg_p > 0:
            bundle = model.encoder.cfg_dropout(bundle, config.cfg_p, generator)
        if mode is not InjectionMode.ZeroConditioning:
            c_extra = bundle.c_extra
        heads = head_losses(bundle.head_outputs, batch.noise_class, batch.t60, batch.alpha_norm)
    score = model.scorenet(perturbed.sample, batch.noisy, t, c_extra, mode)
    l_score = dsm_loss(score, perturbed.z, perturbed.std)
    total = l_score + config.lambda_ * (heads[0] + heads[1] + heads[2])
    return total, l_score, heads


def train_step(batch: Batch, state: ModelState, config: TrainConfig, generator=None):
    model = state.model
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    total, l_score, heads = compute_losses(model, batch, config, generator)
    breakdown = total_loss(l_score.item(), [h.item() for h in heads], config.lambda_)
    total.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(
                f"non-finite gradient in {name} at step {state.step}; losses {breakdown.as_log()}"
            )
    state.optimizer.step()
    ema_update(state.ema, model.named_parameters(), config.ema_decay)
    state.step += 1
    return state, breakdown


def iterate_batches(n_items: int, batch_size: int, epoch: int, seed: int):
    """Seeded per-epoch shuffle; identical for identical (seed, epoch)."""
    order = np.random.default_rng([seed, epoch]).permutation(n_items)
    for i in range(0, n_items, batch_size):
        yield order[i:i + batch_size]


def train(state: ModelState, dataset, config: TrainConfig, log_path=None, generator=None,
          progress=None):
    """Run ``config.epochs`` epochs (or ``config.max_steps`` steps) over ``dataset``.

    ``dataset`` must provide ``len()`` and ``batch(indices) -> Batch``.
    Returns the list of per-step LossBreakdowns.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(config.seed)
    history = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(state.epoch, config.epochs):
            for idx in iterate_batches(len(dataset), config.batch_size, epoch, config.seed):
                if config.max_steps is not None and state.step >= config.max_steps:
                    return history
                state, losses = train_step(dataset.batch(idx), state, config, generator)
                history.append(losses)
                if log_fh:
                    rec = {"step": state.step, "epoch": epoch, **losses.as_log(),
                           "lr": config.learning_rate}
                    rec.pop("lambda")
                    log_fh.write(json.dumps(rec) + "\n")
                if progress:
                    progress(state, losses)
            state.epoch = epoch + 1
    finally:
        if log_fh:
            log_fh.close()
    return history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: ModelState, config: TrainConfig, generator: torch.Generator | None = None,
                    extra: dict | None = None) -> None:
    """npz container: JSON header, float32 little-endian weights and EMA shadow."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, value in state.model.state_dict().items():
        arrays[f"weights/{name}"] = value.detach().cpu().numpy().astype("<f4")
    for name, value in state.ema.items():
        arrays[f"ema/{name}"] = value.detach().cpu().numpy().astype("<f4")
    if generator is not None:
        arrays["rng"] = generator.get_state().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    config: TrainConfig
    model: EnhancementModel
    ema_model: EnhancementModel
    epoch: int
    step: int
    rng_state: torch.Tensor | None
    extra: dict

    def inference_model(self, use_ema: bool | None = None) -> EnhancementModel:
        use = self.config.use_ema if use_ema is None else use_ema
        return (self.ema_model if use else self.model).eval()


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as data:
        if "meta" not in data:
            raise VersioningError(f"{path}: missing header")
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise VersioningError(f"{path}: unknown format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise VersioningError(f"{path}: version {meta.get('version')} != {CHECKPOINT_VERSION}")
        config = TrainConfig.from_dict(meta["config"])
        weights = {k[len("weights/"):]: torch.from_numpy(np.array(data[k])) for k in data if k.startswith("weights/")}
        ema = {k[len("ema/"):]: torch.from_numpy(np.array(data[k])) for k in data if k.startswith("ema/")}
        rng = torch.from_numpy(np.array(data["rng"])) if "rng" in data else None
    model = EnhancementModel(config.net, config.encoder)
    try:
        model.load_state_dict(weights, strict=True)
        ema_model = copy.deepcopy(model)
        ema_model.load_state_dict({**weights, **ema}, strict=True)
    except RuntimeError as exc:
        raise VersioningError(f"{path}: weights do not match the stored config: {exc}") from exc
    return Checkpoint(config, model.eval(), ema_model.eval(), meta["epoch"], meta["step"], rng,
                      meta.get("extra", {}))


def train_encoder_heads(encoder: DegradationEncoder, dataset, steps: int, batch_size: int = 16,
                        learning_rate: float = 1e-3, seed: int = 0) -> list[float]:
    """Optimise the encoder on the auxiliary losses alone.

    Skips the score network entirely, which makes head diagnostics cheap.
    Returns per-step total auxiliary losses.
    """
    torch.manual_seed(seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=learning_rate)
    encoder.train()
    history = []
    step, epoch = 0, 0
    while step < steps:
        for idx in iterate_batches(len(dataset), batch_size, epoch, seed):
            if step >= steps:
                break
            b = dataset.batch(idx)
            h = encoder.pool_project(encoder.extract_features(b.noisy_wav))
            ce, mse_r, mse_d = head_losses(encoder.heads(h), b.noise_class, b.t60, b.alpha_norm)
            loss = ce + mse_r + mse_d
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
            step += 1
        epoch += 1
    encoder.eval()
    return history
