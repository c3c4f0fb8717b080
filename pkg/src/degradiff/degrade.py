"""Compound degradation synthesis: noise at a target SNR, image-source
reverberation, tanh soft clipping, and their labelled combinations."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import signal as sps

from .errors import (
    DegenerateInputError,
    EstimationError,
    GeometryError,
    RangeError,
    ConfigurationError,
)
from .signal import Waveform, rms

SPEED_OF_SOUND = 343.0
SNR_CHOICES = (0.0, 5.0, 10.0, 15.0)
T60_RANGE = (0.3, 1.0)
ALPHA_RANGE = (1.5, 5.0)
NUM_NOISE_TYPES = 10
NO_NOISE = 10
NUM_NOISE_CLASSES = 11
SINC_TAPS = 81

NOISE_NAMES = (
    "white",
    "pink",
    "brown",
    "band_250",
    "band_500",
    "band_1000",
    "band_2000",
    "am_white",
    "hum",
    "crackle",
    "none",
)


class Category(str, enum.Enum):
    NoiseOnly = "NoiseOnly"
    NoiseReverb = "NoiseReverb"
    NoiseDistort = "NoiseDistort"
    NoiseReverbDistort = "NoiseReverbDistort"
    ReverbOnly = "ReverbOnly"
    DistortOnly = "DistortOnly"

    @property
    def has_noise(self) -> bool:
        return self.value.startswith("Noise")

    @property
    def has_reverb(self) -> bool:
        return "Reverb" in self.value

    @property
    def has_distort(self) -> bool:
        return "Distort" in self.value


CATEGORIES = tuple(Category)


@dataclass(frozen=True)
class DegradationLabel:
    noise_class: int
    category: Category
    snr_db: float | None = None
    t60_s: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        cat = Category(self.category)
        object.__setattr__(self, "category", cat)
        if not 0 <= self.noise_class <= NO_NOISE:
            raise RangeError(f"noise_class {self.noise_class} outside [0, 10]")
        if cat.has_noise != (self.noise_class != NO_NOISE) or cat.has_noise != (self.snr_db is not None):
            raise ConfigurationError(f"noise fields inconsistent with {cat.value}")
        if cat.has_reverb != (self.t60_s is not None):
            raise ConfigurationError(f"t60 field inconsistent with {cat.value}")
        if cat.has_distort != (self.alpha is not None):
            raise ConfigurationError(f"alpha field inconsistent with {cat.value}")
        if self.t60_s is not None and not T60_RANGE[0] <= self.t60_s <= T60_RANGE[1]:
            raise RangeError(f"t60 {self.t60_s} outside {T60_RANGE}")
        if self.alpha is not None and not ALPHA_RANGE[0] <= self.alpha <= ALPHA_RANGE[1]:
            raise RangeError(f"alpha {self.alpha} outside {ALPHA_RANGE}")
        if self.snr_db is not None and self.snr_db not in SNR_CHOICES:
            raise RangeError(f"snr {self.snr_db} not in {SNR_CHOICES}")

    @property
    def t60_target(self) -> float:
        return 0.0 if self.t60_s is None else float(self.t60_s)

    @property
    def alpha_target(self) -> float:
        """Distortion intensity mapped affinely onto [0, 1]; 0 when absent."""
        if self.alpha is None:
            return 0.0
        return (self.alpha - ALPHA_RANGE[0]) / (ALPHA_RANGE[1] - ALPHA_RANGE[0])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["category"] = self.category.value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationLabel":
        return cls(
            noise_class=int(d["noise_class"]),
            category=Category(d["category"]),
            snr_db=None if d.get("snr_db") is None else float(d["snr_db"]),
            t60_s=None if d.get("t60_s") is None else float(d["t60_s"]),
            alpha=None if d.get("alpha") is None else float(d["alpha"]),
        )


# ---------------------------------------------------------------------------
# noise


def _shaped(rng, n, fs, gain_fn):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / fs)
    f[0] = f[1]
    return np.fft.irfft(spec * gain_fn(f), n=n)


def _band(rng, n, fs, center):
    sos = sps.butter(4, [center / 2**0.5, center * 2**0.5], btype="bandpass", fs=fs, output="sos")
    return sps.sosfilt(sos, rng.standard_normal(n))


def generate_noise(noise_class: int, n: int, rng: np.random.Generator,
                   sample_rate: int = 16000) -> np.ndarray:
    """Unit-RMS procedural noise of the given class (0..9)."""
    fs = sample_rate
    t = np.arange(n) / fs
    if noise_class == 0:
        x = rng.standard_normal(n)
    elif noise_class == 1:
        x = _shaped(rng, n, fs, lambda f: f**-0.5)
    elif noise_class == 2:
        x = _shaped(rng, n, fs, lambda f: 1.0 / np.maximum(f, 20.0))
    elif 3 <= noise_class <= 6:
        x = _band(rng, n, fs, (250.0, 500.0, 1000.0, 2000.0)[noise_class - 3])
    elif noise_class == 7:
        rate = rng.uniform(3.0, 8.0)
        x = rng.standard_normal(n) * (1 + 0.95 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    elif noise_class == 8:
        f0 = rng.choice([50.0, 60.0])
        x = sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 9))
        x = x + 0.05 * rng.standard_normal(n)
    elif noise_class == 9:
        x = 0.02 * rng.standard_normal(n)
        count = rng.poisson(40 * n / fs)
        pos = rng.integers(0, n, count)
        amp = rng.standard_normal(count) * rng.uniform(0.3, 1.0, count)
        clicks = np.zeros(n)
        np.add.at(clicks, pos, amp)
        decay = np.exp(-np.arange(int(0.002 * fs)) / (0.0004 * fs))
        x = x + np.convolve(clicks, decay)[:n]
    else:
        raise RangeError(f"noise class {noise_class} outside [0, 9]")
    return x / rms(x)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, rng_seed=None):
    """Add a random crop of ``noise`` to ``clean`` at ``snr_db``.

    Returns the mixture and the gain applied to the noise crop.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ConfigurationError(f"rate mismatch {clean.sample_rate} != {noise.sample_rate}")
    n = len(clean)
    if len(noise) < n:
        raise DegenerateInputError(f"noise ({len(noise)}) shorter than clean ({n})")
    rng = np.random.default_rng(rng_seed)
    offset = int(rng.integers(0, len(noise) - n + 1))
    crop = noise.samples[offset:offset + n]
    clean_rms, noise_rms = rms(clean.samples), rms(crop)
    if clean_rms == 0:
        raise DegenerateInputError("clean signal is silent")
    if noise_rms == 0:
        raise DegenerateInputError("noise crop is silent")
    scale = (clean_rms / noise_rms) * 10 ** (-snr_db / 20)
    return clean.with_samples(clean.samples + scale * crop), scale


# ---------------------------------------------------------------------------
# reverberation


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple
    source_position: tuple
    mic_position: tuple
    absorption: float
    max_reflection_order: int = 20

    def __post_init__(self):
        dims = np.asarray(self.dimensions, dtype=float)
        src = np.asarray(self.source_position, dtype=float)
        mic = np.asarray(self.mic_position, dtype=float)
        if dims.shape != (3,) or src.shape != (3,) or mic.shape != (3,):
            raise GeometryError("room, source and mic must be 3-D")
        if np.any(dims <= 0):
            raise GeometryError(f"non-positive room dimensions {dims}")
        for name, p in (("source", src), ("mic", mic)):
            if np.any(p <= 0) or np.any(p >= dims):
                raise GeometryError(f"{name} {p} not strictly inside room {dims}")
        if np.linalg.norm(src - mic) < 1e-6:
            raise GeometryError("source and mic coincide")
        if not 0 < self.absorption <= 1:
            raise RangeError(f"absorption {self.absorption} outside (0, 1]")
        if self.max_reflection_order < 0:
            raise RangeError("max_reflection_order must be >= 0")

    @property
    def volume(self) -> float:
        return float(np.prod(self.dimensions))

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    def eyring_t60(self) -> float:
        if self.absorption >= 1:
            return 0.0
        return 0.161 * self.volume / (-self.surface * math.log(1 - self.absorption))

    def to_dict(self) -> dict:
        return {
            "dimensions": [float(v) for v in self.dimensions],
            "source_position": [float(v) for v in self.source_position],
            "mic_position": [float(v) for v in self.mic_position],
            "absorption": float(self.absorption),
            "max_reflection_order": int(self.max_reflection_order),
        }


@dataclass(frozen=True)
class Rir:
    taps: Waveform
    t60_estimate_s: float


def _axis_images(n_max, length, src):
    """Image coordinates and reflection counts along one axis."""
    n = np.arange(-n_max, n_max + 1)
    coords, refl = [], []
    for q in (0, 1):
        coords.append((1 - 2 * q) * src + 2 * n * length)
        refl.append(np.abs(n - q) + np.abs(n))
    return np.concatenate(coords), np.concatenate(refl)


def _fractional_kernel(frac):
    """81-tap Hann-windowed sinc for delays with fractional part ``frac``."""
    half = SINC_TAPS // 2
    k = np.arange(-half, half + 1)
    x = k[None, :] - frac[:, None]
    win = 0.5 * (1 + np.cos(np.pi * x / (half + 1)))
    return np.sinc(x) * win


def simulate_rir(room: RoomSpec, sample_rate: int = 16000, duration_s: float | None = None,
                 fractional_order: int = 8) -> Rir:
    """Shoebox image-source RIR.

    Each image contributes ``beta**reflections / (4 pi d)`` with
    ``beta = sqrt(1 - absorption)`` (the absorption coefficient is an energy
    fraction). Images of order <= ``fractional_order`` are placed with an
    81-tap windowed sinc; later ones are rounded to the nearest sample.
    The response is normalised so the direct path has unit amplitude.
    """
    fs = sample_rate
    dims = np.asarray(room.dimensions, dtype=float)
    src = np.asarray(room.source_position, dtype=float)
    mic = np.asarray(room.mic_position, dtype=float)
    d0 = float(np.linalg.norm(src - mic))
    delay0 = d0 / SPEED_OF_SOUND * fs
    beta = math.sqrt(max(0.0, 1.0 - room.absorption))

    if duration_s is None:
        duration_s = min(2.0, max(0.1, 1.5 * room.eyring_t60()))
    n_taps = int(math.ceil(duration_s * fs + delay0)) + SINC_TAPS
    max_dist = (n_taps - SINC_TAPS // 2 - 1) / fs * SPEED_OF_SOUND
    order = room.max_reflection_order if beta > 0 else 0

    per_axis = [min(order, int(math.ceil(max_dist / (2 * L))) + 1) for L in dims]
    (cx, rx), (cy, ry), (cz, rz) = (
        _axis_images(m, L, s) for m, L, s in zip(per_axis, dims, src)
    )
    dy2 = (cy - mic[1]) ** 2
    dz2 = (cz - mic[2]) ** 2
    yz_d2 = dy2[:, None] + dz2[None, :]
    yz_r = ry[:, None] + rz[None, :]

    taps = np.zeros(n_taps)
    frac_delays, frac_amps = [], []
    for x_coord, x_refl in zip(cx, rx):
        if x_refl > order:
            continue
        d2 = (x_coord - mic[0]) ** 2 + yz_d2
        refl = x_refl + yz_r
        keep = (refl <= order) & (d2 <= max_dist**2)
        if not keep.any():
            continue
        dist = np.sqrt(d2[keep])
        r = refl[keep]
        amp = beta**r / (4 * np.pi * dist)
        delay = dist / SPEED_OF_SOUND * fs
        early = r <= fractional_order
        frac_delays.append(delay[early])
        frac_amps.append(amp[early])
        late = ~early
        if late.any():
            idx = np.rint(delay[late]).astype(np.int64)
            taps += np.bincount(idx, weights=amp[late], minlength=n_taps)[:n_taps]

    if frac_delays:
        delay = np.concatenate(frac_delays)
        amp = np.concatenate(frac_amps)
        base = np.floor(delay).astype(np.int64)
        frac = delay - base
        half = SINC_TAPS // 2
        for start in range(0, delay.shape[0], 20000):
            sl = slice(start, start + 20000)
            kern = _fractional_kernel(frac[sl]) * amp[sl, None]
            idx = base[sl, None] + np.arange(-half, half + 1)[None, :]
            valid = (idx >= 0) & (idx < n_taps)
            taps += np.bincount(idx[valid], weights=kern[valid], minlength=n_taps)[:n_taps]

    # drop sinc precursors ahead of the direct path
    first = max(0, int(math.ceil(delay0)) - 1)
    taps[:first] = 0.0
    taps *= 4 * np.pi * d0
    wav = Waveform(taps, fs)
    try:
        t60 = estimate_t60(wav)
    except EstimationError:
        t60 = 0.0
    return Rir(wav, t60)


def _order_for(dims, duration_s):
    max_dist = (duration_s + 0.05) * SPEED_OF_SOUND
    return int(math.ceil(max_dist * math.sqrt(np.sum(1.0 / np.asarray(dims) ** 2)))) + 3


def room_for_t60(target_t60: float, rng_seed=None, sample_rate: int = 16000,
                 refine_steps: int = 4) -> RoomSpec:
    """Random shoebox room whose uniform absorption is solved for ``target_t60``.

    The starting point inverts Eyring's formula
    ``T60 = 0.161 V / (-S ln(1 - a))``. Shoebox image-source fields decay
    more slowly than the diffuse-field formulas predict, so the wall
    coefficient ``k = -ln(1 - a)`` is then rescaled by the ratio of the
    simulated to the requested T60 for ``refine_steps`` iterations.
    """
    if not 0.1 <= target_t60 <= 2.0:
        raise RangeError(f"target T60 {target_t60} outside [0.1, 2.0] s")
    rng = np.random.default_rng(rng_seed)
    dims = np.array([rng.uniform(3, 10), rng.uniform(3, 10), rng.uniform(2.5, 4.0)])
    margin = 0.5
    while True:
        src = rng.uniform(margin, dims - margin)
        mic = rng.uniform(margin, dims - margin)
        if np.linalg.norm(src - mic) >= 1.0:
            break
    volume = float(np.prod(dims))
    surface = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2])
    k_lo, k_hi = -math.log(1 - 0.01), -math.log(1 - 0.99)
    k = float(np.clip(0.161 * volume / (surface * target_t60), k_lo, k_hi))
    duration = min(2.0, 1.2 * target_t60)
    order = _order_for(dims, duration)

    def make(k):
        absorption = float(np.clip(1.0 - math.exp(-k), 0.01 + 1e-12, 0.99))
        return RoomSpec(tuple(float(v) for v in dims), tuple(float(v) for v in src),
                        tuple(float(v) for v in mic), absorption, order)

    for _ in range(refine_steps):
        measured = simulate_rir(make(k), sample_rate, duration).t60_estimate_s
        if measured <= 0 or abs(measured / target_t60 - 1) < 0.02:
            break
        k = float(np.clip(k * measured / target_t60, k_lo, k_hi))
    return make(k)


def apply_reverb(wav: Waveform, rir: Rir) -> Waveform:
    taps = rir.taps
    if len(taps) == 0:
        raise ConfigurationError("empty RIR")
    if taps.sample_rate != wav.sample_rate:
        raise ConfigurationError(f"rate mismatch {taps.sample_rate} != {wav.sample_rate}")
    out = sps.fftconvolve(wav.samples, taps.samples)[: len(wav)]
    in_peak = np.max(np.abs(wav.samples))
    out_peak = np.max(np.abs(out))
    if out_peak > 0:
        out = out * (in_peak / out_peak)
    return wav.with_samples(out)


def soft_clip(wav, alpha: float):
    """``tanh(alpha x) / tanh(alpha)``; accepts a Waveform or an array."""
    if not alpha > 0:
        raise RangeError(f"alpha must be positive, got {alpha}")
    x = wav.samples if isinstance(wav, Waveform) else np.asarray(wav, dtype=np.float64)
    if alpha < 1e-4:
        # series form avoids 0/0 for vanishing alpha
        a2 = alpha * alpha
        y = x * (1 - a2 * x * x / 3) / (1 - a2 / 3)
    else:
        y = np.tanh(alpha * x) / math.tanh(alpha)
    return wav.with_samples(y) if isinstance(wav, Waveform) else y


def schroeder_curve(taps) -> np.ndarray:
    """Backward-integrated energy decay in dB, 0 dB at the first sample."""
    energy = np.asarray(taps, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(edc / edc[0])


def estimate_t60(rir) -> float:
    """T20-extrapolated reverberation time from Schroeder integration."""
    wav = rir.taps if isinstance(rir, Rir) else rir
    taps = wav.samples
    if np.count_nonzero(taps) < 100:
        raise EstimationError(f"only {np.count_nonzero(taps)} nonzero taps; need >= 100")
    edc = schroeder_curve(taps)
    below5 = np.flatnonzero(edc <= -5.0)
    below25 = np.flatnonzero(edc <= -25.0)
    if below5.size == 0 or below25.size == 0:
        raise EstimationError(f"decay reaches only {edc[np.isfinite(edc)].min():.1f} dB; need -25 dB")
    i0, i1 = below5[0], below25[0]
    if i1 - i0 < 2:
        raise EstimationError(f"decay band -5..-25 dB spans {i1 - i0} samples")
    t = np.arange(i0, i1 + 1) / wav.sample_rate
    slope, _ = np.polyfit(t, edc[i0:i1 + 1], 1)
    if slope >= 0:
        raise EstimationError(f"non-decaying energy curve (slope {slope:.3g} dB/s)")
    return float(-60.0 / slope)


# ---------------------------------------------------------------------------
# composition


def compose_degradation(clean: Waveform, category, rng_seed=None, return_rir: bool = False):
    """Apply reverb, then noise, then soft clipping as the category dictates.

    Returns ``(degraded, label)`` or ``(degraded, label, rir)``.
    """
    category = Category(category)
    if clean.duration < 0.5:
        raise RangeError(f"clean signal of {clean.duration:.3f} s shorter than 0.5 s")
    rng = np.random.default_rng(rng_seed)
    seeds = rng.integers(0, 2**63 - 1, size=4)
    wav = clean
    t60 = snr = alpha = None
    noise_class = NO_NOISE
    rir = None
    if category.has_reverb:
        t60 = float(rng.uniform(*T60_RANGE))
        room = room_for_t60(t60, seeds[0], clean.sample_rate)
        rir = simulate_rir(room, clean.sample_rate, min(2.0, 1.2 * t60))
        wav = apply_reverb(wav, rir)
    if category.has_noise:
        noise_class = int(rng.integers(0, NUM_NOISE_TYPES))
        snr = float(rng.choice(SNR_CHOICES))
        extra = clean.sample_rate // 2
        noise = generate_noise(noise_class, len(clean) + extra, np.random.default_rng(seeds[1]),
                               clean.sample_rate)
        wav, _ = mix_at_snr(wav, Waveform(noise, clean.sample_rate), snr, seeds[2])
    if category.has_distort:
        alpha = float(rng.uniform(*ALPHA_RANGE))
        wav = soft_clip(wav, alpha)
    label = DegradationLabel(noise_class=noise_class, category=category, snr_db=snr,
                             t60_s=t60, alpha=alpha)
    if return_rir:
        return wav, label, rir
    return wav, label
