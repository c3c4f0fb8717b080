"""Waveform containers, complex STFT with amplitude compression, WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import ConfigurationError, LengthError

SAMPLE_RATE = 16000
FRAME_LENGTH = 510
HOP_LENGTH = 128
WINDOW = "hann"
COMPRESSION_EXPONENT = 0.5
COMPRESSION_SCALE = 0.15

_WINDOW_ALIASES = {"rect": "boxcar", "rectangular": "boxcar", "hanning": "hann"}


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ConfigurationError(f"expected mono samples, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ConfigurationError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Frames x bins grid of (possibly compressed) STFT coefficients.

    ``length`` is the number of samples of the analysed signal, needed to
    trim the reflective padding on inversion.
    """

    values: np.ndarray
    frame_length: int = FRAME_LENGTH
    hop_length: int = HOP_LENGTH
    window: str = WINDOW
    sample_rate: int = SAMPLE_RATE
    compression_exponent: float = COMPRESSION_EXPONENT
    compression_scale: float = COMPRESSION_SCALE
    length: int | None = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2:
            raise ConfigurationError(f"spectrogram must be 2-D (frames, bins), got {values.shape}")
        if values.shape[1] != self.frame_length // 2 + 1:
            raise ConfigurationError(
                f"{values.shape[1]} bins inconsistent with frame_length {self.frame_length}"
            )
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def with_values(self, values) -> "ComplexSpectrogram":
        return replace(self, values=values)


def get_window(window: str, frame_length: int) -> np.ndarray:
    name = _WINDOW_ALIASES.get(window, window)
    try:
        return sps.get_window(name, frame_length, fftbins=True)
    except ValueError as exc:
        raise ConfigurationError(f"unknown window {window!r}") from exc


def check_transform(frame_length: int, hop_length: int, window: str) -> np.ndarray:
    """Validate (window, hop) for overlap-add reconstruction; return the window."""
    if frame_length < 2 or hop_length < 1:
        raise ConfigurationError(f"bad frame/hop: {frame_length}/{hop_length}")
    if hop_length > frame_length:
        raise ConfigurationError(f"hop {hop_length} exceeds frame length {frame_length}")
    win = get_window(window, frame_length)
    if not sps.check_NOLA(win, frame_length, frame_length - hop_length):
        raise ConfigurationError(
            f"window {window!r} with hop {hop_length} leaves samples with zero overlap-add weight"
        )
    return win


def compress(values: np.ndarray, exponent: float = COMPRESSION_EXPONENT,
             scale: float = COMPRESSION_SCALE) -> np.ndarray:
    if not 0 < exponent <= 1 or scale <= 0:
        raise ConfigurationError(f"invalid compression ({exponent}, {scale})")
    if exponent == 1:
        return scale * values
    mag = np.abs(values)
    return scale * mag**exponent * np.exp(1j * np.angle(values))


def decompress(values: np.ndarray, exponent: float = COMPRESSION_EXPONENT,
               scale: float = COMPRESSION_SCALE) -> np.ndarray:
    if not 0 < exponent <= 1 or scale <= 0:
        raise ConfigurationError(f"invalid compression ({exponent}, {scale})")
    if exponent == 1:
        return values / scale
    mag = np.abs(values) / scale
    return mag ** (1.0 / exponent) * np.exp(1j * np.angle(values))


def stft_raw(x, frame_length: int = FRAME_LENGTH, hop_length: int = HOP_LENGTH,
             window: str = WINDOW, center: bool = True) -> np.ndarray:
    """Uncompressed STFT, shape (frames, frame_length // 2 + 1)."""
    win = check_transform(frame_length, hop_length, window)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < frame_length:
        raise LengthError(f"signal of {x.shape[0]} samples shorter than one frame ({frame_length})")
    if center:
        x = np.pad(x, frame_length // 2, mode="reflect")
    n_frames = (x.shape[0] - frame_length) // hop_length + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_length)[::hop_length][:n_frames]
    return np.fft.rfft(frames * win, axis=-1)


def istft_raw(values: np.ndarray, frame_length: int = FRAME_LENGTH,
              hop_length: int = HOP_LENGTH, window: str = WINDOW,
              length: int | None = None, center: bool = True) -> np.ndarray:
    win = check_transform(frame_length, hop_length, window)
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[1] != frame_length // 2 + 1:
        raise ConfigurationError(f"spectrogram shape {values.shape} inconsistent with frame_length")
    n_frames = values.shape[0]
    frames = np.fft.irfft(values, n=frame_length, axis=-1) * win
    total = (n_frames - 1) * hop_length + frame_length
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = win**2
    for i in range(n_frames):
        start = i * hop_length
        out[start:start + frame_length] += frames[i]
        norm[start:start + frame_length] += wsq
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    if center:
        pad = frame_length // 2
        out = out[pad:]
        if length is None:
            length = total - 2 * pad
    if length is not None:
        if out.shape[0] < length:
            out = np.pad(out, (0, length - out.shape[0]))
        out = out[:length]
    return out


def stft(wav: Waveform, frame_length: int = FRAME_LENGTH, hop_length: int = HOP_LENGTH,
         window: str = WINDOW, compression_exponent: float = COMPRESSION_EXPONENT,
         compression_scale: float = COMPRESSION_SCALE) -> ComplexSpectrogram:
    raw = stft_raw(wav.samples, frame_length, hop_length, window)
    return ComplexSpectrogram(
        compress(raw, compression_exponent, compression_scale),
        frame_length=frame_length,
        hop_length=hop_length,
        window=window,
        sample_rate=wav.sample_rate,
        compression_exponent=compression_exponent,
        compression_scale=compression_scale,
        length=len(wav),
    )


def istft(spec: ComplexSpectrogram) -> Waveform:
    raw = decompress(spec.values, spec.compression_exponent, spec.compression_scale)
    samples = istft_raw(raw, spec.frame_length, spec.hop_length, spec.window, spec.length)
    return Waveform(samples, spec.sample_rate)


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Plain (not scale-invariant) reconstruction SNR."""
    reference = np.asarray(reference, dtype=np.float64)
    err = reference - np.asarray(estimate, dtype=np.float64)
    num = np.sum(reference**2)
    den = np.sum(err**2)
    if den == 0:
        return float("inf")
    return float(10 * np.log10(num / den))


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x**2)))


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ConfigurationError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != expected_rate:
        raise ConfigurationError(f"{path}: sample rate {rate} != {expected_rate} (no resampling)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ConfigurationError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, wav: Waveform, fmt: str = "float32") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if fmt == "float32":
        data = wav.samples.astype("<f4")
    elif fmt == "pcm16":
        data = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    else:
        raise ConfigurationError(f"unknown wav format {fmt!r}")
    wavfile.write(str(path), wav.sample_rate, data)
