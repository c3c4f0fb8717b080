"""Objective metrics: SI-SDR, ESTOI (16 kHz variant), paired t-test, report aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .errors import ConfigurationError, DegenerateInputError, LengthError
from .signal import Waveform

EPS = np.finfo(np.float64).eps


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB; ``inf`` when the residual vanishes exactly."""
    if isinstance(reference, Waveform) and isinstance(estimate, Waveform):
        if reference.sample_rate != estimate.sample_rate:
            raise ConfigurationError("sample rates differ")
    ref, est = _samples(reference), _samples(estimate)
    if ref.shape != est.shape:
        raise LengthError(f"length mismatch {ref.shape} vs {est.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise DegenerateInputError("reference has zero energy")
    target = (np.dot(est, ref) / ref_energy) * ref
    residual = est - target
    res_energy = np.dot(residual, residual)
    if res_energy == 0:
        return math.inf
    return float(10 * np.log10(np.dot(target, target) / res_energy))


# ---------------------------------------------------------------------------
# ESTOI
#
# Structure follows the published algorithm (1/3-octave bands from 150 Hz,
# 384 ms segments, silent-frame removal with 40 dB range, row/column
# normalised envelopes). The analysis runs at the input rate instead of
# 10 kHz: frame and FFT sizes scale with the rate, band edges are
# recomputed for it.

ESTOI_NUM_BANDS = 15
ESTOI_MIN_FREQ = 150.0
ESTOI_SEGMENT = 30
ESTOI_DYN_RANGE = 40.0


@dataclass(frozen=True)
class EstoiParams:
    sample_rate: int = 16000

    @property
    def frame_length(self) -> int:
        return 2 * round(128 * self.sample_rate / 10000)

    @property
    def hop(self) -> int:
        return self.frame_length // 2

    @property
    def nfft(self) -> int:
        return int(2 ** math.ceil(math.log2(2 * self.frame_length)))


def third_octave_bands(sample_rate: int, nfft: int, num_bands: int = ESTOI_NUM_BANDS,
                       min_freq: float = ESTOI_MIN_FREQ) -> np.ndarray:
    """Binary band-membership matrix, shape (num_bands, nfft // 2 + 1)."""
    f = np.linspace(0, sample_rate, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands)
    low = min_freq * 2.0 ** ((2 * k - 1) / 6)
    high = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, f.shape[0]))
    for i in range(num_bands):
        lo = int(np.argmin((f - low[i]) ** 2))
        hi = int(np.argmin((f - high[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _frames(x, frame_length, hop):
    n = (x.shape[0] - frame_length) // hop + 1
    if n < 1:
        return np.zeros((0, frame_length))
    return np.lib.stride_tricks.sliding_window_view(x, frame_length)[::hop][:n]


def _window(frame_length):
    return np.hanning(frame_length + 2)[1:-1]


def remove_silent_frames(x, y, dyn_range, frame_length, hop):
    """Drop frames of ``x`` more than ``dyn_range`` dB below its loudest frame (from both signals)."""
    w = _window(frame_length)
    xf = _frames(x, frame_length, hop) * w
    yf = _frames(y, frame_length, hop) * w
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energies > energies.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    length = (n - 1) * hop + frame_length if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + frame_length] += xf[i]
        ys[i * hop:i * hop + frame_length] += yf[i]
    return xs, ys


def _tob(x, params: EstoiParams, obm):
    frames = _frames(x, params.frame_length, params.hop) * _window(params.frame_length)
    spec = np.fft.rfft(frames, n=params.nfft, axis=1)
    return np.sqrt(np.abs(spec) ** 2 @ obm.T).T  # (bands, frames)


def _row_col_normalize(x):
    x = x - x.mean(axis=-1, keepdims=True)
    x = x / (np.linalg.norm(x, axis=-1, keepdims=True) + EPS)
    x = x - x.mean(axis=1, keepdims=True)
    return x / (np.linalg.norm(x, axis=1, keepdims=True) + EPS)


def estoi(reference, estimate, sample_rate: int | None = None) -> float:
    if sample_rate is None:
        sample_rate = reference.sample_rate if isinstance(reference, Waveform) else 16000
    ref, est = _samples(reference), _samples(estimate)
    if ref.shape != est.shape:
        raise LengthError(f"length mismatch {ref.shape} vs {est.shape}")
    if not np.any(ref):
        raise DegenerateInputError("reference is silent")
    params = EstoiParams(sample_rate)
    ref, est = remove_silent_frames(ref, est, ESTOI_DYN_RANGE, params.frame_length, params.hop)
    obm = third_octave_bands(sample_rate, params.nfft)
    x_tob = _tob(ref, params, obm)
    y_tob = _tob(est, params, obm)
    n_frames = x_tob.shape[1]
    if n_frames < ESTOI_SEGMENT:
        raise LengthError(
            f"{n_frames} non-silent frames; ESTOI needs >= {ESTOI_SEGMENT} (384 ms)"
        )
    idx = np.arange(ESTOI_SEGMENT)[None, :] + np.arange(n_frames - ESTOI_SEGMENT + 1)[:, None]
    x_seg = x_tob[:, idx].transpose(1, 0, 2)  # (segments, bands, N)
    y_seg = y_tob[:, idx].transpose(1, 0, 2)
    xn, yn = _row_col_normalize(x_seg), _row_col_normalize(y_seg)
    return float(np.sum(xn * yn / ESTOI_SEGMENT) / xn.shape[0])


# ---------------------------------------------------------------------------
# statistics


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test on a - b. Returns (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise LengthError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = math.fsum(d) / n
    var = math.fsum((d - mean) ** 2) / (n - 1)
    if var == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt(var / n)
    df = n - 1
    p = float(betainc(df / 2, 0.5, df / (df + t * t)))
    return t, p


def _stats(values) -> dict:
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        return {"mean": None, "std": None, "count": 0}
    mean = math.fsum(vals) / n
    var = math.fsum((v - mean) ** 2 for v in vals) / n
    return {"mean": mean, "std": math.sqrt(var), "count": n}


@dataclass
class MetricReport:
    records: list
    aggregates: dict = field(default_factory=dict)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["id", "category", "si_sdr_db", "estoi", "pesq", "utmos"]
        with open(out / "per_item.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({c: r.get(c) for c in cols})
        (out / "aggregates.json").write_text(json.dumps(self.aggregates, indent=2, sort_keys=True))


def aggregate_report(records) -> MetricReport:
    """Per-category and overall mean/std of SI-SDR and ESTOI.

    Infinite SI-SDR values are excluded from the statistics and counted
    under ``si_sdr_inf``.
    """
    records = list(records)
    if not records:
        raise ConfigurationError("no records to aggregate")
    for r in records:
        if r.get("category") is None:
            raise ConfigurationError(f"record {r.get('id')} has no category")
        if not -1 <= r["estoi"] <= 1:
            raise ConfigurationError(f"record {r.get('id')}: estoi {r['estoi']} outside [-1, 1]")

    def summarise(rows):
        sdr = [r["si_sdr_db"] for r in rows]
        finite = [v for v in sdr if math.isfinite(v)]
        return {
            "si_sdr_db": _stats(finite),
            "si_sdr_inf": len(sdr) - len(finite),
            "estoi": _stats(r["estoi"] for r in rows),
            "count": len(rows),
        }

    categories = []
    for r in records:
        if r["category"] not in categories:
            categories.append(r["category"])
    aggregates = {c: summarise([r for r in records if r["category"] == c]) for c in categories}
    aggregates["overall"] = summarise(records)
    return MetricReport(records, aggregates)
