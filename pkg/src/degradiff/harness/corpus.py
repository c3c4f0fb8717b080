"""Synthetic corpus construction, manifests and tensor datasets."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import signal as sps

from ..degrade import CATEGORIES, DegradationLabel, compose_degradation
from ..errors import ConfigurationError
from ..signal import Waveform, read_wav, stft, write_wav
from ..training import Batch

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("id", "clean_path", "degraded_path", "category", "noise_class", "snr_db",
                   "t60_s", "alpha", "seed")


def item_seed(global_seed: int, index: int) -> int:
    """Per-item seed; independent of synthesis order."""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1, np.uint64)[0] >> 1)


def speech_like(duration: float, rng: np.random.Generator, sample_rate: int = 16000) -> Waveform:
    """Voiced harmonic complex with a pitch glide, formant resonances and syllabic envelope."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f_start, f_end = rng.uniform(80, 300, size=2)
    f0 = f_start * (f_end / f_start) ** (t / duration)
    f0 = f0 * (1 + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 6) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(sample_rate / 2 / f0.max())
    source = sum(np.sin(k * phase) / k for k in range(1, n_harm + 1))
    source = source + 0.05 * rng.standard_normal(n)

    voiced = np.zeros(n)
    for lo, hi in ((300, 900), (900, 2500), (2500, 3500)):
        fc = rng.uniform(lo, hi)
        bw = rng.uniform(80, 200)
        r = np.exp(-np.pi * bw / sample_rate)
        a = [1.0, -2 * r * np.cos(2 * np.pi * fc / sample_rate), r * r]
        voiced += sps.lfilter([1 - r], a, source)

    rate = rng.uniform(2, 6)
    env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 1.5
    env = 0.02 + env
    x = voiced * env
    x = x / np.max(np.abs(x)) * 0.9
    return Waveform(x, sample_rate)


def is_test_item(item_id: str, fraction: int = 10) -> bool:
    """Hash-based held-out split: roughly one item in ``fraction``."""
    return int(hashlib.sha1(item_id.encode()).hexdigest(), 16) % fraction == 0


def _fit_length(wav: Waveform, n: int) -> Waveform:
    x = wav.samples[:n]
    if x.shape[0] < n:
        x = np.pad(x, (0, n - x.shape[0]))
    return wav.with_samples(x)


def _synth_item(args):
    index, category, j, seed, out_dir, clean_path, duration, sample_rate = args
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    if clean_path is None:
        clean = speech_like(duration, rng, sample_rate)
    else:
        clean = _fit_length(read_wav(clean_path, sample_rate), n)
    degraded, label, rir = compose_degradation(clean, category, rng.integers(0, 2**63 - 1),
                                               return_rir=True)
    item_id = f"{category.value}_{j:05d}"
    rec = {
        "id": item_id,
        "clean_path": f"clean/{item_id}.wav",
        "degraded_path": f"degraded/{item_id}.wav",
        **label.to_dict(),
        "seed": int(seed),
    }
    write_wav(out_dir / rec["clean_path"], clean)
    write_wav(out_dir / rec["degraded_path"], degraded)
    if rir is not None:
        rec["rir_path"] = f"rir/{item_id}.wav"
        write_wav(out_dir / rec["rir_path"], rir.taps)
    return rec


def build_corpus(out_dir, per_category: int, seed: int, clean_dir=None, duration: float = 1.0,
                 sample_rate: int = 16000, workers: int = 1) -> Path:
    """Write clean/degraded WAV pairs (plus RIRs) and ``manifest.jsonl``; return the manifest path."""
    if per_category < 1:
        raise ConfigurationError("per_category must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clean_files = None
    if clean_dir is not None:
        clean_files = sorted(Path(clean_dir).glob("*.wav"))
        if not clean_files:
            raise ConfigurationError(f"no .wav files in {clean_dir}")
    jobs = []
    for ci, category in enumerate(CATEGORIES):
        for j in range(per_category):
            index = ci * per_category + j
            clean_path = None if clean_files is None else clean_files[index % len(clean_files)]
            jobs.append((index, category, j, item_seed(seed, index), out_dir, clean_path,
                         duration, sample_rate))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_synth_item, jobs))
    else:
        records = [_synth_item(job) for job in jobs]
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("wrote %d items to %s", len(records), manifest)
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                missing = [f for f in MANIFEST_FIELDS if f not in rec]
                if missing:
                    raise ConfigurationError(f"{path}: record missing fields {missing}")
                records.append(rec)
    return records


def manifest_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def label_of(rec: dict) -> DegradationLabel:
    return DegradationLabel.from_dict(rec)


@dataclass
class CorpusItem:
    record: dict
    clean: Waveform
    degraded: Waveform
    label: DegradationLabel


class CorpusDataset:
    """Manifest items as precomputed spectrogram tensors."""

    def __init__(self, manifest, split: str = "train"):
        if split not in ("train", "test", "all"):
            raise ConfigurationError(f"unknown split {split!r}")
        self.manifest = Path(manifest)
        root = self.manifest.parent
        recs = read_manifest(self.manifest)
        if split == "train":
            recs = [r for r in recs if not is_test_item(r["id"])]
        elif split == "test":
            recs = [r for r in recs if is_test_item(r["id"])]
        self.items = []
        for r in recs:
            self.items.append(CorpusItem(r, read_wav(root / r["clean_path"]),
                                         read_wav(root / r["degraded_path"]), label_of(r)))
        if not self.items:
            raise ConfigurationError(f"{manifest}: no items in split {split!r}")
        lengths = {len(it.clean) for it in self.items}
        if len(lengths) != 1:
            raise ConfigurationError(f"corpus items differ in length: {sorted(lengths)}")
        self.clean = torch.stack([_spec_tensor(it.clean) for it in self.items])
        self.noisy = torch.stack([_spec_tensor(it.degraded) for it in self.items])
        self.noisy_wav = torch.stack([torch.as_tensor(it.degraded.samples, dtype=torch.float32)
                                      for it in self.items])
        self.noise_class = torch.tensor([it.label.noise_class for it in self.items])
        self.t60 = torch.tensor([it.label.t60_target for it in self.items], dtype=torch.float32)
        self.alpha_norm = torch.tensor([it.label.alpha_target for it in self.items], dtype=torch.float32)

    def __len__(self):
        return len(self.items)

    def batch(self, idx) -> Batch:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return Batch(self.clean[idx], self.noisy[idx], self.noisy_wav[idx], self.noise_class[idx],
                     self.t60[idx], self.alpha_norm[idx])


def _spec_tensor(wav: Waveform) -> torch.Tensor:
    """(F, T) complex64 compressed spectrogram."""
    return torch.as_tensor(stft(wav).values.T.copy(), dtype=torch.complex64)
