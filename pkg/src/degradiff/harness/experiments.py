"""Enhancement, evaluation, the ablation matrix and the encoder head report."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..degrade import NO_NOISE, CATEGORIES
from ..errors import ConfigurationError, DegradiffError, VersioningError
from ..metrics import aggregate_report, estoi, paired_t_test, si_sdr
from ..scorenet import InjectionMode
from ..sde import SdeParams, reverse_ode_sampler, reverse_pc_sampler
from ..signal import Waveform, istft, read_wav, stft, write_wav
from ..training import (
    Checkpoint,
    EnhancementModel,
    TrainConfig,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .corpus import CorpusDataset, is_test_item, manifest_checksum, read_manifest

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# enhancement


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ODE"  # or "PC"
    n_steps: int = 30
    seed: int = 0
    snr: float = 0.5

    def __post_init__(self):
        if self.kind.upper() not in ("ODE", "PC"):
            raise ConfigurationError(f"unknown sampler {self.kind!r}")
        object.__setattr__(self, "kind", self.kind.upper())


@torch.no_grad()
def enhance_waveform(model: EnhancementModel, wav: Waveform, sde: SdeParams,
                     sampler: SamplerConfig = SamplerConfig(),
                     mode: InjectionMode = InjectionMode.LayerWise, weights=None) -> Waveform:
    """STFT -> encoder bundle -> reverse sampler -> iSTFT."""
    model.eval()
    spec = stft(wav)
    dtype = model.scorenet.conv_in.weight.dtype
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    y = torch.as_tensor(spec.values.T.copy(), dtype=cdtype)[None]
    wav_t = torch.as_tensor(wav.samples, dtype=dtype)[None]
    _, c_extra = model.conditioning(wav_t, mode, weights)

    def score_fn(x, y_, t):
        return model.scorenet(x, y_, t, c_extra, mode)

    params = replace(sde, n_steps=sampler.n_steps, snr=sampler.snr)
    gen = torch.Generator().manual_seed(sampler.seed)
    if sampler.kind == "PC":
        x = reverse_pc_sampler(score_fn, y, params, gen)
    else:
        x = reverse_ode_sampler(score_fn, y, params, gen)
    out = spec.with_values(x[0].T.cpu().numpy().astype(np.complex128))
    return istft(out)


def enhance(input_wav, checkpoint, sampler: SamplerConfig = SamplerConfig(), output_wav=None,
            mode: InjectionMode | None = None, weights=None, use_ema: bool | None = None) -> Waveform:
    """File-level enhancement with a stored checkpoint."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    wav = input_wav if isinstance(input_wav, Waveform) else read_wav(input_wav)
    ckpt_mode = ckpt.config.injection_mode
    mode = ckpt_mode if mode is None else InjectionMode(mode)
    if mode is not ckpt_mode and not (ckpt_mode is InjectionMode.LayerWise
                                      and mode is InjectionMode.ZeroConditioning):
        raise VersioningError(f"checkpoint trained in {ckpt_mode.value} cannot run in {mode.value}")
    out = enhance_waveform(ckpt.inference_model(use_ema), wav, ckpt.config.sde, sampler, mode, weights)
    if output_wav is not None:
        write_wav(output_wav, out)
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate_pairs(pairs) -> list[dict]:
    """``pairs``: iterable of (id, category, clean Waveform, estimate Waveform)."""
    records = []
    for item_id, category, clean, est in pairs:
        records.append({"id": item_id, "category": category, "si_sdr_db": si_sdr(clean, est),
                        "estoi": estoi(clean, est), "pesq": None, "utmos": None})
    return records


def evaluate_dir(manifest, enhanced_dir, out_dir=None, split: str = "all"):
    """Score ``enhanced_dir/<id>.wav`` against each manifest item's clean file."""
    manifest = Path(manifest)
    root = manifest.parent
    enhanced_dir = Path(enhanced_dir)
    pairs = []
    for rec in read_manifest(manifest):
        if split == "test" and not is_test_item(rec["id"]):
            continue
        path = enhanced_dir / f"{rec['id']}.wav"
        if not path.exists():
            continue
        clean = read_wav(root / rec["clean_path"])
        est = read_wav(path)
        n = min(len(clean), len(est))
        pairs.append((rec["id"], rec["category"], clean.with_samples(clean.samples[:n]),
                      est.with_samples(est.samples[:n])))
    if not pairs:
        raise ConfigurationError(f"no enhanced files in {enhanced_dir} match {manifest}")
    report = aggregate_report(evaluate_pairs(pairs))
    if out_dir is not None:
        report.write(out_dir)
    return report


# ---------------------------------------------------------------------------
# ablation


class Variant(str, enum.Enum):
    LayerWise = "LayerWise"
    InputAddition = "InputAddition"
    NoEncoder = "NoEncoder"
    ZeroConditioningEval = "ZeroConditioningEval"
    LambdaZero = "LambdaZero"
    AdaptiveWeights = "AdaptiveWeights"
    UniformWeights = "UniformWeights"

    @property
    def inference_only(self) -> bool:
        return self in (Variant.ZeroConditioningEval, Variant.AdaptiveWeights, Variant.UniformWeights)


TRAINING_MODE = {
    Variant.LayerWise: InjectionMode.LayerWise,
    Variant.InputAddition: InjectionMode.InputAddition,
    Variant.NoEncoder: InjectionMode.NoEncoder,
    Variant.LambdaZero: InjectionMode.LayerWise,
}


@dataclass
class ExperimentConfig:
    variant: Variant
    seeds: list = field(default_factory=lambda: [0])
    corpus: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.variant = Variant(self.variant)

    def train_config(self, seed: int) -> TrainConfig:
        cfg = replace(self.train, seed=int(seed), injection_mode=TRAINING_MODE[self.variant])
        if self.variant is Variant.LambdaZero:
            cfg = replace(cfg, lambda_=0.0)
        return cfg

    def eval_setup(self):
        """(injection mode, branch weighting) at inference."""
        if self.variant is Variant.ZeroConditioningEval:
            return InjectionMode.ZeroConditioning, None
        if self.variant is Variant.AdaptiveWeights:
            return InjectionMode.LayerWise, "adaptive"
        if self.variant is Variant.UniformWeights:
            return InjectionMode.LayerWise, torch.ones(3)
        return TRAINING_MODE[self.variant], None


@dataclass
class ResultsTable:
    rows: list  # dicts: variant, seed, category, metric, mean, std, count
    per_item: list  # dicts: variant, seed, id, category, si_sdr_db, estoi
    ttests: list  # dicts: a, b, metric, t, p, n
    status: dict  # (variant, seed) -> "ok" | error message
    checksums: dict = field(default_factory=dict)
    soft_checks: list = field(default_factory=list)

    def check_complete(self, configs) -> None:
        expected = {(c.variant.value, int(s)) for c in configs for s in c.seeds}
        seen = {}
        for key in self.status:
            seen[key] = seen.get(key, 0) + 1
        if set(seen) != expected or any(v != 1 for v in seen.values()):
            raise ConfigurationError(f"results incomplete: expected {sorted(expected)}, got {sorted(seen)}")

    def write(self, out_dir, figures: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "results.csv", self.rows,
                   ["variant", "seed", "category", "metric", "mean", "std", "count"])
        _write_csv(out / "per_item.csv", self.per_item,
                   ["variant", "seed", "id", "category", "si_sdr_db", "estoi"])
        _write_csv(out / "ttests.csv", self.ttests, ["a", "b", "metric", "t", "p", "n"])
        status = [{"variant": v, "seed": s, "status": st} for (v, s), st in self.status.items()]
        _write_csv(out / "status.csv", status, ["variant", "seed", "status"])
        (out / "table.txt").write_text(render_results(self))
        (out / "checks.json").write_text(json.dumps(
            {"checksums": self.checksums, "soft_checks": self.soft_checks}, indent=2, default=str))
        if figures:
            from .plots import plot_ablation

            plot_ablation(self, out / "ablation_si_sdr.png")


def _write_csv(path, rows, cols):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _mean_by(rows, variant, metric, category="overall"):
    vals = [r["mean"] for r in rows if r["variant"] == variant and r["metric"] == metric
            and r["category"] == category and r["mean"] is not None]
    return math.fsum(vals) / len(vals) if vals else None


def render_results(table: ResultsTable) -> str:
    """Plain-text tables: variant summary, then per-category breakdown."""
    variants = []
    for r in table.rows:
        if r["variant"] not in variants:
            variants.append(r["variant"])
    lines = [f"{'Variant':<22}{'ESTOI':>8}{'SI-SDR':>9}", "-" * 39]
    for v in variants:
        e = _mean_by(table.rows, v, "estoi")
        s = _mean_by(table.rows, v, "si_sdr_db")
        lines.append(f"{v:<22}{_fmt(e, 3):>8}{_fmt(s, 1):>9}")
    lines += ["", f"{'Variant':<22}{'Type':<20}{'N':>5}{'ESTOI':>8}{'SI-SDR':>9}", "-" * 64]
    for v in variants:
        for cat in [c.value for c in CATEGORIES]:
            e = _mean_by(table.rows, v, "estoi", cat)
            s = _mean_by(table.rows, v, "si_sdr_db", cat)
            ns = [r["count"] for r in table.rows if r["variant"] == v and r["category"] == cat
                  and r["metric"] == "estoi"]
            if not ns:
                continue
            lines.append(f"{v:<22}{cat:<20}{ns[0]:>5}{_fmt(e, 3):>8}{_fmt(s, 1):>9}")
    if table.ttests:
        lines += ["", "paired t-tests (SI-SDR, per item and seed)"]
        for t in table.ttests:
            if t["metric"] == "si_sdr_db":
                lines.append(f"  {t['a']} vs {t['b']}: t={_fmt(t['t'], 3)} p={_fmt(t['p'], 4)} n={t['n']}")
    failed = {k: v for k, v in table.status.items() if v != "ok"}
    if failed:
        lines += ["", "failed runs:"] + [f"  {v}/{s}: {msg}" for (v, s), msg in failed.items()]
    if table.soft_checks:
        lines += ["", "directional checks (non-blocking):"]
        lines += [f"  [{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}"
                  for c in table.soft_checks]
    return "\n".join(lines) + "\n"


def _fmt(v, digits):
    if v is None:
        return "-"
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.{digits}f}"


def run_ablation(configs: list[ExperimentConfig], out_dir, manifest=None, progress=None) -> ResultsTable:
    """Train every training-time variant per seed, evaluate all variants on the test split."""
    configs = list(configs)
    if not configs:
        raise ConfigurationError("no experiment configs")
    corpora = {c.corpus if c.corpus is not None else manifest for c in configs}
    if len(corpora) != 1 or None in corpora:
        raise ConfigurationError(f"all variants must share one corpus manifest, got {corpora}")
    manifest = Path(corpora.pop())
    variants = {c.variant for c in configs}
    layerwise = next((c for c in configs if c.variant is Variant.LayerWise), None)
    for c in configs:
        if c.variant.inference_only:
            if layerwise is None:
                raise ConfigurationError(f"{c.variant.value} needs a LayerWise-trained checkpoint")
            missing = set(map(int, c.seeds)) - set(map(int, layerwise.seeds))
            if missing:
                raise ConfigurationError(f"{c.variant.value} seeds {sorted(missing)} lack LayerWise checkpoints")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checksum = manifest_checksum(manifest)
    train_set = CorpusDataset(manifest, "train")
    test_set = CorpusDataset(manifest, "test")
    item_seeds = [it.record["seed"] for it in train_set.items]
    checksums = {"manifest": checksum, "train_item_seeds": _digest(item_seeds), "runs": {}}

    status, checkpoints = {}, {}
    for c in configs:
        if c.variant.inference_only:
            continue
        for seed in c.seeds:
            key = (c.variant.value, int(seed))
            cfg = c.train_config(seed)
            ckpt_path = out / "checkpoints" / f"{c.variant.value}_seed{seed}.npz"
            try:
                if manifest_checksum(manifest) != checksum:
                    raise ConfigurationError("manifest changed during the ablation")
                state = init_state(cfg)
                gen = torch.Generator().manual_seed(int(seed))
                train(state, train_set, cfg, log_path=out / "logs" / f"{key[0]}_seed{seed}.jsonl"
                      if _mkdir(out / "logs") else None, generator=gen,
                      progress=progress)
                save_checkpoint(ckpt_path, state, cfg, gen, extra={"manifest_sha256": checksum})
                checkpoints[key] = load_checkpoint(ckpt_path)
                checksums["runs"][f"{key[0]}/{seed}"] = {"manifest": checksum,
                                                         "train_item_seeds": _digest(item_seeds)}
                status[key] = "ok"
            except DegradiffError as exc:
                log.warning("run %s failed: %s", key, exc)
                status[key] = f"failed: {exc}"

    per_item, rows = [], []
    for c in configs:
        mode, weights = c.eval_setup()
        for seed in c.seeds:
            key = (c.variant.value, int(seed))
            src = (Variant.LayerWise.value, int(seed)) if c.variant.inference_only else key
            if src not in checkpoints:
                status.setdefault(key, f"skipped: no checkpoint for {src}")
                continue
            ckpt = checkpoints[src]
            pairs = []
            for it in test_set.items:
                est = enhance_waveform(ckpt.inference_model(), it.degraded, ckpt.config.sde,
                                       c.sampler, mode, weights)
                pairs.append((it.record["id"], it.record["category"], it.clean, est))
            recs = evaluate_pairs(pairs)
            report = aggregate_report(recs)
            status.setdefault(key, "ok")
            for r in recs:
                per_item.append({"variant": key[0], "seed": seed, **r})
            for cat, agg in report.aggregates.items():
                for metric in ("si_sdr_db", "estoi"):
                    rows.append({"variant": key[0], "seed": seed, "category": cat, "metric": metric,
                                 **agg[metric]})

    table = ResultsTable(rows, per_item, _ttests(per_item), status, checksums)
    table.check_complete(configs)
    baseline = [si_sdr(it.clean, it.degraded) for it in test_set.items]
    baseline = [v for v in baseline if math.isfinite(v)]
    table.soft_checks = directional_checks(table, variants,
                                           math.fsum(baseline) / len(baseline) if baseline else None)
    return table


def _mkdir(p: Path) -> bool:
    p.mkdir(parents=True, exist_ok=True)
    return True


def _digest(values) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(list(values)).encode()).hexdigest()


def _ttests(per_item) -> list[dict]:
    variants = []
    for r in per_item:
        if r["variant"] not in variants:
            variants.append(r["variant"])
    out = []
    for i, a in enumerate(variants):
        for b in variants[i + 1:]:
            ka = {(r["seed"], r["id"]): r for r in per_item if r["variant"] == a}
            kb = {(r["seed"], r["id"]): r for r in per_item if r["variant"] == b}
            keys = sorted(set(ka) & set(kb))
            for metric in ("si_sdr_db", "estoi"):
                xa = [ka[k][metric] for k in keys]
                xb = [kb[k][metric] for k in keys]
                finite = [(x, y) for x, y in zip(xa, xb) if math.isfinite(x) and math.isfinite(y)]
                if len(finite) < 2:
                    continue
                t, p = paired_t_test([x for x, _ in finite], [y for _, y in finite])
                out.append({"a": a, "b": b, "metric": metric, "t": t, "p": p, "n": len(finite)})
    return out


def directional_checks(table: ResultsTable, variants, input_si_sdr: float | None = None) -> list[dict]:
    """Seeded toy-scale orderings; reported, never fatal."""
    checks = []
    lw = _mean_by(table.rows, Variant.LayerWise.value, "si_sdr_db")
    if lw is not None and input_si_sdr is not None:
        checks.append({"name": "LayerWise enhanced > degraded input", "passed": lw > input_si_sdr,
                       "detail": f"{lw:.3f} vs {input_si_sdr:.3f} dB"})
    if Variant.InputAddition in variants:
        ia = _mean_by(table.rows, Variant.InputAddition.value, "si_sdr_db")
        if lw is not None and ia is not None:
            checks.append({"name": "SI-SDR LayerWise >= InputAddition", "passed": lw >= ia,
                           "detail": f"{lw:.3f} vs {ia:.3f} dB"})
    if Variant.ZeroConditioningEval in variants:
        zc = _mean_by(table.rows, Variant.ZeroConditioningEval.value, "si_sdr_db")
        if lw is not None and zc is not None:
            checks.append({"name": "ZeroConditioningEval degrades LayerWise", "passed": zc < lw,
                           "detail": f"{zc:.3f} vs {lw:.3f} dB"})
    return checks


# ---------------------------------------------------------------------------
# encoder head analysis


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


DISTORT_DETECT_THRESHOLD = 0.1


def head_summary(rows) -> dict:
    """Accuracy / correlation summary of head predictions vs labels."""
    tn = np.array([r["true_noise_class"] for r in rows])
    pn = np.array([r["pred_noise_class"] for r in rows])
    tt = np.array([r["true_t60"] for r in rows], dtype=float)
    pt = np.array([r["pred_t60"] for r in rows], dtype=float)
    ta = np.array([r["true_alpha_norm"] for r in rows], dtype=float)
    pa = np.array([r["pred_alpha_norm"] for r in rows], dtype=float)
    present_a = np.array([r.get("true_distorted", ta_i > 0) for r, ta_i in zip(rows, ta)], dtype=bool)
    reverb = tt > 0
    summary = {
        "n": len(rows),
        "noise_accuracy": float(np.mean(tn == pn)),
        "noise_detection_accuracy": float(np.mean((tn != NO_NOISE) == (pn != NO_NOISE))),
        "t60_pearson": _pearson(tt, pt),
        "t60_mae": float(np.mean(np.abs(tt - pt))),
        "t60_mae_reverberant": float(np.mean(np.abs(tt[reverb] - pt[reverb]))) if reverb.any() else None,
        "distort_pearson": _pearson(ta, pa),
        "distort_detection_accuracy": float(np.mean(present_a == (pa >= DISTORT_DETECT_THRESHOLD))),
    }
    diagnostics = []
    for key in ("t60_pearson", "distort_pearson"):
        if summary[key] is None:
            diagnostics.append(f"{key} undefined: constant predictions or labels")
    summary["diagnostics"] = diagnostics
    return summary


@torch.no_grad()
def predict_heads(model: EnhancementModel, items) -> list[dict]:
    model.eval()
    rows = []
    dtype = model.scorenet.conv_in.weight.dtype
    for it in items:
        wav = torch.as_tensor(it.degraded.samples, dtype=dtype)[None]
        bundle = model.encoder(wav)
        preds = bundle.head_outputs
        rows.append({
            "id": it.record["id"],
            "true_noise_class": it.label.noise_class,
            "pred_noise_class": int(preds.noise_logits.argmax(-1)[0]),
            "true_t60": it.label.t60_target,
            "pred_t60": float(preds.t60_pred[0]),
            "true_alpha_norm": it.label.alpha_target,
            "pred_alpha_norm": float(preds.distort_pred[0]),
            "true_distorted": it.label.alpha is not None,
        })
    return rows


HEAD_COLUMNS = ["id", "true_noise_class", "pred_noise_class", "true_t60", "pred_t60",
                "true_alpha_norm", "pred_alpha_norm"]


def head_report(checkpoint, manifest, out_dir=None, split: str = "test", figures: bool = True,
                use_ema: bool | None = None):
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.config.injection_mode is InjectionMode.NoEncoder:
        raise ConfigurationError("checkpoint has no trained encoder (NoEncoder variant)")
    items = CorpusDataset(manifest, split).items
    rows = predict_heads(ckpt.inference_model(use_ema), items)
    summary = head_summary(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "heads.csv", rows, HEAD_COLUMNS)
        (out / "heads_summary.json").write_text(json.dumps(summary, indent=2))
        if figures:
            from .plots import plot_heads

            plot_heads(rows, out / "heads.png")
    return rows, summary
