"""Command-line entry point: ``degradiff <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import torch

from ..errors import ConfigurationError, DegradiffError
from ..signal import read_wav
from ..training import (
    TrainConfig,
    init_state,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
    train_encoder_heads,
)
from .corpus import CorpusDataset, build_corpus, is_test_item, read_manifest
from .experiments import (
    ExperimentConfig,
    SamplerConfig,
    Variant,
    enhance,
    evaluate_dir,
    head_report,
    run_ablation,
)

log = logging.getLogger("degradiff")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg = replace(cfg, seed=args.seed)
    overrides = {k: getattr(args, k) for k in ("epochs", "max_steps", "batch_size")
                 if getattr(args, k, None) is not None}
    if getattr(args, "mode", None):
        overrides["injection_mode"] = args.mode
    if getattr(args, "learning_rate", None) is not None:
        overrides["learning_rate"] = args.learning_rate
    if getattr(args, "lambda_", None) is not None:
        overrides["lambda_"] = args.lambda_
    return replace(cfg, **overrides) if overrides else cfg


def cmd_degrade(args) -> int:
    manifest = build_corpus(Path(args.out_dir), args.per_category, args.seed, args.clean_dir,
                            args.duration, workers=args.workers)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = CorpusDataset(args.manifest, "train")
    state = init_state(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    (out / "train_log.jsonl").unlink(missing_ok=True)
    if args.heads_only:
        return _train_heads(args, cfg, state, dataset, gen, out)
    history = train(state, dataset, cfg, log_path=out / "train_log.jsonl", generator=gen,
                    progress=lambda s, l: log.info("step %d total %.4f", s.step, l.total))
    save_checkpoint(out / "checkpoint.npz", state, cfg, gen)
    if history and not args.no_figures:
        from .plots import plot_training_curve

        rows = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
        plot_training_curve(rows, out / "training_curve.png")
    print(out / "checkpoint.npz")
    return EXIT_OK


def _train_heads(args, cfg, state, dataset, gen, out) -> int:
    # encoder only; the score net stays at its initialisation
    if cfg.injection_mode.value == "NoEncoder":
        raise ConfigurationError("--heads-only needs an encoder (mode is NoEncoder)")
    steps = cfg.max_steps or cfg.epochs * math.ceil(len(dataset) / cfg.batch_size)
    losses = train_encoder_heads(state.model.encoder, dataset, steps, cfg.batch_size,
                                 cfg.learning_rate, cfg.seed)
    state.step = steps
    state.ema = {k: v.detach().clone() for k, v in state.model.named_parameters()}
    with open(out / "train_log.jsonl", "w") as fh:
        for i, loss in enumerate(losses, 1):
            fh.write(json.dumps({"step": i, "aux": loss}) + "\n")
    save_checkpoint(out / "checkpoint.npz", state, cfg, gen, extra={"heads_only": True})
    print(out / "checkpoint.npz")
    return EXIT_OK


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(args.sampler, args.steps, args.seed)


def cmd_enhance(args) -> int:
    if (args.input is None) == (args.manifest is None):
        raise ConfigurationError("give exactly one of --input or --manifest")
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sampler = _sampler(args)
    if args.input is not None:
        path = out / Path(args.input).name
        enhance(args.input, ckpt, sampler, path)
        print(path)
        return EXIT_OK
    root = Path(args.manifest).parent
    for rec in read_manifest(args.manifest):
        if args.split == "test" and not is_test_item(rec["id"]):
            continue
        enhance(read_wav(root / rec["degraded_path"]), ckpt, sampler, out / f"{rec['id']}.wav")
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_dir(args.manifest, args.enhanced_dir, args.out_dir, args.split)
    overall = report.aggregates["overall"]
    print(f"SI-SDR {overall['si_sdr_db']['mean']:.2f} dB  ESTOI {overall['estoi']['mean']:.3f}  "
          f"n={overall['count']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _train_config(args)
    configs = [ExperimentConfig(Variant(v), seeds=list(args.seeds), corpus=args.manifest, train=base,
                                sampler=_sampler(args)) for v in args.variants]
    table = run_ablation(configs, args.out_dir)
    table.write(args.out_dir, figures=not args.no_figures)
    print((Path(args.out_dir) / "table.txt").read_text())
    failed = [k for k, v in table.status.items() if v != "ok"]
    return EXIT_FAILED if failed else EXIT_OK


def cmd_head_report(args) -> int:
    _, summary = head_report(args.checkpoint, args.manifest, args.out_dir, args.split,
                             figures=not args.no_figures)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="degradiff", description="Degradation-conditioned diffusion enhancement")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="TOML or JSON training config")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", help="synthesise a degraded corpus")
    d.add_argument("--per-category", type=int, default=10)
    d.add_argument("--duration", type=float, default=1.0)
    d.add_argument("--clean-dir")
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_degrade)

    def training_opts(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lambda", dest="lambda_", type=float)

    def sampler_opts(sp):
        sp.add_argument("--sampler", choices=["ODE", "PC"], default="ODE")
        sp.add_argument("--steps", type=int, default=30)

    t = sub.add_parser("train", help="train one model")
    training_opts(t)
    t.add_argument("--mode", choices=["LayerWise", "InputAddition", "NoEncoder"])
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--heads-only", action="store_true",
                   help="train only the encoder on the auxiliary losses (for head-report)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance a file or every manifest item")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input")
    e.add_argument("--manifest")
    e.add_argument("--split", choices=["all", "test"], default="test")
    sampler_opts(e)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="score enhanced files against the clean references")
    v.add_argument("--manifest", required=True)
    v.add_argument("--enhanced-dir", required=True)
    v.add_argument("--split", choices=["all", "test"], default="all")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate ablation variants")
    training_opts(a)
    a.add_argument("--variants", nargs="+", default=[x.value for x in Variant],
                   choices=[x.value for x in Variant])
    a.add_argument("--seeds", nargs="+", type=int, default=[0])
    sampler_opts(a)
    a.set_defaults(func=cmd_ablate)

    h = sub.add_parser("head-report", help="encoder head predictions vs labels")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--manifest", required=True)
    h.add_argument("--split", choices=["all", "test", "train"], default="test")
    h.set_defaults(func=cmd_head_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegradiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
