"""Command-line harness.

Commands: gen-synth, pretrain, probe, finetune, verify, export-features,
inspect-checkpoint.  Every command is a pure function of its inputs and
seed; identical invocations produce byte-identical outputs (loss logs,
reports, checkpoints).

Exit codes: 0 ok, 1 validation error, 2 numeric fault, 3 IO/corruption.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernel_backend
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, config_hash, dump_config, load_config
from .data import EegBatch, SyntheticSpec, gen_synthetic, read_dataset, write_dataset
from .errors import CorruptionError, NumericFault, ValidationError
from .model import Model, build_model
from .pretraining import AdamW, derived_rng, train_step
from .probe import export_features, finetune_model, probe_model
from .verify import run_all


def _load_config_arg(args) -> ModelConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = ModelConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    return cfg


def _check_dataset_matches(cfg: ModelConfig, batch: EegBatch, path) -> None:
    if (batch.regions, batch.per_region, batch.time_steps) != (
            cfg.regions, cfg.electrodes_per_region, cfg.time_steps):
        raise ValidationError(
            f"dataset {path} has grid "
            f"(R={batch.regions}, E={batch.per_region}, T={batch.time_steps}) but the "
            f"config expects (R={cfg.regions}, E={cfg.electrodes_per_region}, "
            f"T={cfg.time_steps})")


def _model_from_checkpoint(args) -> tuple[Model, ModelConfig]:
    cfg_ck, tensors = load_checkpoint(args.checkpoint)
    cfg = cfg_ck
    if getattr(args, "config", None):
        cfg_file = load_config(args.config)
        ours, theirs = cfg_file.architecture_fields(), cfg_ck.architecture_fields()
        diffs = {k: (ours[k], theirs[k]) for k in ours if ours[k] != theirs[k]}
        if diffs:
            raise ValidationError(
                "checkpoint architecture differs from --config: "
                + ", ".join(f"{k}: config={a} checkpoint={b}" for k, (a, b) in diffs.items()))
        cfg = cfg_file
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    model = build_model(cfg_ck)
    weights = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model.load_state_dict(weights)
    return model, cfg


def _write_report(out_dir: Path, report) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.lines())
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    sys.stdout.write(report.lines())


def cmd_gen_synth(args) -> int:
    cfg = _load_config_arg(args)
    spec = SyntheticSpec(
        n_classes=args.classes,
        band_profile=tuple(args.band_profile.split(",")),
        region_profile=tuple(args.region_profile.split(",")),
        snr=args.snr,
        per_class=args.per_class,
        seed=cfg.seed if args.seed is None else args.seed,
        regions=cfg.regions,
        per_region=cfg.electrodes_per_region,
        time_steps=cfg.time_steps,
        bands=cfg.bands,
    )
    batch = gen_synthetic(spec)
    write_dataset(args.out, batch)
    print(f"wrote {batch.batch} samples ({spec.n_classes} classes) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        cfg_ck, tensors = load_checkpoint(args.checkpoint)
        cfg = cfg_ck
        if args.config:
            cfg_file = load_config(args.config)
            h_file, h_ck = config_hash(cfg_file), config_hash(cfg_ck)
            if h_file != h_ck:
                raise ValidationError(
                    f"refusing to resume: --config hash {h_file:016x} differs from "
                    f"checkpoint config hash {h_ck:016x}")
        model = build_model(cfg)
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("opt.")})
    else:
        cfg = _load_config_arg(args)
        model = build_model(cfg)
        tensors = None

    batch = read_dataset(args.data)
    _check_dataset_matches(cfg, batch, args.data)
    n = batch.batch
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt = AdamW(list(model.named_parameters()), lr=cfg.lr, wd=cfg.wd, clip=cfg.clip,
                warmup_steps=cfg.warmup_epochs * steps_per_epoch)
    if tensors is not None:
        opt.load_state_arrays({k: v for k, v in tensors.items() if k.startswith("opt.")})
        if opt.step_count % steps_per_epoch != 0:
            raise ValidationError(
                f"checkpoint stopped mid-epoch (step {opt.step_count}, "
                f"{steps_per_epoch} steps/epoch); cannot resume deterministically")

    start_epoch = opt.step_count // steps_per_epoch
    ck_path = out_dir / "checkpoint.untf"
    log_path = out_dir / "loss_log.csv"

    def save():
        state = dict(model.state_dict())
        state.update(opt.state_arrays())
        save_checkpoint(ck_path, cfg, state)

    with open(log_path, "w") as log:
        log.write("step,lr,L_time,L_freq,L_aux,total,grad_norm,expert_load_max\n")
        for epoch in range(start_epoch, cfg.epochs):
            order = derived_rng(cfg.seed, epoch, "order").permutation(n)
            for chunk in range(steps_per_epoch):
                idx = order[chunk * cfg.batch_size: (chunk + 1) * cfg.batch_size]
                step = opt.step_count
                parts = train_step(model, opt, batch.select(idx), cfg, step)
                log.write(f"{step + 1},{parts['lr']!r},{parts['time']!r},"
                          f"{parts['freq']!r},{parts['aux']!r},{parts['total']!r},"
                          f"{parts['grad_norm']!r},{parts['expert_load_max']!r}\n")
            save()
    save()
    print(f"pretrained {cfg.epochs - start_epoch} epochs "
          f"({opt.step_count} steps total) -> {ck_path}")
    return 0


def cmd_probe(args) -> int:
    model, cfg = _model_from_checkpoint(args)
    batch = read_dataset(args.data)
    _check_dataset_matches(cfg, batch, args.data)
    report = probe_model(model, batch, cfg, seed=cfg.seed)
    _write_report(Path(args.out), report)
    return 0


def cmd_finetune(args) -> int:
    model, cfg = _model_from_checkpoint(args)
    batch = read_dataset(args.data)
    _check_dataset_matches(cfg, batch, args.data)
    report, head = finetune_model(model, batch, cfg, seed=cfg.seed)
    out_dir = Path(args.out)
    _write_report(out_dir, report)
    state = dict(model.state_dict())
    state.update({f"head.{k}": v for k, v in head.state_dict().items()})
    save_checkpoint(out_dir / "finetuned.untf", cfg, state)
    return 0


def cmd_verify(args) -> int:
    results = run_all()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties hold")
    return 1 if failed else 0


def cmd_export_features(args) -> int:
    model, cfg = _model_from_checkpoint(args)
    batch = read_dataset(args.data)
    _check_dataset_matches(cfg, batch, args.data)
    text = export_features(model, batch)
    Path(args.out).write_text(text)
    print(f"wrote features for {batch.batch} samples to {args.out}")
    return 0


def cmd_inspect_checkpoint(args) -> int:
    cfg, tensors = load_checkpoint(args.checkpoint)
    print(f"config hash: {config_hash(cfg):016x}")
    print(dump_config(cfg), end="")
    print(f"tensors: {len(tensors)}")
    for name, arr in tensors.items():
        print(f"  {name}  {arr.dtype}  {list(arr.shape)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topomoe",
        description=f"topology-aware MoE transformer for EEG "
                    f"(v{__version__}, {kernel_backend} kernels)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, data=False, checkpoint=False, out=False):
        if config:
            p.add_argument("--config", help="flat key=value config file")
        if data:
            p.add_argument("--data", required=True, help="dataset file (EEGB)")
        if checkpoint:
            p.add_argument("--checkpoint", required=checkpoint == "required",
                           help="checkpoint file (UNTF)")
        if out:
            p.add_argument("--out", required=True, help=out)
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--f64", action="store_true",
                       help="run tensors in float64 (gradient-check mode)")

    p = sub.add_parser("gen-synth", help="generate a synthetic class-coded dataset")
    common(p, config=True, out="output dataset path")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--band-profile", default="alpha,beta",
                   help="comma list: band carrying the burst, per class (cycled)")
    p.add_argument("--region-profile", default="frontal,occipital",
                   help="comma list: region carrying the burst, per class (cycled)")
    p.add_argument("--snr", type=float, default=4.0)
    p.add_argument("--per-class", type=int, default=32)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    common(p, config=True, data=True, out="output directory")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    common(p, config=True, data=True, checkpoint="required", out="output directory")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", help="full fine-tuning with a classification head")
    common(p, config=True, data=True, checkpoint="required", out="output directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("verify", help="run the property/invariant suite")
    p.add_argument("--f64", action="store_true", help="force float64 tensor mode")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-features", help="dump pooled features as CSV")
    common(p, config=True, data=True, checkpoint="required", out="output CSV path")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint config and tensors")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect_checkpoint)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "f64", False):
        T.set_default_dtype(np.float64)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 2
    except (CorruptionError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
