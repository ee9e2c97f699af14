"""Command-line entry point: ``decl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("decl")

MANIFEST_NAME = "run_manifest.json"


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started_at: str = ""
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def _manifest(args, config, seed, inputs, outputs):
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    m = RunManifest(args.command, config, int(seed), started_at=stamp,
                    inputs={k: str(v) for k, v in inputs.items() if v is not None},
                    outputs={k: str(v) for k, v in outputs.items()})
    m.write(args.out)
    return m


def _load_json(path):
    return json.loads(Path(path).read_text()) if path else {}


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .signal import NoiseSpec, save_dataset, synth_dataset

    noise = NoiseSpec.parse(args.noise, seed=args.seed)
    config = {"n": args.n, "len": args.len, "channels": args.channels, "classes": args.classes,
              "noise": args.noise, "sample_rate": args.sample_rate}
    _manifest(args, config, args.seed, {}, {"dataset": args.out})
    data = synth_dataset(args.n, args.len, args.channels, args.classes, noise, args.seed,
                         sample_rate=args.sample_rate)
    save_dataset(data, args.out)


def _parse_params(items):
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--param expects key=value, got {item!r}")
        params[key] = float(value)
    return params


def cmd_denoise(args):
    from .denoisers import DenoiserSpec, build_bank, denoise_dataset
    from .signal import Dataset, load_dataset, save_dataset
    from .trainer import precompute_denoised_views

    out = Path(args.out)
    if args.method:
        params = _parse_params(args.param)
        _manifest(args, {"method": args.method, "params": params}, 0, {"data": args.data},
                  {"dataset": out})
        data = load_dataset(args.data)
        save_dataset(denoise_dataset(DenoiserSpec(args.method, params), data), out)
        return
    _manifest(args, {"profile": args.profile, "beta": args.beta}, 0,
              {"data": args.data}, {"views": out / "views.npz"})
    data = load_dataset(args.data)
    cache = precompute_denoised_views(data, build_bank(args.profile), args.beta)
    cache.save(out / "views.npz")
    for j, name in enumerate(cache.names):
        view = Dataset(cache.denoised[:, j], data.labels, data.n_classes, data.sample_rate)
        save_dataset(view, out / name)
    valid = {name: int(cache.valid[:, j].sum()) for j, name in enumerate(cache.names)}
    _write_json(out / "valid_counts.json", valid)


def _train_config(args):
    from .trainer import TrainConfig

    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
        "seed": args.seed, "variant": args.variant, "bank_profile": args.profile,
    }
    return TrainConfig.from_json(args.config, **overrides)


def cmd_pretrain(args):
    from .signal import load_dataset
    from .trainer import pretrain

    cfg = _train_config(args)
    out = Path(args.out)
    _manifest(args, cfg.to_dict(), cfg.seed, {"data": args.data, "config": args.config},
              {"checkpoint": out / "checkpoint", "metrics": out / "metrics.csv"})
    data = load_dataset(args.data)
    pretrain(data, cfg, run_dir=out, cache_dir=args.cache_dir)


def _eval_config(args, mode):
    from .evaluation import EvalConfig

    data = _load_json(args.config)
    data.update({k: v for k, v in {
        "label_fraction": args.label_fraction, "epochs": args.epochs,
        "batch_size": args.batch_size, "learning_rate": args.lr, "seed": args.seed,
    }.items() if v is not None})
    data["mode"] = mode
    return EvalConfig(**data)


def _eval(args, mode):
    from .evaluation import evaluate, split_dataset
    from .signal import load_dataset

    cfg = _eval_config(args, mode)
    out = Path(args.out)
    _manifest(args, asdict(cfg), cfg.seed,
              {"checkpoint": args.checkpoint, "train": args.train, "test": args.test},
              {"metrics": out / "metrics.csv"})
    train = load_dataset(args.train)
    if args.test:
        test = load_dataset(args.test)
    else:
        train, _, test = split_dataset(train, cfg.seed)
    report = evaluate(args.checkpoint, train, test, cfg)
    report.to_csv(out / "metrics.csv")
    log.info("accuracy=%.4f weighted_f1=%.4f", report.accuracy, report.weighted_f1)


def cmd_linear_eval(args):
    _eval(args, "linear")


def cmd_finetune(args):
    _eval(args, "finetune")


def cmd_err_report(args):
    from .denoisers import build_bank
    from .evaluation import reconstruction_error_report
    from .signal import load_dataset

    out = Path(args.out)
    _manifest(args, {"profile": args.profile, "beta": args.beta}, 0,
              {"checkpoint": args.checkpoint, "data": args.data},
              {"errors": out / "errors.csv", "summary": out / "summary.json"})
    data = load_dataset(args.data)
    report = reconstruction_error_report(args.checkpoint, data, build_bank(args.profile),
                                         beta=args.beta)
    report.to_csv(out / "errors.csv")
    _write_json(out / "summary.json", report.summary())


def cmd_snr_report(args):
    from .evaluation import snr_report
    from .signal import NoiseSpec, load_dataset

    out = Path(args.out)
    _manifest(args, {"noise": args.noise}, args.seed,
              {"init": args.init, "final": args.final, "data": args.data},
              {"snr": out / "snr.csv", "summary": out / "summary.json"})
    data = load_dataset(args.data)
    report = snr_report(args.init, args.final, data, NoiseSpec.parse(args.noise, seed=args.seed))
    report.to_csv(out / "snr.csv")
    _write_json(out / "summary.json", report.summary())


def cmd_weights_report(args):
    from .denoisers import build_bank
    from .model import load_checkpoint
    from .signal import load_dataset
    from .trainer import precompute_denoised_views, refresh_weights

    out = Path(args.out)
    _manifest(args, {"profile": args.profile, "beta": args.beta}, 0,
              {"checkpoint": args.checkpoint, "data": args.data},
              {"weights": out / "weights.csv", "summary": out / "summary.json"})
    data = load_dataset(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    cache = precompute_denoised_views(data, build_bank(args.profile), args.beta)
    table = refresh_weights(model, cache)
    table.to_csv(out / "weights.csv", cache.names)
    means = table.column_means()
    _write_json(out / "summary.json",
                {name: float(v) for name, v in zip(cache.names, np.asarray(means))})


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decl", description="Denoising-aware contrastive pre-training for time series.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--len", type=int, required=True)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--noise", default="gaussian:0.3", help="kind:level[:frequency]")
    s.add_argument("--sample-rate", type=float, default=200.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("denoise", help="apply one denoiser, or a whole bank, to a dataset")
    s.add_argument("--in", "--data", dest="data", required=True)
    s.add_argument("--method", help="single denoiser; default: every denoiser of --profile")
    s.add_argument("--param", action="append", metavar="KEY=VALUE")
    s.add_argument("--profile", default="ecg", choices=["ecg", "eeg", "general"])
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("pretrain", help="self-supervised pre-training")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--variant")
    s.add_argument("--profile", choices=["ecg", "eeg", "general"])
    s.add_argument("--cache-dir")
    s.set_defaults(func=cmd_pretrain)

    for name, func in (("linear-eval", cmd_linear_eval), ("finetune", cmd_finetune)):
        s = sub.add_parser(name, help=f"{name} on a labeled dataset")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--train", "--data", dest="train", required=True)
        s.add_argument("--test", help="held-out dataset; default: stratified split of --train")
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.add_argument("--label-fraction", type=float)
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--seed", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("err-report", help="per-sample reconstruction errors of raw and denoised views")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--profile", default="ecg", choices=["ecg", "eeg", "general"])
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_err_report)

    s = sub.add_parser("snr-report", help="SNR of data, denoised data and representations")
    s.add_argument("--init", required=True, help="checkpoint at initialization")
    s.add_argument("--final", required=True, help="trained checkpoint")
    s.add_argument("--data", required=True, help="clean reference dataset")
    s.add_argument("--noise", default="gaussian:0.3")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_snr_report)

    s = sub.add_parser("weights-report", help="per-sample denoiser weights of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--profile", default="ecg", choices=["ecg", "eeg", "general"])
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_weights_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    import torch

    from .trainer import num_workers

    torch.set_num_threads(num_workers())
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"decl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
