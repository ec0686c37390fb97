"""Command-line surface: corpus generation, training, enhancement,
evaluation, first-layer analysis, and comparison grids.

Every command exits 0 on success and nonzero with a single
machine-parsable ``error: <category>: <detail>`` line on stderr
otherwise.  All outputs are deterministic given the same flags.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import experiments
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    MultichannelSegment,
    load_wav,
    load_wav_channels,
    read_corpus,
    save_wav,
    synthesize_corpus,
    write_corpus,
    TASKS,
)
from .evaluation import MetricsReport, analyze_filters, first_layer_features, stoi, mse_metric
from .models import Network, ResidualComposite
from .spectral import DdaeNetwork, ddae_enhance
from .experiments import RunSpec, parse_model_token, train_token

__all__ = ["main"]


class CliError(Exception):
    def __init__(self, category, detail):
        super().__init__(f"{category}: {detail}")
        self.category = category


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

_CONFIG_SCHEMA = {
    "task": None,
    "output_dir": None,
    "corpus": {"n_train": 50, "n_test": 10, "segment_length": 36500, "seed": 1},
    "model": {"name": "SDFCN", "channels": None, "use_channels": None,
              "primary_name": "FCN", "primary_channels": None,
              "ddae_hidden": [1024] * 5, "ddae_context": 2},
    "train": {"learning_rate": 0.001, "batch_size": 4, "max_epochs": 180,
              "patience": 20, "seed": 1, "run_all_epochs": False,
              "primary_epochs": None},
    "eval": {"metrics": ["stoi", "mse"]},
}


def _merge_section(name, defaults, given):
    if given is None:
        return dict(defaults)
    if not isinstance(given, dict):
        raise CliError("config", f"section {name!r} must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise CliError("config", f"unknown keys in {name!r}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(given)
    return merged


def load_experiment_config(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("config", f"no such config file: {path}")
    except yaml.YAMLError as exc:
        raise CliError("config", f"malformed YAML: {exc}")
    if not isinstance(raw, dict):
        raise CliError("config", "top level must be a mapping")
    unknown = set(raw) - set(_CONFIG_SCHEMA)
    if unknown:
        raise CliError("config", f"unknown top-level keys: {sorted(unknown)}")
    if "task" not in raw or raw["task"] not in TASKS:
        raise CliError("config", f"task must be one of {TASKS}")
    if "output_dir" not in raw:
        raise CliError("config", "output_dir is required")
    cfg = {"task": raw["task"], "output_dir": str(raw["output_dir"])}
    for section in ("corpus", "model", "train", "eval"):
        cfg[section] = _merge_section(section, _CONFIG_SCHEMA[section],
                                      raw.get(section))
    return cfg


def _echo_config(cfg: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    if args.task not in TASKS:
        raise CliError("usage", f"task must be one of {TASKS}")
    segments = synthesize_corpus(args.task, args.n, args.seed, args.segment_length)
    manifest = write_corpus(segments, args.out)
    print(f"wrote {len(segments)} utterances to {manifest}")


def _spec_from_config(cfg: dict) -> RunSpec:
    model = cfg["model"]
    token = model["name"]
    if model["use_channels"] is not None:
        token += "@" + ",".join(str(c) for c in model["use_channels"])
    train = cfg["train"]
    return RunSpec(task=cfg["task"], model_token=token, seed=train["seed"],
                   n_train=cfg["corpus"]["n_train"], n_test=cfg["corpus"]["n_test"],
                   segment_length=cfg["corpus"]["segment_length"],
                   channels=model["channels"],
                   epochs=train["max_epochs"], batch_size=train["batch_size"],
                   learning_rate=train["learning_rate"], patience=train["patience"],
                   run_all_epochs=train["run_all_epochs"],
                   primary_name=model["primary_name"],
                   primary_channels=model["primary_channels"],
                   primary_epochs=train["primary_epochs"],
                   ddae_hidden=tuple(model["ddae_hidden"]),
                   ddae_context=model["ddae_context"])


def cmd_train(args):
    cfg = load_experiment_config(args.config)
    out_dir = Path(cfg["output_dir"])
    _echo_config(cfg, out_dir)
    spec = _spec_from_config(cfg)
    corpus = synthesize_corpus(cfg["task"], cfg["corpus"]["n_train"],
                               cfg["corpus"]["seed"], cfg["corpus"]["segment_length"])
    _, subset = parse_model_token(spec.model_token)
    if subset is not None:
        corpus = [s.select_channels(subset) for s in corpus]
    model, log, extra, _ = train_token(spec, corpus)
    ck = out_dir / "model.wmse"
    save_checkpoint(model, ck)
    log.write_csv(out_dir / "trainlog.csv")
    print(f"checkpoint {ck} best_val_mse {log.best_val:.6f}")


def _model_input_channels(model) -> int:
    if isinstance(model, ResidualComposite):
        return model.primary.spec.input_channels
    if isinstance(model, Network):
        return model.spec.input_channels
    return model.spec.input_channels        # DdaeNetwork


def _enhance_with(model, channels: np.ndarray) -> np.ndarray:
    from .models import forward, forward_residual

    if isinstance(model, ResidualComposite):
        return forward_residual(model, channels)[0]
    if isinstance(model, Network):
        return forward(model, channels)[0]
    segment = MultichannelSegment(channels=channels,
                                  reference=np.zeros(channels.shape[1]))
    return ddae_enhance(model, segment)


def cmd_enhance(args):
    model = _load_checkpoint_or_die(args.checkpoint)
    channels = []
    for path in args.inputs:
        try:
            channels.extend(w.samples for w in load_wav_channels(path))
        except ValueError as exc:
            raise CliError("input", str(exc))
    lengths = {len(c) for c in channels}
    if len(lengths) != 1:
        raise CliError("input", "input channels have differing lengths")
    x = np.stack(channels)
    expected = _model_input_channels(model)
    if x.shape[0] != expected:
        raise CliError("channel-mismatch",
                       f"checkpoint expects {expected} channels, got {x.shape[0]}")
    peaks = np.max(np.abs(x), axis=1, keepdims=True)
    peaks[peaks == 0] = 1.0
    out = _enhance_with(model, x / peaks)
    save_wav(args.out, out, encoding="float32")
    print(f"wrote {args.out}")


def _load_checkpoint_or_die(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("checkpoint", f"no such file: {path}")
    except ValueError as exc:
        raise CliError("checkpoint", str(exc))


def cmd_evaluate(args):
    model = _load_checkpoint_or_die(args.checkpoint)
    try:
        segments = read_corpus(args.corpus)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError("corpus", str(exc))
    expected = _model_input_channels(model)
    report = MetricsReport(model_id=str(args.checkpoint),
                           corpus_id=str(args.corpus), seed=0)
    for seg in segments:
        if seg.n_channels != expected:
            raise CliError("channel-mismatch",
                           f"checkpoint expects {expected} channels, corpus has "
                           f"{seg.n_channels}")
        out = _enhance_with(model, seg.channels)
        peak = np.max(np.abs(out))
        normalized = out / peak if peak > 0 else out
        report.add(seg.uid, stoi(seg.reference, normalized),
                   mse_metric(seg.reference, np.clip(out, -1, 1)))
    report.write_csv(args.out)
    print(f"mean_stoi {report.mean_stoi:.4f} mean_mse {report.mean_mse:.6f}")


def cmd_analyze(args):
    model = _load_checkpoint_or_die(args.checkpoint)
    if isinstance(model, ResidualComposite):
        model = model.refiner
    if isinstance(model, DdaeNetwork):
        raise CliError("usage", "first-layer analysis applies to waveform models")
    out_dir = Path(args.out)
    if args.what == "filters":
        rows = analyze_filters(model, out_dir=out_dir)
        print(f"wrote {len(rows)} filter rows to {out_dir}")
    else:
        if args.wav is None:
            raise CliError("usage", "--wav is required for feature analysis")
        try:
            wave = load_wav(args.wav)
        except ValueError as exc:
            raise CliError("input", str(exc))
        image = first_layer_features(model, wave, out_dir=out_dir)
        print(f"wrote {image.shape[0]}x{image.shape[1]} feature image to {out_dir}")


def cmd_compare(args):
    tokens = [t.strip() for t in args.models.split(",") if t.strip()]
    if not tokens:
        raise CliError("usage", "no model tokens given")
    seeds = list(range(1, args.seeds + 1))
    results = experiments.compare(
        args.task, tokens, seeds,
        n_train=args.n_train, n_test=args.n_test,
        segment_length=args.segment_length, epochs=args.epochs,
        batch_size=args.batch_size,
        primary_name=args.primary_name,
        primary_channels=args.primary_channels,
        primary_epochs=args.primary_epochs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    by_token = {t: [] for t in tokens}
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "seed", "mean_stoi", "mean_mse", "best_val_mse"])
        for r in results:
            writer.writerow([r.model_token, r.seed, f"{r.mean_stoi:.6f}",
                             f"{r.mean_mse:.8f}", f"{r.best_val_mse:.8f}"])
            by_token[r.model_token].append(r)
        for token in tokens:
            rs = by_token[token]
            writer.writerow([token, "mean",
                             f"{np.mean([r.mean_stoi for r in rs]):.6f}",
                             f"{np.mean([r.mean_mse for r in rs]):.8f}",
                             f"{np.mean([r.best_val_mse for r in rs]):.8f}"])
    print(f"wrote {out}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmse",
        description="waveform-mapping multichannel speech enhancement")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a corpus to disk")
    g.add_argument("--task", required=True, choices=TASKS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--segment-length", type=int, default=36500)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model from a YAML config")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("enhance", help="enhance WAV input with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--in", dest="inputs", nargs="+", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_enhance)

    v = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--corpus", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("analyze", help="first-layer filter/feature exports")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--what", choices=("filters", "features"), required=True)
    a.add_argument("--wav")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_analyze)

    c = sub.add_parser("compare", help="train and score a model grid")
    c.add_argument("--task", required=True, choices=TASKS)
    c.add_argument("--models", required=True,
                   help="comma-separated tokens, e.g. SDFCN,SDFCN@0,rSDFCN,DDAE")
    c.add_argument("--seeds", type=int, default=3)
    c.add_argument("--n-train", type=int, default=50)
    c.add_argument("--n-test", type=int, default=10)
    c.add_argument("--segment-length", type=int, default=16000)
    c.add_argument("--epochs", type=int, default=20)
    c.add_argument("--batch-size", type=int, default=2)
    c.add_argument("--primary-name", default="FCN")
    c.add_argument("--primary-channels", type=int, default=None)
    c.add_argument("--primary-epochs", type=int, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # keep the one-line contract for unexpected failures
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
