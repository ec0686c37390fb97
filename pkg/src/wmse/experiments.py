"""End-to-end experiment pipelines: train one model token on one task
and score it, or fan a comparison grid out across (model, seed) pairs.

Model tokens name an architecture plus an optional channel subset,
e.g. ``SDFCN`` (all channels), ``SDFCN@0`` (first channel only),
``rSDFCN@1,2`` (residual composite on channels 1 and 2), ``DDAE``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import fnv1a64
from .data import synthesize_corpus
from .evaluation import mse_metric, stoi
from .models import (
    NAMED_MODELS,
    ResidualComposite,
    build_named_model,
    forward,
    forward_residual,
    instantiate,
)
from .spectral import DdaeNetwork, DdaeSpec, ddae_enhance, ddae_lps_mse, train_ddae
from .training import TrainConfig, train, train_residual

__all__ = ["RunSpec", "RunResult", "parse_model_token", "run_single", "compare",
           "worker_count"]

TEST_SEED_OFFSET = 5000


def worker_count() -> int:
    """Worker cap from WMSE_THREADS (defaults to 1)."""
    try:
        return max(1, int(os.environ.get("WMSE_THREADS", "1")))
    except ValueError:
        return 1


def parse_model_token(token: str):
    """'NAME' or 'NAME@c0,c1,...' -> (name, channel indices or None)."""
    if "@" in token:
        name, _, subset = token.partition("@")
        channels = tuple(int(c) for c in subset.split(",") if c != "")
        if not channels:
            raise ValueError(f"empty channel subset in {token!r}")
        return name, channels
    return token, None


@dataclass
class RunSpec:
    task: str
    model_token: str
    seed: int
    n_train: int = 50
    n_test: int = 10
    segment_length: int = 16000
    channels: int | None = None          # hidden width override
    epochs: int = 20
    batch_size: int = 2
    learning_rate: float = 0.001
    patience: int = 20
    run_all_epochs: bool = True
    primary_name: str = "FCN"            # rSDFCN stage-1 architecture
    primary_channels: int | None = None
    primary_epochs: int | None = None    # defaults to `epochs`
    ddae_hidden: tuple = (1024,) * 5
    ddae_context: int = 2

    def model_seed(self) -> int:
        return (self.seed * 131 + fnv1a64(self.model_token.encode()) % 9973) & 0x7FFFFFFF


@dataclass
class RunResult:
    task: str
    model_token: str
    seed: int
    mean_stoi: float
    mean_mse: float
    best_val_mse: float
    per_utterance: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    model: object = None
    log: object = None


def _corpora(spec: RunSpec):
    train_c = synthesize_corpus(spec.task, spec.n_train, spec.seed,
                                spec.segment_length)
    test_c = synthesize_corpus(spec.task, spec.n_test, spec.seed + TEST_SEED_OFFSET,
                               spec.segment_length)
    _, subset = parse_model_token(spec.model_token)
    if subset is not None:
        train_c = [s.select_channels(subset) for s in train_c]
        test_c = [s.select_channels(subset) for s in test_c]
    return train_c, test_c


def _train_config(spec: RunSpec, epochs=None, seed_salt=0) -> TrainConfig:
    return TrainConfig(learning_rate=spec.learning_rate,
                       batch_size=spec.batch_size,
                       max_epochs=epochs if epochs is not None else spec.epochs,
                       seed=spec.model_seed() + seed_salt,
                       patience=spec.patience,
                       run_all_epochs=spec.run_all_epochs)


def _score(enhance_fn, test_c, spec: RunSpec) -> RunResult:
    per_utt = []
    for seg in test_c:
        out = enhance_fn(seg)
        peak = np.max(np.abs(out))
        normalized = out / peak if peak > 0 else out
        per_utt.append((seg.uid,
                        stoi(seg.reference, normalized),
                        mse_metric(seg.reference, np.clip(out, -1, 1))))
    return RunResult(task=spec.task, model_token=spec.model_token, seed=spec.seed,
                     mean_stoi=float(np.mean([r[1] for r in per_utt])),
                     mean_mse=float(np.mean([r[2] for r in per_utt])),
                     best_val_mse=np.nan, per_utterance=per_utt)


def train_token(spec: RunSpec, train_c):
    """Train the token's model on a prepared corpus.

    Returns (model, log, extra, enhance_fn); enhance_fn maps a segment
    to a single-channel output waveform.
    """
    name, _ = parse_model_token(spec.model_token)
    n_ch = train_c[0].n_channels

    if name == "DDAE":
        ddae_spec = DdaeSpec(input_channels=n_ch, hidden_sizes=list(spec.ddae_hidden),
                             context=spec.ddae_context)
        net = DdaeNetwork(ddae_spec, seed=spec.model_seed())
        log = train_ddae(net, train_c, _train_config(spec))
        return net, log, {}, lambda seg: ddae_enhance(net, seg)

    if name == "rSDFCN":
        primary_spec = build_named_model(spec.primary_name, n_ch,
                                         channels=spec.primary_channels)
        primary = instantiate(primary_spec, seed=spec.model_seed())
        refiner_spec = build_named_model("SDFCN", n_ch, channels=spec.channels)
        refiner_spec.aux_input = True
        refiner = instantiate(refiner_spec, seed=spec.model_seed() + 1)
        res = train_residual(primary, refiner, train_c,
                             _train_config(spec, epochs=spec.primary_epochs),
                             _train_config(spec, seed_salt=1))
        composite = res.composite
        extra = {"primary_val_mse": res.primary_log.best_val,
                 "composite_val_mse": res.refiner_log.best_val,
                 "composite_val_start": res.refiner_log.val_mse[0],
                 "primary_hash_constant":
                     res.primary_hash_before == res.primary_hash_after}
        return (composite, res.refiner_log, extra,
                lambda seg: forward_residual(composite, seg.channels)[0])

    if name not in NAMED_MODELS:
        raise ValueError(f"unknown model token {spec.model_token!r}")
    net = instantiate(build_named_model(name, n_ch, channels=spec.channels),
                      seed=spec.model_seed())
    train_result = train(net, train_c, _train_config(spec))
    return (net, train_result.log, {},
            lambda seg: forward(net, seg.channels)[0])


def run_single(spec: RunSpec) -> RunResult:
    """Train the token's model on the task corpus and score the test set."""
    name, _ = parse_model_token(spec.model_token)
    train_c, test_c = _corpora(spec)
    model, log, extra, enhance_fn = train_token(spec, train_c)
    result = _score(enhance_fn, test_c, spec)
    if name == "DDAE":
        lps_pairs = [ddae_lps_mse(model, seg) for seg in test_c]
        extra = dict(extra,
                     lps_mse_enhanced=float(np.mean([p[0] for p in lps_pairs])),
                     lps_mse_noisy=float(np.mean([p[1] for p in lps_pairs])))
    result.extra = extra
    result.best_val_mse = log.best_val
    result.model, result.log = model, log
    return result


def _run_single_shim(spec: RunSpec) -> RunResult:
    result = run_single(spec)
    result.model = None          # keep fan-out results picklable and small
    return result


def compare(task: str, model_tokens, seeds, keep_models: bool = False,
            **spec_overrides) -> list[RunResult]:
    """One run per (model token, seed); fans out across processes when
    WMSE_THREADS allows it."""
    specs = [RunSpec(task=task, model_token=token, seed=seed, **spec_overrides)
             for token in model_tokens for seed in seeds]
    workers = min(worker_count(), len(specs))
    if workers <= 1 or keep_models:
        return [run_single(s) if keep_models else _run_single_shim(s) for s in specs]
    import concurrent.futures as cf

    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_single_shim, specs))
