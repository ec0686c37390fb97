"""Training orchestration: single-stage runs for the waveform models
and the two-stage residual recipe (pre-train the primary, freeze it,
train the refiner on the residual target).

Runs are deterministic given (seed, config, corpus): shuffling uses a
counter-based generator, batches accumulate gradients in index order,
and the best-validation snapshot is restored at the end.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .checkpoint import fnv1a64, parameter_hash
from .data import philox
from .models import Network, ResidualComposite
from .numerics import Adam, clip_grad_norm, mse_loss, mse_loss_grad

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainResult",
    "ResidualTrainResult",
    "TrainingDivergedError",
    "train",
    "train_residual",
    "epochs_to_threshold",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 4
    max_epochs: int = 180
    seed: int = 0
    patience: int = 20
    grad_clip: float = 5.0
    loss: str = "waveform"          # waveform | lps (lps is the spectral path)
    validation: bool = True
    run_all_epochs: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainLog:
    seed: int
    config: dict
    epochs: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def add(self, epoch, train_mse, val_mse, seconds):
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        self.epochs.append(int(epoch))
        self.train_mse.append(float(train_mse))
        self.val_mse.append(float(val_mse))
        self.seconds.append(float(seconds))

    @property
    def best_val(self) -> float:
        return min(self.val_mse)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_mse", "val_mse", "seconds"])
            for row in zip(self.epochs, self.train_mse, self.val_mse, self.seconds):
                writer.writerow([row[0], f"{row[1]:.8f}", f"{row[2]:.8f}", f"{row[3]:.3f}"])


@dataclass
class TrainResult:
    network: Network
    log: TrainLog


@dataclass
class ResidualTrainResult:
    composite: ResidualComposite
    primary_log: TrainLog
    refiner_log: TrainLog
    primary_hash_before: int
    primary_hash_after: int


def epochs_to_threshold(log: TrainLog, threshold: float):
    """First epoch whose validation MSE is <= threshold, else None."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    for epoch, val in zip(log.epochs, log.val_mse):
        if val <= threshold:
            return epoch
    return None


def validation_split(corpus, enabled: bool = True):
    """Deterministic ~10% validation split by FNV-1a of the utterance id."""
    if not enabled or len(corpus) < 2:
        return list(corpus), list(corpus)
    train_set, val_set = [], []
    for seg in corpus:
        bucket = fnv1a64(f"utt-{seg.uid}".encode()) % 10
        (val_set if bucket == 0 else train_set).append(seg)
    if not val_set:
        val_set = [train_set.pop()]
    if not train_set:
        train_set = list(val_set)
    return train_set, val_set


def _snapshot(model):
    return [(name, arr.copy()) for name, arr in model.state_arrays()]


def _restore(model, snapshot):
    for (_, arr), (_, saved) in zip(model.state_arrays(), snapshot):
        arr[...] = saved


def _mean_inference_mse(forward_fn, segments) -> float:
    total = 0.0
    for seg in segments:
        out = forward_fn(seg)
        total += mse_loss(out, seg.reference[None, :])
    return total / len(segments)


def _epoch_pass(model_forward, model_backward, parameters, optimizer, segments,
                order, cfg, target_fn):
    """One training epoch; returns the mean per-batch training loss."""
    losses = []
    for b0 in range(0, len(order), cfg.batch_size):
        batch = order[b0:b0 + cfg.batch_size]
        optimizer.zero_grad()
        batch_loss = 0.0
        for idx in batch:
            seg = segments[idx]
            target = target_fn(seg)
            out = model_forward(seg)
            loss = mse_loss(out, target)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss diverged on utterance {seg.uid} (got {loss})")
            model_backward(mse_loss_grad(out, target) / len(batch))
            batch_loss += loss
        clip_grad_norm(parameters, cfg.grad_clip)
        optimizer.step()
        losses.append(batch_loss / len(batch))
    return float(np.mean(losses))


def train(network: Network, corpus, cfg: TrainConfig) -> TrainResult:
    """Minimize waveform MSE against the peak-normalized reference."""
    if not corpus:
        raise ValueError("corpus is empty")
    if corpus[0].n_channels != network.spec.input_channels:
        raise ValueError("corpus channel count does not match the model")

    rng = philox(cfg.seed ^ 0x547261696E)
    train_set, val_set = validation_split(corpus, cfg.validation)
    params = network.parameters()
    opt = Adam(params, learning_rate=cfg.learning_rate)
    log = TrainLog(seed=cfg.seed, config=asdict(cfg))

    def fwd_train(seg):
        network.set_training(True)
        return network.forward(seg.channels)

    def fwd_eval(seg):
        network.set_training(False)
        return network.forward(seg.channels)

    target_fn = lambda seg: seg.reference[None, :]
    best_snapshot = None
    best_val = np.inf
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        train_mse = _epoch_pass(fwd_train, network.backward, params, opt,
                                train_set, order, cfg, target_fn)
        val_mse = _mean_inference_mse(fwd_eval, val_set)
        log.add(epoch, train_mse, val_mse, time.perf_counter() - t0)
        if val_mse < best_val:
            best_val = val_mse
            best_snapshot = _snapshot(network)
            since_best = 0
        else:
            since_best += 1
        if not cfg.run_all_epochs and since_best >= cfg.patience:
            break
    if best_snapshot is not None:
        _restore(network, best_snapshot)
    network.set_training(False)
    network.trained = True
    return TrainResult(network=network, log=log)


def train_residual(primary: Network, refiner: Network, corpus,
                   primary_cfg: TrainConfig, refiner_cfg: TrainConfig) -> ResidualTrainResult:
    """Stage 1 trains the primary; stage 2 freezes it and trains the
    refiner against the residual target (clean minus primary output).

    The refiner head starts zeroed, so the composite begins exactly at
    the primary's solution.  Primary outputs are cached for stage 2
    since the frozen module is deterministic in inference mode.
    """
    stage1 = train(primary, corpus, primary_cfg)
    hash_before = parameter_hash(primary)

    primary.set_training(False)
    primary_out = {}
    for seg in corpus:
        primary_out[seg.uid] = primary.forward(seg.channels)

    refiner.head.kernels.value[:] = 0.0
    refiner.head.bias.value[:] = 0.0
    composite = ResidualComposite(primary=primary, refiner=refiner)

    rng = philox(refiner_cfg.seed ^ 0x526573696475)
    train_set, val_set = validation_split(corpus, refiner_cfg.validation)
    params = refiner.parameters()
    opt = Adam(params, learning_rate=refiner_cfg.learning_rate)
    log = TrainLog(seed=refiner_cfg.seed, config=asdict(refiner_cfg))

    def fwd_train(seg):
        refiner.set_training(True)
        return refiner.forward(seg.channels, aux=primary_out[seg.uid][0])

    def composite_eval(seg):
        refiner.set_training(False)
        residual = refiner.forward(seg.channels, aux=primary_out[seg.uid][0])
        return np.clip(residual + primary_out[seg.uid], -1.0, 1.0)

    # Eq.-style residual target: refiner output regresses clean - primary
    target_fn = lambda seg: seg.reference[None, :] - primary_out[seg.uid]

    best_snapshot = _snapshot(refiner)
    best_val = _mean_inference_mse(composite_eval, val_set)
    log.add(0, best_val, best_val, 0.0)
    since_best = 0
    for epoch in range(1, refiner_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        train_mse = _epoch_pass(fwd_train, refiner.backward, params, opt,
                                train_set, order, refiner_cfg, target_fn)
        val_mse = _mean_inference_mse(composite_eval, val_set)
        log.add(epoch, train_mse, val_mse, time.perf_counter() - t0)
        if val_mse < best_val:
            best_val = val_mse
            best_snapshot = _snapshot(refiner)
            since_best = 0
        else:
            since_best += 1
        if not refiner_cfg.run_all_epochs and since_best >= refiner_cfg.patience:
            break
    _restore(refiner, best_snapshot)
    refiner.set_training(False)
    refiner.trained = True
    hash_after = parameter_hash(primary)
    if hash_after != hash_before:
        raise RuntimeError("frozen primary parameters changed during stage 2")
    return ResidualTrainResult(composite=composite, primary_log=stage1.log,
                               refiner_log=log, primary_hash_before=hash_before,
                               primary_hash_after=hash_after)
