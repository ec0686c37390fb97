"""Network assembly: the named architectures (FCN, FCN-55, DCN-54,
FCN-251, SincFCN-251, DFCN, SDFCN) behind one declarative ModelSpec,
plus the residual composite used for two-stage training.

Every model maps an (N, L) multichannel segment to a single-channel
waveform of the same length, bounded by a tanh head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    DilatedBlockSpec,
    SincConvLayer,
    build_conv_block,
    build_dilated_block,
)
from .numerics import BatchNorm, ConvLayer, LeakyReLU, Module, Sequential, Tanh

__all__ = [
    "ModelSpec",
    "Network",
    "ResidualComposite",
    "NAMED_MODELS",
    "build_named_model",
    "instantiate",
    "forward",
    "forward_residual",
    "parameter_census",
]

NAMED_MODELS = ("FCN", "FCN-55", "DCN-54", "FCN-251", "SincFCN-251", "DFCN", "SDFCN")

_DFCN_PLAIN_KERNEL = 3
_HEAD_KERNEL = 55


@dataclass
class ModelSpec:
    """Declarative description of a network; JSON-friendly."""

    name: str
    input_channels: int
    channels: int = 30
    front_end: dict | None = None          # {"kind": "sinc"|"conv", "kernel": int}
    trunk: list = field(default_factory=list)
    skip_to_dilated: bool = False          # concat trunk input onto later dilated blocks
    head_kernel: int = _HEAD_KERNEL
    aux_input: bool = False                # one extra channel joins after the front end

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_channels": self.input_channels,
            "channels": self.channels,
            "front_end": self.front_end,
            "trunk": self.trunk,
            "skip_to_dilated": self.skip_to_dilated,
            "head_kernel": self.head_kernel,
            "aux_input": self.aux_input,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _fcn_family_trunk(n_blocks: int, kernel: int, first_kernel=None, sinc_first=False):
    trunk = []
    for i in range(n_blocks):
        entry = {"kind": "conv_block", "kernel": kernel}
        if i == 0 and first_kernel is not None:
            entry["kernel"] = first_kernel
        if i == 0 and sinc_first:
            entry["sinc"] = True
        trunk.append(entry)
    return trunk


def _dfcn_trunk():
    block = {"kind": "dilated_block", "kernels": [2, 3, 3, 3], "dilations": [1, 2, 6, 18]}
    plain = {"kind": "conv", "kernel": _DFCN_PLAIN_KERNEL, "dilation": 1}
    trunk = []
    for _ in range(4):
        trunk.append(dict(block))
        trunk.append(dict(plain))
    return trunk


def build_named_model(name: str, input_channels: int, channels: int | None = None) -> ModelSpec:
    """ModelSpec for one of the named architectures.

    `channels` overrides the hidden width (FCN defaults to 64, the
    preliminary-model family to 30).
    """
    if input_channels < 1:
        raise ValueError("input_channels must be >= 1")
    if name == "FCN":
        ch = 64 if channels is None else channels
        return ModelSpec(name=name, input_channels=input_channels, channels=ch,
                         trunk=_fcn_family_trunk(7, 55))
    ch = 30 if channels is None else channels
    if name == "FCN-55":
        return ModelSpec(name=name, input_channels=input_channels, channels=ch,
                         trunk=_fcn_family_trunk(4, 55))
    if name == "DCN-54":
        trunk = [{"kind": "conv_block", "kernel": 55},
                 {"kind": "dilated_block", "kernels": [2, 3, 3, 3], "dilations": [1, 2, 6, 18]}]
        return ModelSpec(name=name, input_channels=input_channels, channels=ch, trunk=trunk)
    if name == "FCN-251":
        return ModelSpec(name=name, input_channels=input_channels, channels=ch,
                         trunk=_fcn_family_trunk(4, 55, first_kernel=251))
    if name == "SincFCN-251":
        return ModelSpec(name=name, input_channels=input_channels, channels=ch,
                         trunk=_fcn_family_trunk(4, 55, first_kernel=251, sinc_first=True))
    if name == "DFCN":
        return ModelSpec(name=name, input_channels=input_channels, channels=ch,
                         front_end={"kind": "conv", "kernel": 251},
                         trunk=_dfcn_trunk(), skip_to_dilated=True)
    if name == "SDFCN":
        return ModelSpec(name=name, input_channels=input_channels, channels=ch,
                         front_end={"kind": "sinc", "kernel": 251},
                         trunk=_dfcn_trunk(), skip_to_dilated=True)
    raise ValueError(f"unknown model name {name!r} (expected one of {NAMED_MODELS})")


class Network(Module):
    """An instantiated ModelSpec: stages, skip wiring, tanh head."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.trained = False
        rng = np.random.Generator(np.random.Philox(key=seed))
        ch = spec.channels

        self.front = None
        current = spec.input_channels
        if spec.front_end is not None:
            kind = spec.front_end["kind"]
            kernel = spec.front_end["kernel"]
            if kind == "sinc":
                self.front = SincConvLayer(current, ch, kernel, name="front.sinc")
            elif kind == "conv":
                self.front = ConvLayer(current, ch, kernel, rng=rng, name="front.conv")
            else:
                raise ValueError(f"unknown front end kind {kind!r}")
            current = ch
        if spec.aux_input:
            current += 1
        self._trunk_in_channels = current

        self.stages = []
        self._stage_is_dilated = []
        for i, entry in enumerate(spec.trunk):
            kind = entry["kind"]
            if kind == "conv_block":
                if entry.get("sinc"):
                    stage = Sequential([
                        SincConvLayer(current, ch, entry["kernel"], name=f"t{i}.sinc"),
                        BatchNorm(ch, name=f"t{i}.bn"),
                        LeakyReLU(0.3),
                    ])
                else:
                    stage = build_conv_block(entry["kernel"], ch, in_channels=current,
                                             rng=rng, name=f"t{i}")
                self._stage_is_dilated.append(False)
            elif kind == "dilated_block":
                block_spec = DilatedBlockSpec(kernel_sizes=list(entry["kernels"]),
                                              dilations=list(entry["dilations"]),
                                              channels=ch)
                takes_skip = spec.skip_to_dilated and i > 0
                in_ch = current + (self._trunk_in_channels if takes_skip else 0)
                stage = build_dilated_block(block_spec, in_channels=in_ch, rng=rng,
                                            name=f"t{i}")
                self._stage_is_dilated.append(takes_skip)
            elif kind == "conv":
                stage = ConvLayer(current, ch, entry["kernel"],
                                  dilation=entry.get("dilation", 1), rng=rng,
                                  name=f"t{i}.conv")
                self._stage_is_dilated.append(False)
            else:
                raise ValueError(f"unknown trunk entry kind {kind!r}")
            self.stages.append(stage)
            current = ch

        self.head = ConvLayer(current, 1, spec.head_kernel, rng=rng, name="head.conv")
        self.tanh = Tanh()
        self.set_input_grad(False)

    # -- plumbing -----------------------------------------------------------

    def _modules(self):
        mods = []
        if self.front is not None:
            mods.append(self.front)
        mods.extend(self.stages)
        mods.append(self.head)
        mods.append(self.tanh)
        return mods

    def iter_modules(self):
        yield self
        for m in self._modules():
            yield from m.iter_modules()

    def parameters(self):
        return [p for m in self._modules() for p in m.parameters()]

    def state_arrays(self):
        return [pair for m in self._modules() for pair in m.state_arrays()]

    def set_training(self, flag):
        self.training = flag
        for m in self._modules():
            m.set_training(flag)

    def set_input_grad(self, flag: bool):
        """Whether backward propagates gradients to the network input."""
        self._input_grad = flag
        first = self.front if self.front is not None else self.stages[0]
        while isinstance(first, Sequential):
            first = first.layers[0]
        first.need_input_grad = flag

    # -- forward / backward -------------------------------------------------

    def forward(self, x, aux=None):
        if x.shape[0] != self.spec.input_channels:
            raise ValueError(
                f"model {self.spec.name!r} expects {self.spec.input_channels} "
                f"channels, got {x.shape[0]}")
        if (aux is None) == self.spec.aux_input:
            raise ValueError("aux channel presence must match the spec")
        if self.front is not None:
            x = self.front.forward(x)
        if aux is not None:
            x = np.concatenate([x, np.atleast_2d(aux)], axis=0)
        base = x
        self._base_channels = base.shape[0]
        for stage, takes_skip in zip(self.stages, self._stage_is_dilated):
            if takes_skip:
                x = stage.forward(np.concatenate([x, base], axis=0))
            else:
                x = stage.forward(x)
        x = self.head.forward(x)
        return self.tanh.forward(x)

    def backward(self, grad):
        """Returns d/d input (or None) and, for aux models, stashes
        d/d aux in self.aux_grad."""
        grad = self.tanh.backward(grad)
        grad = self.head.backward(grad)
        base_grad = None
        for stage, takes_skip in zip(reversed(self.stages),
                                     reversed(self._stage_is_dilated)):
            grad = stage.backward(grad)
            if takes_skip:
                skip_part = grad[-self._base_channels:]
                base_grad = skip_part.copy() if base_grad is None else base_grad + skip_part
                grad = grad[:-self._base_channels]
        if base_grad is not None:
            grad = grad + base_grad
        self.aux_grad = None
        if self.spec.aux_input:
            self.aux_grad = grad[-1:].copy()
            grad = grad[:-1]
        if self.front is not None:
            grad = self.front.backward(grad)
        return grad


@dataclass
class ResidualComposite:
    """A frozen, pre-trained primary plus an additive refiner.

    The refiner sees the input through its own front end with the
    primary's output concatenated as one extra feature channel; the
    composite output is refiner(Y, primary(Y)) + primary(Y), clamped
    to [-1, 1] so it stays writable as normalized PCM.
    """

    primary: Network
    refiner: Network

    def __post_init__(self):
        if not self.refiner.spec.aux_input:
            raise ValueError("refiner spec must take an aux channel")

    def forward_parts(self, x):
        if not self.primary.trained:
            raise RuntimeError("primary module is not marked trained")
        prior_mode = self.primary.training
        self.primary.set_training(False)
        fpr = self.primary.forward(x)
        self.primary.set_training(prior_mode)
        residual = self.refiner.forward(x, aux=fpr[0])
        return fpr, residual

    def forward(self, x, clamp=True):
        fpr, residual = self.forward_parts(x)
        out = residual + fpr
        return np.clip(out, -1.0, 1.0) if clamp else out

    def backward(self, grad):
        """Backward of the unclamped composite; primary grads are
        computed but its parameters are owned by the freeze contract."""
        d_in_refiner = self.refiner.backward(grad)
        aux_grad = self.refiner.aux_grad
        d_primary_out = grad + (aux_grad if aux_grad is not None else 0.0)
        d_in_primary = self.primary.backward(d_primary_out)
        if d_in_refiner is None or d_in_primary is None:
            return None
        return d_in_refiner + d_in_primary

    def parameters(self):
        return self.refiner.parameters()

    def state_arrays(self):
        return ([(f"primary.{n}", a) for n, a in self.primary.state_arrays()]
                + [(f"refiner.{n}", a) for n, a in self.refiner.state_arrays()])

    def set_training(self, flag):
        self.refiner.set_training(flag)

    def zero_grad(self):
        for p in self.refiner.parameters() + self.primary.parameters():
            p.zero_grad()


def instantiate(spec: ModelSpec, seed: int = 0) -> Network:
    return Network(spec, seed=seed)


def forward(network: Network, segment_channels: np.ndarray) -> np.ndarray:
    """Inference-mode enhancement of an (N, L) segment -> (1, L) waveform."""
    x = np.atleast_2d(np.asarray(segment_channels, dtype=np.float64))
    if np.max(np.abs(x), initial=0.0) > 1.0 + 1e-9:
        raise ValueError("input samples must lie in [-1, 1]; peak-normalize first")
    prior = network.training
    network.set_training(False)
    try:
        return network.forward(x)
    finally:
        network.set_training(prior)


def forward_residual(composite: ResidualComposite, segment_channels: np.ndarray) -> np.ndarray:
    """Inference-mode residual enhancement, clamped to [-1, 1]."""
    x = np.atleast_2d(np.asarray(segment_channels, dtype=np.float64))
    prior = composite.refiner.training
    composite.refiner.set_training(False)
    try:
        return composite.forward(x, clamp=True)
    finally:
        composite.refiner.set_training(prior)


def parameter_census(model) -> list[dict]:
    """Per-parameter counts; sinc layers report their two reals per slice."""
    rows = []
    for p in model.parameters():
        rows.append({"name": p.name, "shape": tuple(p.value.shape), "count": p.size})
    rows.append({"name": "total", "shape": (), "count": sum(r["count"] for r in rows)})
    return rows
