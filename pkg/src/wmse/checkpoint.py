"""Binary checkpoints: magic "WMSE", u32 version, canonical JSON spec,
float32 parameter blobs in declaration order, trailing 64-bit FNV-1a
checksum over everything before it.

Training runs in float64; checkpoints quantize to float32, which keeps
the inference round-trip within 1e-6 on bounded outputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import ModelSpec, Network, ResidualComposite, instantiate

__all__ = ["save_checkpoint", "load_checkpoint", "fnv1a64", "parameter_hash",
           "ChecksumError"]

MAGIC = b"WMSE"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class ChecksumError(ValueError):
    pass


def fnv1a64(data: bytes, state: int = _FNV_OFFSET) -> int:
    h = state
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def parameter_hash(model) -> int:
    """FNV-1a over every state array's raw bytes, in declaration order."""
    h = _FNV_OFFSET
    for name, arr in model.state_arrays():
        h = fnv1a64(name.encode(), h)
        h = fnv1a64(np.ascontiguousarray(arr, dtype=np.float64).tobytes(), h)
    return h


def _payload_for(model) -> dict:
    if isinstance(model, ResidualComposite):
        return {"kind": "composite",
                "primary": model.primary.spec.to_dict(),
                "refiner": model.refiner.spec.to_dict(),
                "trained": model.primary.trained}
    if isinstance(model, Network):
        return {"kind": "network", "spec": model.spec.to_dict(),
                "trained": model.trained}
    if hasattr(model, "ddae_spec_dict"):
        return {"kind": "ddae", "spec": model.ddae_spec_dict(),
                "trained": getattr(model, "trained", False)}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, path) -> Path:
    path = Path(path)
    spec_bytes = json.dumps(_payload_for(model), sort_keys=True,
                            separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(spec_bytes)), spec_bytes]
    arrays = model.state_arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        name_b = name.encode()
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr32.ndim))
        parts.append(struct.pack(f"<{max(arr32.ndim, 1)}I",
                                 *(arr32.shape or (arr32.size,))))
        parts.append(arr32.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", fnv1a64(body)))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    """Rebuild the model; raises ChecksumError on corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a WMSE checkpoint")
    body, stored = raw[:-8], struct.unpack("<Q", raw[-8:])[0]
    if fnv1a64(body) != stored:
        raise ChecksumError(f"checksum mismatch in {path}")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    payload = json.loads(r.take(r.u32()).decode())

    if payload["kind"] == "network":
        model = instantiate(ModelSpec.from_dict(payload["spec"]), seed=0)
        model.trained = payload.get("trained", False)
    elif payload["kind"] == "composite":
        primary = instantiate(ModelSpec.from_dict(payload["primary"]), seed=0)
        refiner = instantiate(ModelSpec.from_dict(payload["refiner"]), seed=0)
        primary.trained = payload.get("trained", True)
        model = ResidualComposite(primary=primary, refiner=refiner)
    elif payload["kind"] == "ddae":
        from .spectral import DdaeNetwork, DdaeSpec

        model = DdaeNetwork(DdaeSpec.from_dict(payload["spec"]), seed=0)
        model.trained = payload.get("trained", False)
    else:
        raise ValueError(f"unknown checkpoint kind {payload['kind']!r}")

    n_arrays = r.u32()
    stored_arrays = {}
    for _ in range(n_arrays):
        name = r.take(r.u16()).decode()
        ndim = r.u8()
        shape = struct.unpack(f"<{max(ndim, 1)}I", r.take(4 * max(ndim, 1)))
        if ndim == 0:
            shape = ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        stored_arrays[name] = data

    targets = model.state_arrays()
    if len(targets) != len(stored_arrays):
        raise ValueError("checkpoint array count does not match the model spec")
    for name, arr in targets:
        if name not in stored_arrays:
            raise ValueError(f"checkpoint is missing array {name!r}")
        stored = stored_arrays[name]
        if tuple(stored.shape) != tuple(arr.shape):
            raise ValueError(f"shape mismatch for {name!r}")
        arr[...] = stored.astype(np.float64)
    return model
