"""Parameter store, exact gradients, AdamW with warmup/cosine schedule,
and a bit-exact binary checkpoint format.

Frozen tensors never receive updates; a full run leaves them bitwise
unchanged.  All arithmetic is float64 and single-threaded per batch, so
identical seeds give identical trajectories.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, NumericError, ValidationError

_MAGIC = b"MLAB0001"


@dataclass
class Param:
    name: str
    value: np.ndarray
    trainable: bool


class ParamStore:
    """Named float64 tensors with trainable flags."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool) -> None:
        if name in self._params:
            raise ConfigError(f"duplicate parameter {name!r}")
        self._params[name] = Param(name, np.asarray(value, dtype=np.float64),
                                   bool(trainable))

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].trainable = bool(flag)

    def freeze_all(self) -> None:
        for p in self._params.values():
            p.trainable = False

    def num_trainable(self) -> int:
        return sum(p.value.size for p in self._params.values() if p.trainable)

    def bind(self) -> dict[str, Tensor]:
        """Leaf tensors over the current values; trainables track gradients."""
        return {n: Tensor(p.value, requires_grad=p.trainable)
                for n, p in self._params.items()}

    def signature(self, names=None) -> bytes:
        """Byte-exact fingerprint, for freeze-integrity checks."""
        names = sorted(names if names is not None else self._params)
        return b"".join(self._params[n].value.tobytes() for n in names)


def compute_gradients(loss_fn, store: ParamStore):
    """Reverse-accumulate d(loss)/d(theta) for every trainable tensor.

    ``loss_fn`` receives the bound name->Tensor map and returns a scalar
    Tensor.  Returns (loss value, name->gradient dict); parameters the
    loss never touched get zero gradients.
    """
    leaves = store.bind()
    loss = loss_fn(leaves)
    loss.backward()
    grads = {}
    for name in store.trainable_names():
        g = leaves[name].grad
        if g is None:
            g = np.zeros_like(store[name].value)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    return float(loss.data), grads


@dataclass
class OptimConfig:
    lr: float = 5e-4
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    warmup_epochs: int = 10


@dataclass
class OptimState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay."""

    def __init__(self, store: ParamStore, config: OptimConfig):
        self.store = store
        self.config = config
        self.state = OptimState()
        for name in store.trainable_names():
            self.state.m[name] = np.zeros_like(store[name].value)
            self.state.v[name] = np.zeros_like(store[name].value)

    def learning_rate(self, epoch: int) -> float:
        """Linear warmup for the first warmup_epochs, cosine decay to zero."""
        c = self.config
        if epoch < c.warmup_epochs:
            return c.lr * (epoch + 1) / c.warmup_epochs
        span = max(c.epochs - c.warmup_epochs, 1)
        progress = (epoch - c.warmup_epochs) / span
        return c.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, grads: dict[str, np.ndarray], epoch: int) -> None:
        c = self.config
        lr_t = self.learning_rate(epoch)
        self.state.step_count += 1
        t = self.state.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, g in grads.items():
            p = self.store[name]
            if not p.trainable:
                raise ValidationError(f"gradient supplied for frozen {name!r}")
            m = self.state.m[name]
            v = self.state.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            # decoupled decay acts on the weights directly, not the moments
            p.value -= lr_t * c.weight_decay * p.value
            p.value -= lr_t * update


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(path, store: ParamStore, optimizer: AdamW | None = None,
                    extra: dict | None = None) -> None:
    """Flat binary container: JSON header + contiguous float64 payload."""
    entries = []
    blobs = []
    for name in store.names():
        p = store[name]
        entries.append({"name": name, "shape": list(p.value.shape),
                        "trainable": p.trainable, "kind": "param"})
        blobs.append(np.ascontiguousarray(p.value).tobytes())
    opt_extra = None
    if optimizer is not None:
        for slot in ("m", "v"):
            for name, arr in getattr(optimizer.state, slot).items():
                entries.append({"name": f"{slot}:{name}",
                                "shape": list(arr.shape),
                                "trainable": False, "kind": f"opt_{slot}"})
                blobs.append(np.ascontiguousarray(arr).tobytes())
        opt_extra = {"step_count": optimizer.state.step_count}
    header = json.dumps({"tensors": entries, "optimizer": opt_extra,
                         "extra": extra or {}}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path, store: ParamStore, optimizer: AdamW | None = None) -> dict:
    """Restore values (and optimizer state) in place; returns the extras."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValidationError(f"not a checkpoint file: {path}")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + hlen].decode())
    offset = 16 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        arr = arr.reshape(shape).copy()
        offset += size * 8
        name, kind = entry["name"], entry["kind"]
        if kind == "param":
            if name not in store:
                raise ValidationError(f"checkpoint tensor {name!r} unknown")
            if store[name].value.shape != shape:
                raise ValidationError(f"shape mismatch for {name!r}")
            store[name].value = arr
            store[name].trainable = entry["trainable"]
        elif optimizer is not None:
            slot, pname = name.split(":", 1)
            getattr(optimizer.state, slot)[pname] = arr
    if optimizer is not None and header.get("optimizer"):
        optimizer.state.step_count = header["optimizer"]["step_count"]
    return header.get("extra", {})
