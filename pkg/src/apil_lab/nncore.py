"""Minimal dense-network substrate with hand-written backprop.

All arithmetic is float64 numpy. Networks are built from Dense layers and
Embedding tables whose parameters live in a ParamSet (named value + gradient
accumulator pairs), optimized with a self-contained Adam implementation.
Checkpoints use a small versioned binary container; see ``save_checkpoint``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"APILCKPT"
CHECKPOINT_VERSION = 1


class Param:
    """A named parameter array with a paired gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Param({self.name!r}, shape={self.value.shape})"


class ParamSet:
    """Ordered collection of named parameters."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.grad.fill(0.0)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self:
            if p.name not in arrays:
                raise KeyError(f"missing parameter {p.name!r}")
            arr = np.asarray(arrays[p.name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {p.name!r}: "
                    f"expected {p.value.shape}, got {arr.shape}"
                )
            p.value[...] = arr


class AdamState:
    """Adam optimizer state over one ParamSet (bias-corrected moments)."""

    def __init__(self, params: ParamSet, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.value) for p in params}
        self._v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, params: ParamSet) -> None:
        """Apply one update from the accumulated gradients, then zero them."""
        for p in params:
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(
                    f"non-finite gradient for parameter {p.name!r}"
                )
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in params:
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        params.zero_grad()


def init_weight(rng: np.random.Generator, in_dim: int, out_dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class Dense:
    """Fully connected layer y = act(W x + b), W shape (out, in)."""

    def __init__(self, params: ParamSet, prefix: str, in_dim: int, out_dim: int,
                 activation: str, rng: np.random.Generator):
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.w = params.add(f"{prefix}.W", init_weight(rng, in_dim, out_dim))
        self.b = params.add(f"{prefix}.b", np.zeros(out_dim))

    def forward(self, x: np.ndarray):
        z = self.w.value @ x + self.b.value
        y = np.tanh(z) if self.activation == "tanh" else z
        return y, (x, y)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        x, y = cache
        dz = dy * (1.0 - y * y) if self.activation == "tanh" else dy
        self.w.grad += np.outer(dz, x)
        self.b.grad += dz
        return self.w.value.T @ dz


class Embedding:
    """Lookup table; backward touches only the looked-up row."""

    def __init__(self, params: ParamSet, name: str, rows: int, dim: int,
                 rng: np.random.Generator):
        self.table = params.add(name, init_weight(rng, dim, rows))

    @property
    def rows(self) -> int:
        return self.table.value.shape[0]

    def forward(self, index: int) -> np.ndarray:
        if not 0 <= index < self.rows:
            raise IndexError(f"embedding index {index} out of range")
        return self.table.value[index]

    def backward(self, index: int, dout: np.ndarray) -> None:
        self.table.grad[index] += dout


@dataclass(frozen=True)
class DropoutSpec:
    """Inverted dropout: zeros with probability ``rate``, else scales by 1/(1-rate)."""

    rate: float
    target: str = "input"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


def sample_dropout_mask(spec: DropoutSpec, width: int,
                        rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(width) >= spec.rate
    return keep.astype(np.float64) / (1.0 - spec.rate)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_nll(logits: np.ndarray, target: int):
    """Return (probs, loss, dlogits) for the NLL of ``target`` under softmax(logits)."""
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    m = logits.max()
    shifted = logits - m
    e = np.exp(shifted)
    total = e.sum()
    probs = e / total
    loss = float(np.log(total) - shifted[target])
    dlogits = probs.copy()
    dlogits[target] -= 1.0
    return probs, loss, dlogits


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write a versioned container of named float64 arrays.

    Layout (all integers little-endian):
      bytes 0..7    magic ``APILCKPT``
      bytes 8..11   uint32 format version
      bytes 12..15  uint32 JSON header length N
      bytes 16..16+N  UTF-8 JSON: {"params": [{"name": ..., "shape": [...]}, ...]}
      remainder     row-major float64 little-endian values, in header order
    """
    header = {"params": [{"name": k, "shape": list(np.shape(v))}
                         for k, v in arrays.items()]}
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version = int.from_bytes(fh.read(4), "little")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len = int.from_bytes(fh.read(4), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"truncated checkpoint at {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays
