"""Named parameter storage, initialisers and the on-disk checkpoint format.

A checkpoint is two files: ``<stem>.json`` holding a manifest of
``{name, shape, dtype, byte_offset}`` entries (plus free-form metadata) and
``<stem>.bin`` holding the little-endian raw values back to back.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from useg.autograd.tensor import Tensor
from useg.errors import InvalidAttr, ShapeMismatch


class ParameterStore:
    """Insertion-ordered map of name -> trainable Tensor."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise InvalidAttr(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {n: p.grad for n, p in self._params.items() if p.grad is not None}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for n, p in self._params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{n}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())


class Scope(Mapping):
    """Read-only view of the parameters under ``prefix.``."""

    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def __getitem__(self, key: str) -> Tensor:
        return self.store[self._full(key)]

    def __iter__(self):
        p = self.prefix + "." if self.prefix else ""
        return (n[len(p):] for n in self.store if n.startswith(p))

    def __len__(self):
        return sum(1 for _ in self)

    def scope(self, sub: str) -> "Scope":
        return Scope(self.store, self._full(sub))


def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(3 / fan_in), i.e. variance 1/fan_in."""
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(store: ParameterStore, stem, metadata: Optional[dict] = None) -> Tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    bin_path = stem.with_suffix(".bin")
    json_path = stem.with_suffix(".json")
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, p in store.items():
            arr = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<"))
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(p.shape), "dtype": p.dtype.name, "byte_offset": offset})
            offset += arr.nbytes
    manifest = {"format": "useg-checkpoint-1", "buffer": bin_path.name, "nbytes": offset,
                "tensors": entries, "metadata": metadata or {}}
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return json_path, bin_path


def read_checkpoint(stem) -> Tuple[Dict[str, np.ndarray], dict]:
    stem = Path(stem)
    json_path = stem if stem.suffix == ".json" else stem.with_suffix(".json")
    manifest = json.loads(json_path.read_text())
    raw = (json_path.parent / manifest["buffer"]).read_bytes()
    if len(raw) != manifest["nbytes"]:
        raise ShapeMismatch(f"checkpoint buffer has {len(raw)} bytes, manifest says {manifest['nbytes']}")
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=e["byte_offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return out, manifest.get("metadata", {})


def load_checkpoint(store: ParameterStore, stem) -> dict:
    """Load values into ``store`` after validating names and shapes; returns metadata."""
    state, meta = read_checkpoint(stem)
    store.load_state_dict(state)
    return meta
