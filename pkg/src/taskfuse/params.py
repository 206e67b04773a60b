"""Deterministic traversal of parameter trees.

Parameter containers are plain dataclasses holding Tensors (trainable
parameters) and bare ndarrays (non-trainable state such as batch-norm
running statistics). Traversal order is field declaration order, which
fixes optimizer update order and checkpoint layout.
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from .tensor import Tensor

KIND_PARAM = 0
KIND_STAT = 1


def named_items(obj, prefix: str = ""):
    """Yield (name, kind, Tensor-or-ndarray) for every array in the tree."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, KIND_PARAM, obj
    elif isinstance(obj, np.ndarray):
        yield prefix, KIND_STAT, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_items(child, sub)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_items(child, f"{prefix}[{i}]")
    elif isinstance(obj, (int, float, str, bool)):
        return
    else:
        raise TypeError(f"cannot traverse {type(obj)!r} at {prefix!r}")


def named_parameters(obj) -> list[tuple[str, Tensor]]:
    return [(n, a) for n, k, a in named_items(obj) if k == KIND_PARAM]


def trainable_tensors(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj) if t.requires_grad]


def set_requires_grad(obj, flag: bool) -> None:
    for _, t in named_parameters(obj):
        t.requires_grad = bool(flag)
        if not flag:
            t.grad = None


def parameter_count(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))


def tree_digest(obj) -> str:
    """SHA-256 over all array payloads, names included (freeze checks)."""
    h = hashlib.sha256()
    for name, kind, arr in named_items(obj):
        data = arr.data if isinstance(arr, Tensor) else arr
        h.update(name.encode("utf-8"))
        h.update(bytes([kind]))
        h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()
