"""Flat views over nested parameter dataclasses.

Parameter containers are plain dataclasses whose array-valued fields (and
nested dataclasses / lists of them) are the trainable state.  Scalars,
strings, and tuples are structural metadata and are skipped.  The traversal
order is field-declaration order, which fixes the flat layout used by the
optimizer and by checkpoints.
"""
import copy
from dataclasses import fields, is_dataclass

import numpy as np


def named_arrays(obj, prefix=""):
    """Yield ``(dotted_name, array)`` for every trainable array, by reference."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            if f.name.startswith("_"):
                continue
            yield from named_arrays(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from named_arrays(item, _join(prefix, str(i)))


def _join(prefix, name):
    return f"{prefix}.{name}" if prefix else name


def layout(obj):
    """List of ``(name, shape)`` in flat order."""
    return [(name, tuple(a.shape)) for name, a in named_arrays(obj)]


def count(obj):
    return sum(a.size for _, a in named_arrays(obj))


def flatten(obj):
    arrays = [a.ravel() for _, a in named_arrays(obj)]
    return np.concatenate(arrays) if arrays else np.zeros(0)


def unflatten(template, vec):
    """Deep copy of ``template`` with its arrays filled from ``vec``."""
    out = copy.deepcopy(template)
    vec = np.asarray(vec, dtype=np.float64)
    pos = 0
    for _, a in named_arrays(out):
        a[...] = vec[pos : pos + a.size].reshape(a.shape)
        pos += a.size
    if pos != vec.size:
        raise ValueError(f"flat vector has {vec.size} entries, layout needs {pos}")
    return out


def zeros_like(obj):
    out = copy.deepcopy(obj)
    for _, a in named_arrays(out):
        a[...] = 0.0
    return out


def index_to_name(obj, index):
    """Map a flat index back to ``(name, multi_index)``."""
    pos = 0
    for name, a in named_arrays(obj):
        if index < pos + a.size:
            return name, np.unravel_index(index - pos, a.shape)
        pos += a.size
    raise IndexError(index)
