"""Parameter trees, initializers and learnable-parameter accounting.

Block parameters are nested dicts (and lists) of arrays.  The same ``init_*``
code runs against two factories: :class:`RandomInit` produces seeded arrays,
:class:`ShapeInit` produces :class:`ParamShape` placeholders so parameter
counts come from the exact structure that initialization would build,
without allocating anything.

Normalization running statistics live under the keys ``mean`` and ``var``.
They are buffers, not learned parameters: they are excluded from counts and
from the weight container, and are always reconstructed as ``0`` / ``1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Any, Callable, Iterator, List, Tuple

import numpy as np

BUFFER_KEYS = frozenset({"mean", "var"})


@dataclass(frozen=True)
class ParamShape:
    shape: tuple
    fill: str = "random"

    @property
    def size(self) -> int:
        return prod(self.shape)


class RandomInit:
    """Seeded fan-in-scaled uniform initializer.

    Conv and linear weights draw from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``;
    norms start at gamma=1, beta=0 with unit running variance.
    """

    def __init__(self, rng: np.random.Generator | int = 0, dtype=np.float32):
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.dtype = np.dtype(dtype)

    def _uniform(self, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def conv(self, c_out, c_in_g, k):
        return self._uniform((c_out, c_in_g, k, k), c_in_g * k * k)

    def linear(self, d_in, d_out):
        return self._uniform((d_in, d_out), d_in)

    def bias(self, n, fan_in):
        return self._uniform((n,), fan_in)

    def norm(self, c, kind="batch"):
        p = {"gamma": np.ones(c, self.dtype), "beta": np.zeros(c, self.dtype)}
        if kind == "batch":
            p["mean"] = np.zeros(c, self.dtype)
            p["var"] = np.ones(c, self.dtype)
        return p

    def scatter(self, c, sr):
        """Transposed-conv weight that spreads each channel uniformly over an sr x sr block."""
        w = np.zeros((c, c, sr, sr), self.dtype)
        w[np.arange(c), np.arange(c)] = 1.0 / (sr * sr)
        return w


class ShapeInit:
    """Same interface as :class:`RandomInit`, returning shapes only."""

    def conv(self, c_out, c_in_g, k):
        return ParamShape((c_out, c_in_g, k, k))

    def linear(self, d_in, d_out):
        return ParamShape((d_in, d_out))

    def bias(self, n, fan_in):
        return ParamShape((n,))

    def norm(self, c, kind="batch"):
        p = {"gamma": ParamShape((c,), "ones"), "beta": ParamShape((c,), "zeros")}
        if kind == "batch":
            p["mean"] = ParamShape((c,), "zeros")
            p["var"] = ParamShape((c,), "ones")
        return p

    def scatter(self, c, sr):
        return ParamShape((c, c, sr, sr), "scatter")


def tree_leaves(tree, prefix: str = "") -> List[Tuple[str, Any]]:
    """Flatten nested dicts/lists into ``(dotted_name, leaf)`` pairs in insertion order."""
    if isinstance(tree, dict):
        items = tree.items()
    elif isinstance(tree, (list, tuple)):
        items = ((str(i), v) for i, v in enumerate(tree))
    else:
        return [(prefix, tree)]
    out = []
    for k, v in items:
        out.extend(tree_leaves(v, f"{prefix}.{k}" if prefix else str(k)))
    return out


def tree_map(fn: Callable, tree):
    if isinstance(tree, dict):
        return {k: tree_map(fn, v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [tree_map(fn, v) for v in tree]
    if isinstance(tree, tuple):
        return tuple(tree_map(fn, v) for v in tree)
    return fn(tree)


def is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFER_KEYS


def learnable_leaves(tree) -> Iterator[Tuple[str, Any]]:
    return ((n, v) for n, v in tree_leaves(tree) if not is_buffer(n))


def count_learnable(tree) -> int:
    return sum(int(np.size(v)) if not isinstance(v, ParamShape) else v.size for _, v in learnable_leaves(tree))


def set_leaf(tree, name: str, value) -> None:
    """Assign ``value`` at dotted path ``name`` inside a nested dict/list tree."""
    *path, last = name.split(".")
    node = tree
    for key in path:
        node = node[int(key)] if isinstance(node, list) else node[key]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
