"""Analytic vector-Jacobian products and finite-difference verification.

Each primitive of :mod:`yoloant.tensor_core` has a VJP registered in
:data:`VJPS`.  Composite blocks are written against an ``ops`` namespace, so
running them with ``ops=TRACED`` records a tape of primitive calls that
:func:`grad` walks in reverse.  :func:`gradcheck` then compares the tape's
gradients against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf, expit

from . import tensor_core as tc
from .errors import CapabilityError, DimensionError
from .params import tree_leaves, tree_map

# ---------------------------------------------------------------------------
# per-primitive VJPs: vjp(upstream, out, *args, **attrs) -> grads per positional arg
# ---------------------------------------------------------------------------


def _conv2d_vjp(g, out, x, weight, bias=None, *, stride=1, padding=0, groups=1):
    weight = np.asarray(weight, dtype=x.dtype)
    k = weight.shape[2]
    h = x.shape[2]
    extra = h - ((g.shape[2] - 1) * stride - 2 * padding + k)
    dx = tc.transposed_conv(g, weight, stride=stride, padding=padding, groups=groups, output_padding=extra)
    if dx.shape != x.shape:
        # width may need a different output_padding than height on non-square inputs
        extra_w = x.shape[3] - ((g.shape[3] - 1) * stride - 2 * padding + k)
        dx = _transposed_conv_rect(g, weight, stride, padding, groups, extra, extra_w)
    dw = tc.conv2d_weight_grad(x, g, k, stride=stride, padding=padding, groups=groups)
    db = None if bias is None else g.sum(axis=(0, 2, 3))
    return dx, dw, db


def _transposed_conv_rect(g, weight, stride, padding, groups, extra_h, extra_w):
    big = max(extra_h, extra_w)
    full = tc.transposed_conv(g, weight, stride=stride, padding=padding, groups=groups, output_padding=big)
    hh = full.shape[2] - (big - extra_h)
    ww = full.shape[3] - (big - extra_w)
    return np.ascontiguousarray(full[:, :, :hh, :ww])


def _transposed_conv_vjp(g, out, x, weight, bias=None, *, stride=1, padding=0, groups=1, output_padding=0):
    weight = np.asarray(weight, dtype=x.dtype)
    k = weight.shape[2]
    dx = tc.conv2d(g, weight, stride=stride, padding=padding, groups=groups)
    dw = tc.conv2d_weight_grad(g, x, k, stride=stride, padding=padding, groups=groups)
    db = None if bias is None else g.sum(axis=(0, 2, 3))
    return dx, dw, db


def _bn_vjp(g, out, x, gamma, beta, mean, var, eps=1e-3):
    dt = x.dtype
    gamma, mean, var = (np.asarray(v, dtype=dt) for v in (gamma, mean, var))
    b = lambda v: v[None, :, None, None]  # noqa: E731
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    centered = x - b(mean)
    gsum = g.sum(axis=(0, 2, 3))
    dx = g * b(gamma * inv)
    dgamma = (g * centered).sum(axis=(0, 2, 3)) * inv
    dmean = -gsum * gamma * inv
    dvar = (g * centered).sum(axis=(0, 2, 3)) * gamma * (-0.5) * inv**3
    return dx, dgamma, gsum, dmean, dvar


def _ln_vjp(g, out, x, gamma, beta, eps=1e-5):
    gamma = np.asarray(gamma, dtype=x.dtype)
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    inv = 1.0 / np.sqrt((d * d).mean(axis=1, keepdims=True) + x.dtype.type(eps))
    xhat = d * inv
    dxhat = g * gamma[None, :, None, None]
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))


def _activation_vjp(g, out, x, kind="silu"):
    if kind == "silu":
        s = expit(x)
        return (g * (s * (1.0 + x * (1.0 - s))),)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)
    if kind == "identity":
        return (g.copy(),)
    raise CapabilityError(f"no derivative for activation {kind!r}")


def _pool_vjp(g, out, x, kind="avg", k=2, stride=None, padding=0):
    s = k if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = g.shape[2:]
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    if kind == "avg":
        share = g / x.dtype.type(k * k)
        for kh in range(k):
            for kw in range(k):
                gp[:, :, kh : kh + (ho - 1) * s + 1 : s, kw : kw + (wo - 1) * s + 1 : s] += share
    elif kind == "max":
        xp = tc._pad(x, padding, -np.inf)
        win = tc._windows(xp, k, s, ho, wo).reshape(n, c, ho, wo, k * k)
        first = win.argmax(axis=-1)  # first maximal element in scan order
        for kh in range(k):
            for kw in range(k):
                hit = first == kh * k + kw
                gp[:, :, kh : kh + (ho - 1) * s + 1 : s, kw : kw + (wo - 1) * s + 1 : s] += np.where(hit, g, 0)
    else:
        raise CapabilityError(f"no derivative for pooling {kind!r}")
    if padding:
        gp = gp[:, :, padding:-padding, padding:-padding]
    return (np.ascontiguousarray(gp),)


def _upsample_vjp(g, out, x, factor=2):
    n, c, h, w = x.shape
    return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)


def _concat_vjp(g, out, xs):
    edges = np.cumsum([0] + [x.shape[1] for x in xs])
    return ([np.ascontiguousarray(g[:, a:b]) for a, b in zip(edges[:-1], edges[1:])],)


def _linear_vjp(g, out, x, weight, bias=None):
    weight = np.asarray(weight, dtype=x.dtype)
    d_in, d_out = weight.shape
    dx = g @ weight.T
    dw = x.reshape(-1, d_in).T @ g.reshape(-1, d_out)
    db = None if bias is None else g.reshape(-1, d_out).sum(axis=0)
    return dx, dw, db


def _matmul_vjp(g, out, a, b):
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def _softmax_vjp(g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _transpose_vjp(g, out, x, axes):
    return (np.ascontiguousarray(np.transpose(g, np.argsort(axes))),)


VJPS: Dict[str, Callable] = {
    "conv2d": _conv2d_vjp,
    "transposed_conv": _transposed_conv_vjp,
    "batchnorm_infer": _bn_vjp,
    "layernorm_channels": _ln_vjp,
    "activation": _activation_vjp,
    "pool": _pool_vjp,
    "upsample_nearest": _upsample_vjp,
    "concat_channels": _concat_vjp,
    "add": lambda g, out, x, y: (g, g),
    "scale": lambda g, out, x, alpha: (g * g.dtype.type(alpha), None),
    "linear": _linear_vjp,
    "matmul": _matmul_vjp,
    "softmax_rows": _softmax_vjp,
    "reshape": lambda g, out, x, shape: (g.reshape(np.shape(x)), None),
    "transpose": _transpose_vjp,
}


def backward(op: str, inputs: Sequence[Any], upstream: np.ndarray, **attrs) -> tuple:
    """Vector-Jacobian product of primitive ``op`` at ``inputs``.

    Returns one gradient per positional input (``None`` for absent or
    non-differentiable inputs).
    """
    if op not in VJPS:
        raise CapabilityError(f"no backward registered for {op!r}")
    out = getattr(tc, op)(*inputs, **attrs)
    if np.shape(upstream) != out.shape:
        raise DimensionError(f"{op}: upstream {np.shape(upstream)} vs output {out.shape}")
    return VJPS[op](np.asarray(upstream, dtype=out.dtype), out, *inputs, **attrs)


# ---------------------------------------------------------------------------
# tracing tape
# ---------------------------------------------------------------------------


class Var:
    """A traced value: an array plus the primitive call that produced it."""

    __slots__ = ("value", "grad", "op", "args", "attrs")

    def __init__(self, value, op: Optional[str] = None, args=(), attrs=None):
        self.value = value
        self.grad = None
        self.op = op
        self.args = args
        self.attrs = attrs or {}

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var({self.op or 'leaf'}, shape={self.shape})"


def _unwrap(a):
    if isinstance(a, Var):
        return a.value
    if isinstance(a, (list, tuple)) and any(isinstance(e, Var) for e in a):
        return [_unwrap(e) for e in a]
    return a


def _has_var(a) -> bool:
    return isinstance(a, Var) or (isinstance(a, (list, tuple)) and any(isinstance(e, Var) for e in a))


class _TracedOps:
    """Drop-in replacement for the ``tensor_core`` namespace that records a tape."""

    def __getattr__(self, name):
        fn = getattr(tc, name)
        if name not in VJPS:
            return fn

        def traced(*args, **attrs):
            if any(_has_var(v) for v in attrs.values()):
                raise CapabilityError(f"{name}: differentiable values must be passed positionally")
            out = fn(*[_unwrap(a) for a in args], **attrs)
            if not any(_has_var(a) for a in args):
                return out
            return Var(out, name, args, attrs)

        traced.__name__ = name
        return traced


TRACED = _TracedOps()


def _parents(node: Var):
    for a in node.args:
        if isinstance(a, Var):
            yield a
        elif isinstance(a, (list, tuple)):
            yield from (e for e in a if isinstance(e, Var))


def grad(out: Var, seed: np.ndarray) -> None:
    """Back-propagate ``seed`` from ``out``; leaves accumulate ``.grad``."""
    order: List[Var] = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in _parents(node))
    for node in order:
        node.grad = None
    out.grad = np.asarray(seed, dtype=out.dtype)

    def accumulate(v, gv):
        if gv is None or not isinstance(v, Var):
            return
        v.grad = gv if v.grad is None else v.grad + gv

    for node in reversed(order):
        if node.op is None or node.grad is None:
            continue
        vals = [_unwrap(a) for a in node.args]
        grads = VJPS[node.op](node.grad, node.value, *vals, **node.attrs)
        for a, ga in zip(node.args, grads):
            if isinstance(a, (list, tuple)) and ga is not None:
                for e, ge in zip(a, ga):
                    accumulate(e, ge)
            else:
                accumulate(a, ga)


# ---------------------------------------------------------------------------
# finite differences and gradcheck
# ---------------------------------------------------------------------------


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at every coordinate of ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@dataclass(frozen=True)
class GradReport:
    op_name: str
    max_rel_err: float
    max_abs_err: float
    n_probes: int
    passed: bool
    tolerance: float = 1e-4

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.op_name:<22} rel={self.max_rel_err:.3e} abs={self.max_abs_err:.3e} "
            f"probes={self.n_probes} tol={self.tolerance:g}"
        )


def _is_array(v) -> bool:
    return isinstance(v, np.ndarray) and v.dtype.kind == "f"


def gradcheck(
    fn: Callable,
    x: np.ndarray,
    params=None,
    *,
    name: str = "block",
    seed: int = 0,
    tol: float = 1e-4,
    h: float = 1e-5,
    n_probes: int = 16,
) -> GradReport:
    """Compare tape gradients of ``fn(x, params, ops)`` with central differences.

    The scalar objective is ``sum(fn(x) * R)`` for a fixed Gaussian ``R``.
    Probes cover one random coordinate of every differentiable leaf, then
    fill up to ``n_probes`` with uniformly chosen coordinates.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    params = tree_map(lambda v: np.array(v, dtype=np.float64) if _is_array(v) else v, params or {})

    out_plain = fn(x, params, tc)
    weights = rng.standard_normal(out_plain.shape)

    leaf_vars = {}

    def wrap(v):
        if _is_array(v):
            var = Var(v)
            leaf_vars[id(var)] = var
            return var
        return v

    xv = Var(x)
    pv = tree_map(wrap, params)
    out = fn(xv, pv, TRACED)
    if not isinstance(out, Var):
        raise CapabilityError(f"{name}: output does not depend on traced inputs")
    grad(out, weights)

    leaves = [("x", x, xv)] + [
        (nm, val, var) for (nm, val), (_, var) in zip(tree_leaves(params), tree_leaves(pv)) if _is_array(val)
    ]
    probes = [(i, int(rng.integers(leaf[1].size))) for i, leaf in enumerate(leaves)]
    sizes = np.array([leaf[1].size for leaf in leaves], dtype=np.float64)
    while len(probes) < n_probes:
        i = int(rng.choice(len(leaves), p=sizes / sizes.sum()))
        probes.append((i, int(rng.integers(leaves[i][1].size))))

    def loss():
        return float((fn(x, params, tc) * weights).sum())

    worst_rel = worst_abs = 0.0
    for i, j in probes:
        _, arr, var = leaves[i]
        analytic = 0.0 if var.grad is None else float(var.grad.reshape(-1)[j])
        flat = arr.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = loss()
        flat[j] = orig - h
        fm = loss()
        flat[j] = orig
        numeric = (fp - fm) / (2 * h)
        worst_rel = max(worst_rel, float(rel_err(analytic, numeric)))
        worst_abs = max(worst_abs, abs(analytic - numeric))
    return GradReport(name, worst_rel, worst_abs, len(probes), worst_rel <= tol, tol)
