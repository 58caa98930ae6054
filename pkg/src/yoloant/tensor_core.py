"""Deterministic NCHW tensor primitives.

Every function here is pure: it never mutates its inputs and returns a fresh
array.  Activations are plain ``numpy.ndarray`` objects of rank 4 in
``(N, C, H, W)`` order, either ``float32`` or ``float64``.  Token-level
helpers (``linear``, ``softmax_rows``, ``matmul``) accept any rank >= 2 and
operate on the trailing two axes.

Accumulation happens in the dtype of the input activation.  Convolutions
accumulate over kernel offsets in a fixed ``(kh, kw)`` order; dense channel
contractions are delegated to a single matrix product per call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit
from threadpoolctl import threadpool_limits

from .errors import DimensionError, GeometryError, SpecError

def single_threaded():
    """Context manager pinning BLAS to one thread, so matrix-product reductions
    run in the same order whatever the host's thread configuration."""
    return threadpool_limits(limits=1, user_api="blas")


FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D convolution."""

    kernel: int
    c_in: int
    c_out: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise SpecError(f"invalid convolution geometry: {self}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise SpecError(f"channels {self.c_in}->{self.c_out} not divisible by groups={self.groups}")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.c_in == self.c_out

    @property
    def weight_shape(self) -> tuple:
        return (self.c_out, self.c_in // self.groups, self.kernel, self.kernel)

    def out_size(self, h: int, w: int) -> tuple:
        return (
            conv_out_len(h, self.kernel, self.stride, self.padding),
            conv_out_len(w, self.kernel, self.stride, self.padding),
        )


def conv_out_len(n: int, k: int, s: int, p: int) -> int:
    out = (n + 2 * p - k) // s + 1
    if n + 2 * p - k < 0 or out < 1:
        raise GeometryError(f"empty output: size={n} kernel={k} stride={s} padding={p}")
    return out


def check4(x: np.ndarray, name: str = "x") -> np.ndarray:
    """Validate a Tensor4 and return it unchanged."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise DimensionError(f"{name} must be a rank-4 array, got shape {np.shape(x)}")
    if x.dtype not in FLOAT_DTYPES:
        raise DimensionError(f"{name} must be float32 or float64, got {x.dtype}")
    if min(x.shape) < 1:
        raise DimensionError(f"{name} has an empty dimension: {x.shape}")
    return x


def tensor4(data, shape: Optional[Sequence[int]] = None, dtype=np.float32) -> np.ndarray:
    """Build a Tensor4 from nested data or a flat buffer plus ``shape``."""
    arr = np.asarray(data, dtype=dtype)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise DimensionError(f"data length {arr.size} does not match shape {tuple(shape)}")
        arr = arr.reshape(shape)
    return check4(np.ascontiguousarray(arr))


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _vector(v, n: int, dtype, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=dtype)
    if v.shape != (n,):
        raise DimensionError(f"{name} must have shape ({n},), got {v.shape}")
    return v


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """View (N, C, Ho, Wo, k, k) of all convolution windows."""
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias=None, *, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Grouped 2-D cross-correlation.

    ``weight`` has shape ``(c_out, c_in // groups, k, k)``.
    """
    check4(x)
    weight = np.asarray(weight, dtype=x.dtype)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv weight must be (c_out, c_in/g, k, k), got {weight.shape}")
    n, c, h, w = x.shape
    c_out, cg, k, _ = weight.shape
    spec = ConvSpec(k, c, c_out, stride, padding, groups, bias is not None)
    if cg != c // groups:
        raise DimensionError(f"weight expects {cg * groups} input channels, input has {c}")
    ho, wo = spec.out_size(h, w)
    xp = _pad(x, padding)

    if groups == 1:
        out = _dense_conv(xp, weight, stride, ho, wo)
    elif cg == 1:
        out = _channelwise_conv(xp, weight, stride, ho, wo, groups)
    else:
        og = c_out // groups
        out = np.concatenate(
            [
                _dense_conv(xp[:, g * cg : (g + 1) * cg], weight[g * og : (g + 1) * og], stride, ho, wo)
                for g in range(groups)
            ],
            axis=1,
        )
    if bias is not None:
        out = out + _vector(bias, c_out, x.dtype, "bias")[None, :, None, None]
    return out


def _dense_conv(xp, weight, s, ho, wo):
    n, c = xp.shape[:2]
    c_out, _, k, _ = weight.shape
    if k == 1:
        cols = xp[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s].transpose(0, 2, 3, 1)
        cols = cols.reshape(n * ho * wo, c)
    else:
        cols = _windows(xp, k, s, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ weight.reshape(c_out, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))


def _channelwise_conv(xp, weight, s, ho, wo, groups):
    # one input channel per group; output channel o reads input channel o // mult
    c_out, _, k, _ = weight.shape
    mult = c_out // groups
    src = np.repeat(xp, mult, axis=1) if mult > 1 else xp
    out = np.zeros((xp.shape[0], c_out, ho, wo), dtype=xp.dtype)
    for kh in range(k):
        for kw in range(k):
            patch = src[:, :, kh : kh + (ho - 1) * s + 1 : s, kw : kw + (wo - 1) * s + 1 : s]
            out += patch * weight[:, 0, kh, kw][None, :, None, None]
    return out


def transposed_conv(
    x, weight, bias=None, *, stride: int = 1, padding: int = 0, groups: int = 1, output_padding: int = 0
) -> np.ndarray:
    """Transposed convolution, the adjoint of :func:`conv2d` for the same weight.

    ``weight`` has shape ``(c_in, c_out // groups, k, k)``; output side is
    ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    check4(x)
    weight = np.asarray(weight, dtype=x.dtype)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"transposed conv weight must be (c_in, c_out/g, k, k), got {weight.shape}")
    n, c, h, w = x.shape
    if weight.shape[0] != c:
        raise DimensionError(f"weight expects {weight.shape[0]} input channels, input has {c}")
    if c % groups:
        raise SpecError(f"{c} channels not divisible by groups={groups}")
    og, k = weight.shape[1], weight.shape[2]
    c_out = og * groups
    s, p = stride, padding
    if s < 1 or p < 0 or not 0 <= output_padding < s:
        raise SpecError(f"invalid transposed conv geometry stride={s} padding={p} output_padding={output_padding}")
    hf = (h - 1) * s + k + output_padding
    wf = (w - 1) * s + k + output_padding
    if hf - 2 * p < 1 or wf - 2 * p < 1:
        raise GeometryError(f"empty transposed conv output for input {h}x{w}")
    full = np.zeros((n, c_out, hf, wf), dtype=x.dtype)
    cg = c // groups

    if groups == 1 or (cg == 1 and og == 1):
        if groups == 1:
            cols = x.transpose(0, 2, 3, 1).reshape(n * h * w, c) @ weight.reshape(c, og * k * k)
            cols = cols.reshape(n, h, w, og, k, k).transpose(0, 3, 1, 2, 4, 5)
            for kh in range(k):
                for kw in range(k):
                    full[:, :, kh : kh + (h - 1) * s + 1 : s, kw : kw + (w - 1) * s + 1 : s] += cols[..., kh, kw]
        else:
            for kh in range(k):
                for kw in range(k):
                    full[:, :, kh : kh + (h - 1) * s + 1 : s, kw : kw + (w - 1) * s + 1 : s] += (
                        x * weight[:, 0, kh, kw][None, :, None, None]
                    )
    else:
        for g in range(groups):
            full[:, g * og : (g + 1) * og] = transposed_conv(
                x[:, g * cg : (g + 1) * cg], weight[g * cg : (g + 1) * cg], stride=s, output_padding=output_padding
            )
    out = full[:, :, p : hf - p, p : wf - p] if p else full
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + _vector(bias, c_out, x.dtype, "bias")[None, :, None, None]
    return out


def conv2d_weight_grad(x, upstream, kernel: int, *, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Gradient of ``<conv2d(x, W), upstream>`` with respect to ``W``."""
    n, c, h, w = x.shape
    _, c_out, ho, wo = upstream.shape
    k, s = kernel, stride
    xp = _pad(x, padding)
    cg, og = c // groups, c_out // groups
    if groups == 1 or cg > 1:
        parts = []
        for g in range(groups):
            xg = xp[:, g * cg : (g + 1) * cg]
            ug = upstream[:, g * og : (g + 1) * og]
            cols = _windows(xg, k, s, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cg * k * k)
            gw = ug.transpose(0, 2, 3, 1).reshape(n * ho * wo, og).T @ cols
            parts.append(gw.reshape(og, cg, k, k))
        return np.concatenate(parts, axis=0)
    src = np.repeat(xp, og, axis=1) if og > 1 else xp
    gw = np.zeros((c_out, 1, k, k), dtype=x.dtype)
    for kh in range(k):
        for kw in range(k):
            patch = src[:, :, kh : kh + (ho - 1) * s + 1 : s, kw : kw + (wo - 1) * s + 1 : s]
            gw[:, 0, kh, kw] = (patch * upstream).sum(axis=(0, 2, 3))
    return gw


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------


def batchnorm_infer(x, gamma, beta, mean, var, eps: float = 1e-3) -> np.ndarray:
    """Inference-mode batch normalization with frozen running statistics."""
    check4(x)
    c = x.shape[1]
    gamma, beta, mean, var = (_vector(v, c, x.dtype, nm) for v, nm in
                              ((gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")))
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    b = lambda v: v[None, :, None, None]  # noqa: E731
    return b(gamma) * (x - b(mean)) * b(inv) + b(beta)


def layernorm_channels(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Layer normalization across channels at every spatial position."""
    check4(x)
    c = x.shape[1]
    gamma, beta = _vector(gamma, c, x.dtype, "gamma"), _vector(beta, c, x.dtype, "beta")
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    inv = 1.0 / np.sqrt((d * d).mean(axis=1, keepdims=True) + x.dtype.type(eps))
    return d * inv * gamma[None, :, None, None] + beta[None, :, None, None]


def sigmoid(x):
    return expit(x)


def activation(x, kind: str = "silu") -> np.ndarray:
    """Elementwise SiLU or exact (erf-based) GELU."""
    x = np.asarray(x)
    if kind == "silu":
        return x * expit(x)
    if kind == "gelu":
        return x * (0.5 * (1.0 + erf(x * x.dtype.type(1 / np.sqrt(2.0)))))
    if kind == "identity":
        return x.copy()
    raise SpecError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def pool(x, kind: str = "avg", k: int = 2, stride: Optional[int] = None, padding: int = 0) -> np.ndarray:
    """Average or max pooling over ``k x k`` windows.

    Max pooling pads with ``-inf``; average pooling pads with zeros and
    always divides by ``k * k``.
    """
    check4(x)
    s = k if stride is None else stride
    if k < 1 or s < 1:
        raise SpecError(f"invalid pooling k={k} stride={s}")
    h, w = x.shape[2:]
    ho, wo = conv_out_len(h, k, s, padding), conv_out_len(w, k, s, padding)
    if kind == "max":
        win = _windows(_pad(x, padding, -np.inf), k, s, ho, wo)
        return np.ascontiguousarray(win.max(axis=(4, 5)))
    if kind == "avg":
        win = _windows(_pad(x, padding), k, s, ho, wo)
        return np.ascontiguousarray(win.mean(axis=(4, 5), dtype=x.dtype))
    raise SpecError(f"unknown pooling kind {kind!r}")


def upsample_nearest(x, factor: int = 2) -> np.ndarray:
    check4(x)
    if factor < 1:
        raise SpecError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


# ---------------------------------------------------------------------------
# structural and dense ops
# ---------------------------------------------------------------------------


def concat_channels(xs: Sequence[np.ndarray]) -> np.ndarray:
    xs = [check4(x, f"xs[{i}]") for i, x in enumerate(xs)]
    if not xs:
        raise DimensionError("concat of an empty list")
    ref = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0],) + x.shape[2:] != (ref[0],) + ref[2:]:
            raise DimensionError(f"cannot concat {x.shape} with {ref}")
    return np.concatenate(xs, axis=1)


def add(x, y) -> np.ndarray:
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise DimensionError(f"add shape mismatch {x.shape} vs {y.shape}")
    return x + y


def scale(x, alpha: float) -> np.ndarray:
    x = np.asarray(x)
    return x * x.dtype.type(alpha)


def linear(x, weight, bias=None) -> np.ndarray:
    """``x @ weight (+ bias)`` over the last axis; ``weight`` is ``(d_in, d_out)``."""
    x = np.asarray(x)
    weight = np.asarray(weight, dtype=x.dtype)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        out = out + _vector(bias, weight.shape[1], x.dtype, "bias")
    return out


def matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(x) -> np.ndarray:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = np.asarray(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reshape(x, shape: Sequence[int]) -> np.ndarray:
    return np.reshape(x, tuple(shape))


def transpose(x, axes: Sequence[int]) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(x, tuple(axes)))
