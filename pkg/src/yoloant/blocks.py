"""Composite blocks: CBS, DSLK-Block/Layer, DSLKVit-Block and YOLOv5 C3/SPPF.

Every forward takes ``ops`` (default :mod:`yoloant.tensor_core`) and touches
tensors only through it.  Passing :data:`yoloant.diffcheck.TRACED` instead
records a gradient tape without changing the arithmetic, so traced and plain
runs produce identical values.

Parameters are nested dicts built by the matching ``init_*`` function from a
:class:`~yoloant.params.RandomInit` or :class:`~yoloant.params.ShapeInit`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor_core as tc
from .errors import DimensionError, GeometryError, SpecError

BN_EPS = 1e-3
LN_EPS = 1e-5


def _channels(x) -> int:
    return x.shape[1]


def norm(x, p, ops=tc):
    """Batch norm (inference) when running stats are present, else channel layer norm."""
    if "mean" in p:
        return ops.batchnorm_infer(x, p["gamma"], p["beta"], p["mean"], p["var"], eps=BN_EPS)
    return ops.layernorm_channels(x, p["gamma"], p["beta"], eps=LN_EPS)


def to_tokens(x, ops=tc):
    """(N, C, H, W) -> (N, H*W, C)."""
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def from_tokens(t, h: int, w: int, ops=tc):
    n, length, c = t.shape
    if length != h * w:
        raise DimensionError(f"{length} tokens cannot fill a {h}x{w} grid")
    return ops.reshape(ops.transpose(t, (0, 2, 1)), (n, c, h, w))


# ---------------------------------------------------------------------------
# CBS
# ---------------------------------------------------------------------------


def init_cbs(pf, c_in: int, c_out: int, k: int = 1):
    return {"conv": pf.conv(c_out, c_in, k), "bn": pf.norm(c_out)}


def cbs_forward(x, params, *, stride: int = 1, padding: Optional[int] = None, ops=tc):
    """conv (no bias, "same" padding k//2 unless given) -> batch norm -> SiLU."""
    w = params["conv"]
    if _channels(x) != w.shape[1]:
        raise DimensionError(f"CBS expects {w.shape[1]} channels, got {_channels(x)}")
    k = w.shape[-1]
    y = ops.conv2d(x, w, None, stride=stride, padding=k // 2 if padding is None else padding)
    return ops.activation(norm(y, params["bn"], ops), "silu")


# ---------------------------------------------------------------------------
# DSLK-Block and DSLK-Layer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DslkBlockSpec:
    """Depthwise-separable large-kernel block.

    ``k_small == 0`` replaces the small depthwise path with an identity
    shortcut.
    """

    channels: int
    k_large: int = 3
    k_small: int = 0
    expand: float = 1.0

    def __post_init__(self):
        if self.channels < 1:
            raise SpecError(f"channels must be positive, got {self.channels}")
        if self.k_large < 1 or self.k_large % 2 == 0:
            raise SpecError(f"k_large must be odd and positive, got {self.k_large}")
        if self.k_small not in (0, 3):
            raise SpecError(f"k_small must be 0 or 3, got {self.k_small}")
        if self.expand <= 0 or self.hidden < 1:
            raise SpecError(f"expand={self.expand} gives no pointwise channels")

    @property
    def hidden(self) -> int:
        return int(round(self.expand * self.channels))


def init_depthwise(pf, c: int, k: int):
    return {"conv": pf.conv(c, 1, k), "bn": pf.norm(c)}


def depthwise_forward(x, params, ops=tc):
    """Depthwise conv (groups = C, same padding) -> batch norm -> SiLU."""
    w = params["conv"]
    c = _channels(x)
    y = ops.conv2d(x, w, None, stride=1, padding=w.shape[-1] // 2, groups=c)
    return ops.activation(norm(y, params["bn"], ops), "silu")


def init_pointwise(pf, c: int, hidden: int):
    return {"conv1": pf.conv(hidden, c, 1), "conv2": pf.conv(c, hidden, 1), "bn": pf.norm(c)}


def pointwise_forward(x, params, ops=tc):
    """1x1 expand -> SiLU -> 1x1 project -> batch norm."""
    y = ops.activation(ops.conv2d(x, params["conv1"], None), "silu")
    return norm(ops.conv2d(y, params["conv2"], None), params["bn"], ops)


def init_dslk_block(pf, spec: DslkBlockSpec):
    p = {"dw_large": init_depthwise(pf, spec.channels, spec.k_large)}
    if spec.k_small:
        p["dw_small"] = init_depthwise(pf, spec.channels, spec.k_small)
    p["pw"] = init_pointwise(pf, spec.channels, spec.hidden)
    return p


def dslk_block_forward(x, spec: DslkBlockSpec, params, ops=tc):
    if _channels(x) != spec.channels:
        raise DimensionError(f"DSLK-Block expects {spec.channels} channels, got {_channels(x)}")
    large = depthwise_forward(x, params["dw_large"], ops)
    small = depthwise_forward(x, params["dw_small"], ops) if spec.k_small else x
    return ops.add(x, pointwise_forward(ops.add(large, small), params["pw"], ops))


def layer_block_spec(c_out: int, k_large: int, k_small: int, expand: float) -> DslkBlockSpec:
    if c_out % 2:
        raise DimensionError(f"DSLK-Layer needs an even channel count, got {c_out}")
    return DslkBlockSpec(c_out // 2, k_large, k_small, expand)


def init_dslk_layer(pf, c_in: int, c_out: int, n_blocks: int, spec: DslkBlockSpec):
    half = spec.channels
    if 2 * half != c_out:
        raise DimensionError(f"block width {half} is not half of {c_out}")
    return {
        "cv1": init_cbs(pf, c_in, half),
        "cv2": init_cbs(pf, c_in, half),
        "blocks": [init_dslk_block(pf, spec) for _ in range(n_blocks)],
        "cv3": init_cbs(pf, 2 * half, c_out),
    }


def dslk_layer_forward(x, n_blocks: int, spec: DslkBlockSpec, params, ops=tc):
    """Split-transform-merge: CBS -> n DSLK-Blocks, concat with a CBS bypass, merge CBS."""
    if len(params["blocks"]) != n_blocks:
        raise SpecError(f"params hold {len(params['blocks'])} blocks, expected {n_blocks}")
    if _channels(x) % 2:
        raise DimensionError(f"DSLK-Layer input needs an even channel count, got {_channels(x)}")
    a = cbs_forward(x, params["cv1"], ops=ops)
    for bp in params["blocks"]:
        a = dslk_block_forward(a, spec, bp, ops)
    b = cbs_forward(x, params["cv2"], ops=ops)
    return cbs_forward(ops.concat_channels([a, b]), params["cv3"], ops=ops)


# ---------------------------------------------------------------------------
# DSLKVit-Block
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MhsaSpec:
    d_model: int
    heads: int = 4

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise SpecError(f"d_model={self.d_model} not divisible by heads={self.heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class VitSpec:
    """Configuration of one DSLKVit-Block.

    ``sr`` is shared by the local aggregation (avg-pool) and the
    transposed-conv scatter back to full resolution.
    """

    d_model: int
    sr: int = 2
    heads: int = 4
    ffn_expand: float = 2.0
    local_k: int = 3
    local_k_small: int = 0
    local_expand: float = 1.0
    norm: str = "batch"

    def __post_init__(self):
        if self.sr < 1:
            raise SpecError(f"sr must be >= 1, got {self.sr}")
        if self.norm not in ("batch", "layer"):
            raise SpecError(f"norm must be 'batch' or 'layer', got {self.norm!r}")
        if self.ffn_hidden < 1:
            raise SpecError(f"ffn_expand={self.ffn_expand} gives an empty MLP")
        MhsaSpec(self.d_model, self.heads)

    @property
    def mhsa(self) -> MhsaSpec:
        return MhsaSpec(self.d_model, self.heads)

    @property
    def block(self) -> DslkBlockSpec:
        return DslkBlockSpec(self.d_model, self.local_k, self.local_k_small, self.local_expand)

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_expand * self.d_model))

    def check_geometry(self, h: int, w: int) -> None:
        if h % self.sr or w % self.sr:
            raise GeometryError(f"sr={self.sr} does not divide the {h}x{w} feature map")


def init_f_local(pf, vit: VitSpec):
    c = vit.d_model
    return {"pe": pf.conv(c, 1, 3), "block": init_dslk_block(pf, vit.block), "norm": pf.norm(c, vit.norm)}


def f_local(x, vit: VitSpec, params, ops=tc):
    """Aggregate each sr x sr window into one representative point."""
    vit.check_geometry(*x.shape[2:])
    # residual convolutional positional encoding: x + dwconv3x3(x)
    pe = ops.add(x, ops.conv2d(x, params["pe"], None, stride=1, padding=1, groups=_channels(x)))
    y = norm(ops.add(pe, dslk_block_forward(x, vit.block, params["block"], ops)), params["norm"], ops)
    return ops.pool(y, "avg", vit.sr, vit.sr)


def init_mhsa(pf, spec: MhsaSpec):
    c = spec.d_model
    return {"wq": pf.linear(c, c), "wk": pf.linear(c, c), "wv": pf.linear(c, c), "wo": pf.linear(c, c)}


def mhsa(x, spec: MhsaSpec, params, ops=tc, *, return_weights: bool = False):
    """Multi-head self-attention over the H*W positions of ``x``.

    Head ``i`` uses columns ``i*d_k:(i+1)*d_k`` of each projection matrix.
    With ``return_weights`` the (N, heads, L, L) attention matrix is returned
    alongside the output.
    """
    n, c, h, w = x.shape
    if c != spec.d_model:
        raise DimensionError(f"MHSA expects d_model={spec.d_model}, got {c} channels")
    length, heads, dk = h * w, spec.heads, spec.d_k
    t = to_tokens(x, ops)

    def split(z, axes):
        return ops.transpose(ops.reshape(z, (n, length, heads, dk)), axes)

    q = split(ops.linear(t, params["wq"]), (0, 2, 1, 3))
    k_t = split(ops.linear(t, params["wk"]), (0, 2, 3, 1))
    v = split(ops.linear(t, params["wv"]), (0, 2, 1, 3))
    weights = ops.softmax_rows(ops.scale(ops.matmul(q, k_t), 1.0 / np.sqrt(dk)))
    heads_out = ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
    out = ops.linear(ops.reshape(heads_out, (n, length, c)), params["wo"])
    out = from_tokens(out, h, w, ops)
    if return_weights:
        return out, getattr(weights, "value", weights)
    return out


def init_f_global(pf, vit: VitSpec):
    return {
        "local": init_f_local(pf, vit),
        "attn": init_mhsa(pf, vit.mhsa),
        "ld": pf.scatter(vit.d_model, vit.sr),
        "norm": pf.norm(vit.d_model, vit.norm),
    }


def f_global(x, vit: VitSpec, params, ops=tc):
    """x + norm(scatter(MHSA(f_local(x)))), scatter = transposed conv k = s = sr."""
    z = mhsa(f_local(x, vit, params["local"], ops), vit.mhsa, params["attn"], ops)
    back = ops.transposed_conv(z, params["ld"], None, stride=vit.sr)
    return ops.add(x, norm(back, params["norm"], ops))


def init_ffn(pf, c: int, hidden: int, norm_kind: str = "batch"):
    return {
        "fc1": pf.linear(c, hidden),
        "b1": pf.bias(hidden, c),
        "fc2": pf.linear(hidden, c),
        "b2": pf.bias(c, hidden),
        "norm": pf.norm(c, norm_kind),
    }


def ffn(x, params, ops=tc, act: str = "gelu"):
    """x + norm(MLP(x)); the MLP acts on each position independently."""
    n, c, h, w = x.shape
    t = ops.linear(to_tokens(x, ops), params["fc1"], params["b1"])
    t = ops.linear(ops.activation(t, act), params["fc2"], params["b2"])
    return ops.add(x, norm(from_tokens(t, h, w, ops), params["norm"], ops))


def init_dslkvit(pf, vit: VitSpec):
    return {"global": init_f_global(pf, vit), "ffn": init_ffn(pf, vit.d_model, vit.ffn_hidden, vit.norm)}


def dslkvit_forward(x, vit: VitSpec, params, ops=tc):
    if _channels(x) != vit.d_model:
        raise DimensionError(f"DSLKVit expects {vit.d_model} channels, got {_channels(x)}")
    return ffn(f_global(x, vit, params["global"], ops), params["ffn"], ops)


# ---------------------------------------------------------------------------
# YOLOv5 reference modules
# ---------------------------------------------------------------------------


def init_c3(pf, c_in: int, c_out: int, n: int):
    c_ = c_out // 2
    return {
        "cv1": init_cbs(pf, c_in, c_),
        "cv2": init_cbs(pf, c_in, c_),
        "m": [{"cv1": init_cbs(pf, c_, c_, 1), "cv2": init_cbs(pf, c_, c_, 3)} for _ in range(n)],
        "cv3": init_cbs(pf, 2 * c_, c_out),
    }


def c3_forward(x, params, *, shortcut: bool = True, ops=tc):
    a = cbs_forward(x, params["cv1"], ops=ops)
    for bp in params["m"]:
        y = cbs_forward(cbs_forward(a, bp["cv1"], ops=ops), bp["cv2"], ops=ops)
        a = ops.add(a, y) if shortcut else y
    b = cbs_forward(x, params["cv2"], ops=ops)
    return cbs_forward(ops.concat_channels([a, b]), params["cv3"], ops=ops)


def init_sppf(pf, c_in: int, c_out: int):
    c_ = c_in // 2
    return {"cv1": init_cbs(pf, c_in, c_), "cv2": init_cbs(pf, 4 * c_, c_out)}


def sppf_forward(x, params, *, k: int = 5, ops=tc):
    a = cbs_forward(x, params["cv1"], ops=ops)
    y1 = ops.pool(a, "max", k, 1, k // 2)
    y2 = ops.pool(y1, "max", k, 1, k // 2)
    y3 = ops.pool(y2, "max", k, 1, k // 2)
    return cbs_forward(ops.concat_channels([a, y1, y2, y3]), params["cv2"], ops=ops)
