"""Static parameter and FLOP accounting for :class:`~yoloant.archnet.Graph`.

Conventions:

* parameters: conv/linear weights and biases plus norm gamma/beta; running
  statistics are not counted;
* FLOPs: 2 x multiply-accumulates.  MACs come from convolutions, transposed
  convolutions, linear layers and attention matrix products, plus one MAC per
  output element of every normalization (inference-time norm is a fused
  scale-and-shift).  Activations, softmax, pooling, upsampling, residual
  adds and bias adds count as zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from . import archnet as A
from .params import count_learnable


@dataclass(frozen=True)
class ProfileRow:
    stage_id: int
    name: str
    module_desc: str
    params: int
    flops: int
    out_shape: Tuple[int, int, int]


@dataclass(frozen=True)
class ProfileReport:
    model: str
    input_size: Tuple[int, int]
    rows: Tuple[ProfileRow, ...]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def row(self, key) -> ProfileRow:
        """Look up a row by stage id or stage name."""
        for r in self.rows:
            if r.stage_id == key or r.name == key:
                return r
        raise KeyError(key)

    def to_text(self) -> str:
        head = f"{'stage':>5}  {'name':<12} {'module':<28} {'params':>10} {'MFLOPs':>10}  out_shape"
        lines = [f"model {self.model}  input {self.input_size[0]}x{self.input_size[1]}", head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.stage_id:>5}  {r.name:<12} {r.module_desc:<28} {r.params:>10} "
                f"{r.flops / 1e6:>10.2f}  {_shape_str(r.out_shape)}"
            )
        lines.append("-" * len(head))
        lines.append(f"total params {self.total_params}")
        lines.append(f"GFLOPs {self.gflops:.2f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "name", "params", "flops", "out_shape"])
        for r in self.rows:
            w.writerow([r.stage_id, r.name, r.params, r.flops, _shape_str(r.out_shape)])
        return buf.getvalue()


def _shape_str(shape) -> str:
    return "x".join(str(d) for d in shape)


def describe_module(spec: A.LayerSpec) -> str:
    k = spec.kind
    if k == "cbs":
        return f"Conv[{spec['c_in']},{spec['c_out']}]k{spec['k']}s{spec['s']}"
    if k == "c3":
        return f"C3[{spec['c_in']},{spec['c_out']}]x{spec['n']}"
    if k == "dslk_layer":
        return f"DSLK[{spec['c_in']},{spec['c_out']}]x{spec['n']} K{spec['k_large']}/{spec['k_small']}"
    if k == "dslkvit":
        return f"DSLKVit[{spec['c_in']},{spec['c_out']}]x{spec['n']} sr{spec['sr']}"
    if k == "sppf":
        return f"SPPF[{spec['c_in']},{spec['c_out']}]"
    if k == "detect_head":
        return f"Detect[{spec['c_in']},{A.head_channels(spec)}]"
    if k == "upsample":
        return f"Upsample x{spec['factor']}"
    return "Concat"


def count_params(g: A.Graph) -> List[int]:
    """Learned parameters per stage, in stage order."""
    shapes = A.param_shapes(g)
    return [count_learnable(shapes[str(st.id)]) for st in g.stages]


NORM_FLOPS_PER_ELEMENT = 2


def _dslk_block_macs(c, k_large, k_small, hidden, hw):
    dw = k_large * k_large + (k_small * k_small if k_small else 0)
    return hw * (dw * c + 2 * c * hidden)


def _dslk_block_norms(c, k_small, hw):
    return hw * c * (3 if k_small else 2)


def stage_macs(spec: A.LayerSpec, out_shape) -> Tuple[int, int]:
    """(multiply-accumulates, normalized elements) of one stage at ``out_shape``."""
    c_out, ho, wo = out_shape
    hw = ho * wo
    k = spec.kind
    if k == "cbs":
        return spec["k"] ** 2 * spec["c_in"] * spec["c_out"] * hw, c_out * hw
    if k == "c3":
        c_, n = spec["c_out"] // 2, spec["n"]
        macs = hw * (2 * spec["c_in"] * c_ + n * 10 * c_ * c_ + 2 * c_ * spec["c_out"])
        return macs, hw * (2 * c_ + 2 * n * c_ + c_out)
    if k == "dslk_layer":
        bs = A.block_spec(spec)
        half, n = bs.channels, spec["n"]
        macs = hw * (2 * spec["c_in"] * half + 2 * half * spec["c_out"])
        macs += n * _dslk_block_macs(half, bs.k_large, bs.k_small, bs.hidden, hw)
        return macs, hw * (2 * half + c_out) + n * _dslk_block_norms(half, bs.k_small, hw)
    if k == "dslkvit":
        vs = A.vit_spec(spec)
        c, sr, n = vs.d_model, vs.sr, spec["n"]
        tokens = hw // (sr * sr)
        reduce = spec["c_in"] != c
        per = (
            9 * c * hw  # positional-encoding depthwise conv
            + _dslk_block_macs(c, vs.local_k, vs.local_k_small, vs.block.hidden, hw)
            + 4 * tokens * c * c  # q, k, v, o projections
            + 2 * tokens * tokens * c  # QK^T and weights @ V over all heads
            + c * c * sr * sr * tokens  # transposed-conv scatter
            + 2 * c * vs.ffn_hidden * hw  # two-layer MLP
        )
        per_norm = _dslk_block_norms(c, vs.local_k_small, hw) + 3 * c * hw
        macs = (spec["c_in"] * c * hw if reduce else 0) + n * per
        return macs, (c * hw if reduce else 0) + n * per_norm
    if k == "sppf":
        c_ = spec["c_in"] // 2
        return hw * (spec["c_in"] * c_ + 4 * c_ * spec["c_out"]), hw * (c_ + c_out)
    if k == "detect_head":
        return spec["c_in"] * A.head_channels(spec) * hw, 0
    return 0, 0


def stage_flops(spec: A.LayerSpec, out_shape) -> int:
    macs, normed = stage_macs(spec, out_shape)
    return 2 * macs + NORM_FLOPS_PER_ELEMENT * normed


def conv_flops(k: int, c_in_per_group: int, c_out: int, h_out: int, w_out: int) -> int:
    """FLOPs of a bare convolution: 2 * k^2 * (c_in/g) * c_out * H_out * W_out."""
    return 2 * k * k * c_in_per_group * c_out * h_out * w_out


def count_flops(g: A.Graph, input_size: Optional[Tuple[int, int]] = None) -> ProfileReport:
    """Per-stage parameters, FLOPs and output shapes at ``input_size``."""
    size = tuple(input_size or g.input_size)
    shapes = A.infer_shapes(g, size)
    params = count_params(g)
    rows = []
    for st, p in zip(g.stages, params):
        rows.append(
            ProfileRow(st.id, st.name, describe_module(st.spec), p, stage_flops(st.spec, shapes[st.id]), shapes[st.id])
        )
    return ProfileReport(g.model, size, tuple(rows))


profile = count_flops


@dataclass(frozen=True)
class DiffRow:
    name: str
    stage_a: Optional[int]
    stage_b: Optional[int]
    params_a: int
    params_b: int
    flops_a: int
    flops_b: int

    # deltas are ``a - b``: the saving of ``b`` relative to ``a``
    @property
    def params_delta(self) -> int:
        return self.params_a - self.params_b

    @property
    def flops_delta(self) -> int:
        return self.flops_a - self.flops_b


def compare(a: ProfileReport, b: ProfileReport) -> List[DiffRow]:
    """Align two reports by stage name (order of ``a``, then names only in ``b``)."""
    by_b = {r.name: r for r in b.rows}
    seen = set()
    out = []
    for ra in a.rows:
        rb = by_b.get(ra.name)
        seen.add(ra.name)
        out.append(DiffRow(ra.name, ra.stage_id, rb and rb.stage_id, ra.params, rb.params if rb else 0,
                           ra.flops, rb.flops if rb else 0))
    for rb in b.rows:
        if rb.name not in seen:
            out.append(DiffRow(rb.name, None, rb.stage_id, 0, rb.params, 0, rb.flops))
    return out


def compare_text(a: ProfileReport, b: ProfileReport, stages: Optional[Sequence[int]] = None) -> str:
    rows = compare(a, b)
    if stages is not None:
        rows = [r for r in rows if r.stage_a in stages]
    head = f"{'stage':>5}  {'name':<12} {a.model:>16} {b.model:>16} {'a-b':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.stage_a if r.stage_a is not None else '-':>5}  {r.name:<12} "
                     f"{r.params_a:>16} {r.params_b:>16} {r.params_delta:>10}")
    lines.append("-" * len(head))
    lines.append(f"{'':>5}  {'total':<12} {a.total_params:>16} {b.total_params:>16} "
                 f"{a.total_params - b.total_params:>10}")
    lines.append(f"{'':>5}  {'GFLOPs':<12} {a.gflops:>16.2f} {b.gflops:>16.2f} {a.gflops - b.gflops:>10.2f}")
    return "\n".join(lines) + "\n"
