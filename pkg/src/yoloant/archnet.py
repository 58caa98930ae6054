"""Detector graphs: YOLOv5-s, its pruned-neck variant, and YOLO-Ant.

A :class:`Graph` is an ordered list of stages.  Each stage names a layer kind,
its hyperparameters and the earlier stages it reads (``-1`` = previous).
Graphs are pure descriptions; parameters come from :func:`init_params` and
execution from :func:`forward`.

Text format (one record per line, ``#`` starts a comment)::

    yoloant-graph 1
    model <name>
    nc <int>
    input <H> <W>
    anchors <w,h,w,h,w,h> <...P4...> <...P5...>
    outputs <id> <id> <id>
    <id> <name> <kind> src=<i[,j...]> key=value ...

Values are ints, floats (always written with ``.`` or an exponent), ``true``
/ ``false``, or comma-separated int tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks as B
from . import tensor_core as tc
from .errors import DimensionError, FormatError, GeometryError, SpecError
from .params import RandomInit, ShapeInit

KINDS = ("cbs", "c3", "dslk_layer", "dslkvit", "sppf", "upsample", "concat", "detect_head")

DEFAULT_ANCHORS = (
    (10, 13, 16, 30, 33, 23),
    (30, 61, 62, 45, 59, 119),
    (116, 90, 156, 198, 373, 326),
)
HEAD_STRIDES = (8, 16, 32)

# Frozen YOLO-Ant hyperparameters.  The architecture leaves stack depths,
# pointwise expansion, FFN width and sr open; these values put the model at
# 6,193,725 parameters / 15.95 GFLOPs at 640x640, nc=80 (targets 6.13M / 16.18).
YOLO_ANT_DEFAULTS = {
    "backbone_kernels": (5, 9, 13, 27),
    "backbone_depths": (2, 4, 6, 2),
    "backbone_e": (3.0, 3.0, 3.0, 3.0),
    "neck_depths": (3, 3),
    "neck_e": 2.0,
    "vit_blocks": (1, 1),
    "vit_sr": (2, 2),
    "vit_e": 1.0,
    "ffn_expand": 2.0,
    "heads": 4,
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: Dict[str, object] = field(default_factory=dict)
    sources: Tuple[int, ...] = (-1,)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")

    def __getitem__(self, key):
        return self.hyper[key]

    def get(self, key, default=None):
        return self.hyper.get(key, default)


@dataclass(frozen=True)
class Stage:
    id: int
    name: str
    spec: LayerSpec

    @property
    def kind(self) -> str:
        return self.spec.kind


@dataclass(frozen=True)
class Graph:
    model: str
    stages: Tuple[Stage, ...]
    outputs: Tuple[int, int, int]
    nc: int
    input_size: Tuple[int, int] = (640, 640)
    anchors: Tuple[Tuple[int, ...], ...] = DEFAULT_ANCHORS

    def __post_init__(self):
        for i, st in enumerate(self.stages):
            if st.id != i:
                raise SpecError(f"stage ids must be 0..n-1 in order; got {st.id} at position {i}")
            for src in self.sources(st) if i else ():
                if not 0 <= src < i:
                    raise SpecError(f"stage {i} reads stage {src}, which is not earlier")
        if len(self.outputs) != 3 or any(self.stages[o].kind != "detect_head" for o in self.outputs):
            raise SpecError("a graph needs exactly three detect_head outputs")
        strides = tuple(self.stages[o].spec["stride"] for o in self.outputs)
        if strides != HEAD_STRIDES:
            raise SpecError(f"head strides must be {HEAD_STRIDES}, got {strides}")

    def sources(self, st: Stage) -> List[int]:
        return [st.id + s if s < 0 else s for s in st.spec.sources]

    def with_input(self, h: int, w: int) -> "Graph":
        return replace(self, input_size=(h, w))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _cbs(c_in, c_out, k=1, s=1, p=None, src=(-1,)):
    hyper = {"c_in": c_in, "c_out": c_out, "k": k, "s": s}
    if p is not None:
        hyper["p"] = p
    return LayerSpec("cbs", hyper, tuple(src))


def _c3(c_in, c_out, n, shortcut, src=(-1,)):
    return LayerSpec("c3", {"c_in": c_in, "c_out": c_out, "n": n, "shortcut": shortcut}, tuple(src))


def _heads(nc, srcs, chans):
    return [
        (f"head_p{lvl}", LayerSpec("detect_head", {"c_in": c, "nc": nc, "na": 3, "stride": s}, (src,)))
        for lvl, src, c, s in zip((3, 4, 5), srcs, chans, HEAD_STRIDES)
    ]


def _assemble(model, rows, nc, input_size=(640, 640)) -> Graph:
    stages = tuple(Stage(i, name, spec) for i, (name, spec) in enumerate(rows))
    outputs = tuple(st.id for st in stages if st.kind == "detect_head")
    g = Graph(model, stages, outputs, nc, tuple(input_size))
    infer_shapes(g)
    return g


def _v5_backbone():
    return [
        ("stem", _cbs(3, 32, 6, 2, 2)),
        ("down1", _cbs(32, 64, 3, 2)),
        ("c3_p2", _c3(64, 64, 1, True)),
        ("down2", _cbs(64, 128, 3, 2)),
        ("c3_p3", _c3(128, 128, 2, True)),
        ("down3", _cbs(128, 256, 3, 2)),
        ("c3_p4", _c3(256, 256, 3, True)),
        ("down4", _cbs(256, 512, 3, 2)),
        ("c3_p5", _c3(512, 512, 1, True)),
        ("sppf", LayerSpec("sppf", {"c_in": 512, "c_out": 512, "k": 5})),
    ]


def _check_nc(nc):
    if nc < 1:
        raise SpecError(f"nc must be >= 1, got {nc}")


def build_yolov5s(nc: int = 80) -> Graph:
    """YOLOv5-s v6.x: stem 6x6/2, C3 stacks 1/2/3/1, SPPF, FPN+PAN neck, three heads."""
    _check_nc(nc)
    neck = [
        ("lat_p5", _cbs(512, 256, 1)),
        ("up_p5", LayerSpec("upsample", {"factor": 2})),
        ("cat_p4", LayerSpec("concat", {}, (-1, 6))),
        ("fpn_p4", _c3(512, 256, 1, False)),
        ("lat_p4", _cbs(256, 128, 1)),
        ("up_p4", LayerSpec("upsample", {"factor": 2})),
        ("cat_p3", LayerSpec("concat", {}, (-1, 4))),
        ("pan_p3", _c3(256, 128, 1, False)),
        ("down_p3", _cbs(128, 128, 3, 2)),
        ("cat_pan_p4", LayerSpec("concat", {}, (-1, 14))),
        ("pan_p4", _c3(256, 256, 1, False)),
        ("down_p4", _cbs(256, 256, 3, 2)),
        ("cat_pan_p5", LayerSpec("concat", {}, (-1, 10))),
        ("pan_p5", _c3(512, 512, 1, False)),
    ]
    return _assemble("yolov5s", _v5_backbone() + neck + _heads(nc, (17, 20, 23), (128, 256, 512)), nc)


def build_yolov5s_pruned(nc: int = 80) -> Graph:
    """YOLOv5-s with a narrow-and-deep 128-channel neck (backbone unchanged)."""
    _check_nc(nc)
    neck = [
        ("lat_p5", _cbs(512, 128, 1)),
        ("up_p5", LayerSpec("upsample", {"factor": 2})),
        ("cat_p4", LayerSpec("concat", {}, (-1, 6))),
        ("fpn_p4", _c3(384, 128, 4, False)),
        ("lat_p4", _cbs(128, 128, 1)),
        ("up_p4", LayerSpec("upsample", {"factor": 2})),
        ("cat_p3", LayerSpec("concat", {}, (-1, 4))),
        ("pan_p3", _c3(256, 128, 3, False)),
        ("down_p3", _cbs(128, 128, 3, 2)),
        ("cat_pan_p4", LayerSpec("concat", {}, (-1, 14))),
        ("pan_p4", _c3(256, 128, 3, False)),
        ("down_p4", _cbs(128, 128, 3, 2)),
        ("cat_pan_p5", LayerSpec("concat", {}, (-1, 10))),
        ("pan_p5", _c3(256, 128, 3, False)),
    ]
    return _assemble("yolov5s-pruned", _v5_backbone() + neck + _heads(nc, (17, 20, 23), (128, 128, 128)), nc)


def _per_stage(value, n=4):
    if isinstance(value, (int, float)):
        return (value,) * n
    value = tuple(value)
    if len(value) != n:
        raise SpecError(f"expected {n} values, got {value}")
    return value


def yolo_ant_config(overrides: Optional[dict] = None) -> dict:
    cfg = dict(YOLO_ANT_DEFAULTS)
    for key, val in (overrides or {}).items():
        if key not in cfg:
            raise SpecError(f"unknown YOLO-Ant option {key!r}")
        cfg[key] = val
    return cfg


def build_yolo_ant(nc: int = 80, cfg: Optional[dict] = None, input_size=(640, 640)) -> Graph:
    """DSLKNet backbone + 128-channel DSLK FPN + DSLKVit PAN at P4/P5."""
    _check_nc(nc)
    cfg = yolo_ant_config(cfg)
    kernels = _per_stage(cfg["backbone_kernels"])
    depths = _per_stage(cfg["backbone_depths"])
    es = _per_stage(cfg["backbone_e"])
    n_fpn4, n_pan3 = _per_stage(cfg["neck_depths"], 2)
    n_vit4, n_vit5 = _per_stage(cfg["vit_blocks"], 2)
    sr4, sr5 = _per_stage(cfg["vit_sr"], 2)
    h, w = input_size
    for sr, stride in ((sr4, 16), (sr5, 32)):
        if (h // stride) % sr or (w // stride) % sr:
            raise GeometryError(f"sr={sr} does not divide the stride-{stride} map of a {h}x{w} input")

    def dslk(c_in, c_out, n, kl, ks, e):
        return LayerSpec("dslk_layer", {"c_in": c_in, "c_out": c_out, "n": n, "k_large": kl, "k_small": ks, "e": e})

    def vit(n, sr):
        hyper = {"c_in": 256, "c_out": 128, "n": n, "sr": sr, "heads": cfg["heads"],
                 "ffn": float(cfg["ffn_expand"]), "e": float(cfg["vit_e"])}
        return LayerSpec("dslkvit", hyper)

    ne = float(cfg["neck_e"])
    rows = [
        ("stem", _cbs(3, 32, 6, 2, 2)),
        ("down1", _cbs(32, 64, 3, 2)),
        ("dslk_p2", dslk(64, 64, depths[0], kernels[0], 3, float(es[0]))),
        ("down2", _cbs(64, 128, 3, 2)),
        ("dslk_p3", dslk(128, 128, depths[1], kernels[1], 3, float(es[1]))),
        ("down3", _cbs(128, 256, 3, 2)),
        ("dslk_p4", dslk(256, 256, depths[2], kernels[2], 3, float(es[2]))),
        ("down4", _cbs(256, 512, 3, 2)),
        ("dslk_p5", dslk(512, 512, depths[3], kernels[3], 3, float(es[3]))),
        ("sppf", LayerSpec("sppf", {"c_in": 512, "c_out": 512, "k": 5})),
        ("lat_p5", _cbs(512, 128, 1)),
        ("up_p5", LayerSpec("upsample", {"factor": 2})),
        ("cat_p4", LayerSpec("concat", {}, (-1, 6))),
        ("fpn_p4", dslk(384, 128, n_fpn4, 3, 0, ne)),
        ("lat_p4", _cbs(128, 128, 1)),
        ("up_p4", LayerSpec("upsample", {"factor": 2})),
        ("cat_p3", LayerSpec("concat", {}, (-1, 4))),
        ("pan_p3", dslk(256, 128, n_pan3, 3, 0, ne)),
        ("down_p3", _cbs(128, 128, 3, 2)),
        ("cat_pan_p4", LayerSpec("concat", {}, (-1, 14))),
        ("pan_p4", vit(n_vit4, sr4)),
        ("down_p4", _cbs(128, 128, 3, 2)),
        ("cat_pan_p5", LayerSpec("concat", {}, (-1, 10))),
        ("pan_p5", vit(n_vit5, sr5)),
    ]
    return _assemble("yolo-ant", rows + _heads(nc, (17, 20, 23), (128, 128, 128)), nc, input_size)


BUILDERS = {
    "yolov5s": lambda nc, cfg=None: build_yolov5s(nc),
    "yolov5s-pruned": lambda nc, cfg=None: build_yolov5s_pruned(nc),
    "yolo-ant": lambda nc, cfg=None: build_yolo_ant(nc, cfg),
}


def build(model: str, nc: int = 80, cfg: Optional[dict] = None) -> Graph:
    if model not in BUILDERS:
        raise SpecError(f"unknown model {model!r}; choose from {sorted(BUILDERS)}")
    if cfg and model != "yolo-ant":
        raise SpecError(f"{model} takes no overrides")
    return BUILDERS[model](nc, cfg)


# ---------------------------------------------------------------------------
# stage semantics
# ---------------------------------------------------------------------------


def block_spec(spec: LayerSpec) -> B.DslkBlockSpec:
    return B.layer_block_spec(spec["c_out"], spec["k_large"], spec["k_small"], spec["e"])


def vit_spec(spec: LayerSpec) -> B.VitSpec:
    return B.VitSpec(spec["c_out"], sr=spec["sr"], heads=spec["heads"], ffn_expand=spec["ffn"], local_expand=spec["e"])


def head_channels(spec: LayerSpec) -> int:
    return spec["na"] * (spec["nc"] + 5)


def infer_shapes(g: Graph, input_size: Optional[Tuple[int, int]] = None) -> List[Tuple[int, int, int]]:
    """Propagate (C, H, W) through the graph, validating every edge."""
    h, w = input_size or g.input_size
    if h % 32 or w % 32:
        raise GeometryError(f"input {h}x{w} is not divisible by 32")
    shapes: List[Tuple[int, int, int]] = []
    for st in g.stages:
        spec = st.spec
        srcs = g.sources(st)
        ins = [shapes[s] for s in srcs] if st.id else [(3, h, w)]
        where = f"stage {st.id} ({st.name})"
        if spec.kind == "concat":
            if len({s[1:] for s in ins}) != 1:
                raise DimensionError(f"{where}: concat inputs disagree spatially: {ins}")
            shapes.append((sum(s[0] for s in ins), *ins[0][1:]))
            continue
        if len(ins) != 1:
            raise DimensionError(f"{where}: expects one input, got {len(ins)}")
        c, hh, ww = ins[0]
        if spec.kind == "upsample":
            shapes.append((c, hh * spec["factor"], ww * spec["factor"]))
            continue
        if c != spec["c_in"]:
            raise DimensionError(f"{where}: expects {spec['c_in']} input channels, receives {c}")
        if spec.kind == "cbs":
            p = spec.get("p", spec["k"] // 2)
            hh, ww = (tc.conv_out_len(n, spec["k"], spec["s"], p) for n in (hh, ww))
            shapes.append((spec["c_out"], hh, ww))
        elif spec.kind == "detect_head":
            shapes.append((head_channels(spec), hh, ww))
        else:
            if spec.kind == "dslkvit":
                vit_spec(spec).check_geometry(hh, ww)
            shapes.append((spec["c_out"], hh, ww))
    ih, iw = input_size or g.input_size
    for o, stride in zip(g.outputs, HEAD_STRIDES):
        _, oh, ow = shapes[o]
        if oh * stride != ih or ow * stride != iw:
            raise GeometryError(f"head stage {o} is {oh}x{ow}, expected stride {stride} of {ih}x{iw}")
    return shapes


def init_stage(pf, spec: LayerSpec):
    k = spec.kind
    if k == "cbs":
        return B.init_cbs(pf, spec["c_in"], spec["c_out"], spec["k"])
    if k == "c3":
        return B.init_c3(pf, spec["c_in"], spec["c_out"], spec["n"])
    if k == "dslk_layer":
        return B.init_dslk_layer(pf, spec["c_in"], spec["c_out"], spec["n"], block_spec(spec))
    if k == "dslkvit":
        p = {}
        if spec["c_in"] != spec["c_out"]:
            p["reduce"] = B.init_cbs(pf, spec["c_in"], spec["c_out"], 1)
        p["blocks"] = [B.init_dslkvit(pf, vit_spec(spec)) for _ in range(spec["n"])]
        return p
    if k == "sppf":
        return B.init_sppf(pf, spec["c_in"], spec["c_out"])
    if k == "detect_head":
        co = head_channels(spec)
        return {"conv": pf.conv(co, spec["c_in"], 1), "bias": pf.bias(co, spec["c_in"])}
    return {}


def stage_forward(spec: LayerSpec, params, inputs: Sequence, ops=tc):
    k = spec.kind
    if k == "concat":
        return ops.concat_channels(list(inputs))
    x, = inputs
    if k == "upsample":
        return ops.upsample_nearest(x, spec["factor"])
    if k == "cbs":
        return B.cbs_forward(x, params, stride=spec["s"], padding=spec.get("p"), ops=ops)
    if k == "c3":
        return B.c3_forward(x, params, shortcut=spec["shortcut"], ops=ops)
    if k == "dslk_layer":
        return B.dslk_layer_forward(x, spec["n"], block_spec(spec), params, ops)
    if k == "dslkvit":
        if "reduce" in params:
            x = B.cbs_forward(x, params["reduce"], ops=ops)
        vit = vit_spec(spec)
        for bp in params["blocks"]:
            x = B.dslkvit_forward(x, vit, bp, ops)
        return x
    if k == "sppf":
        return B.sppf_forward(x, params, k=spec["k"], ops=ops)
    if k == "detect_head":
        return ops.conv2d(x, params["conv"], params["bias"])
    raise SpecError(f"unknown layer kind {k!r}")


def init_params(g: Graph, seed: int = 0, dtype=np.float32, factory=None) -> Dict[str, object]:
    """Parameters for every stage, keyed by stage id as a string, from one seeded stream."""
    pf = factory or RandomInit(np.random.default_rng(seed), dtype)
    return {str(st.id): init_stage(pf, st.spec) for st in g.stages}


def param_shapes(g: Graph) -> Dict[str, object]:
    return init_params(g, factory=ShapeInit())


def forward(g: Graph, x, params, ops=tc, *, keep: bool = False):
    """Run the graph; returns the three raw head maps (P3, P4, P5).

    With ``keep=True`` also returns every stage output.
    """
    tc.check4(x)
    if x.shape[1] != 3:
        raise DimensionError(f"input must have 3 channels, got {x.shape}")
    if tuple(x.shape[2:]) != tuple(g.input_size):
        infer_shapes(g, tuple(x.shape[2:]))
    outs: List[object] = []
    for st in g.stages:
        srcs = g.sources(st)
        ins = [outs[s] for s in srcs] if st.id else [x]
        try:
            outs.append(stage_forward(st.spec, params[str(st.id)], ins, ops))
        except (DimensionError, GeometryError, SpecError) as err:
            raise type(err)(f"stage {st.id} ({st.name}): {err}") from err
    heads = [outs[o] for o in g.outputs]
    return (heads, outs) if keep else heads


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(e) for e in v)
    raise FormatError(f"cannot serialize value {v!r}")


def _parse(tok: str):
    if tok in ("true", "false"):
        return tok == "true"
    if "," in tok:
        return tuple(_parse(t) for t in tok.split(","))
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        raise FormatError(f"bad value {tok!r}") from None


def dumps(g: Graph) -> str:
    lines = [
        "yoloant-graph 1",
        f"model {g.model}",
        f"nc {g.nc}",
        f"input {g.input_size[0]} {g.input_size[1]}",
        "anchors " + " ".join(_fmt(a) for a in g.anchors),
        "outputs " + " ".join(str(o) for o in g.outputs),
    ]
    for st in g.stages:
        fields = [str(st.id), st.name, st.kind, "src=" + ",".join(str(s) for s in st.spec.sources)]
        fields += [f"{k}={_fmt(v)}" for k, v in st.spec.hyper.items()]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Graph:
    header: Dict[str, List[str]] = {}
    stages: List[Stage] = []
    lines = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != ["yoloant-graph", "1"]:
        raise FormatError("missing 'yoloant-graph 1' header")
    for lineno, toks in enumerate(lines[1:], start=2):
        if not toks[0].lstrip("-").isdigit():
            header[toks[0]] = toks[1:]
            continue
        if len(toks) < 4 or not toks[3].startswith("src="):
            raise FormatError(f"line {lineno}: expected '<id> <name> <kind> src=...'")
        hyper = {}
        for tok in toks[4:]:
            key, sep, val = tok.partition("=")
            if not sep:
                raise FormatError(f"line {lineno}: expected key=value, got {tok!r}")
            hyper[key] = _parse(val)
        src = tuple(int(s) for s in toks[3][4:].split(","))
        stages.append(Stage(int(toks[0]), toks[1], LayerSpec(toks[2], hyper, src)))
    try:
        anchors = tuple(tuple(int(v) for v in a.split(",")) for a in header["anchors"])
        return Graph(
            model=header["model"][0],
            stages=tuple(stages),
            outputs=tuple(int(o) for o in header["outputs"]),
            nc=int(header["nc"][0]),
            input_size=(int(header["input"][0]), int(header["input"][1])),
            anchors=anchors,
        )
    except KeyError as err:
        raise FormatError(f"missing header field {err}") from None
