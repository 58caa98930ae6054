"""Command-line interface: ``yoloant {describe,forward,gradcheck,eval,prune-compare}``.

Exit codes: 0 success, 1 gradient check failure, 2 usage or configuration
error, 3 data or weight-manifest error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import archnet as A
from . import detect_eval as E
from . import formats as F
from . import profiler as P
from .errors import DimensionError, DomainError, FormatError, GeometryError, ManifestError, SpecError
from .gradsuite import run_suite
from .tensor_core import single_threaded

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
COMPARE_STAGES = (17, 18, 20, 21, 23)


class UsageError(Exception):
    pass


def _input_size(text: str):
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad input size {text!r}; use H or HxW") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) <= 0:
        raise argparse.ArgumentTypeError(f"bad input size {text!r}; use H or HxW")
    return dims


def _overrides(pairs: Sequence[str]):
    cfg = {}
    for pair in pairs or ():
        key, sep, val = pair.partition("=")
        if not sep:
            raise UsageError(f"override {pair!r} is not key=value")
        try:
            cfg[key.strip()] = A._parse(val.strip())
        except FormatError as exc:
            raise UsageError(f"override {pair!r}: {exc}") from None
    return cfg


def _graph(args, input_size=None):
    size = input_size or args.input_size
    if size[0] % 32 or size[1] % 32:
        raise GeometryError(f"input {size[0]}x{size[1]} is not divisible by 32")
    cfg = _overrides(args.set)
    if args.model == "yolo-ant":
        g = A.build_yolo_ant(args.nc, cfg, size)
    else:
        g = A.build(args.model, args.nc, cfg or None)
    return g.with_input(*size) if tuple(g.input_size) != tuple(size) else g


def _emit(text: str, path: Optional[str]) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_describe(args) -> int:
    g = _graph(args)
    report = P.count_flops(g)
    sys.stdout.write(report.to_text())
    if args.csv:
        _emit(report.to_csv(), args.csv)
    return EXIT_OK


def _load_input(path: Path):
    data = path.read_bytes()
    if data[:4] == F.ATF_MAGIC:
        with open(path, "rb") as f:
            return F.read_atf(f)
    if data[:2] == b"P6":
        return F.decode_ppm(data)
    raise FormatError(f"{path}: neither an ATF tensor nor a binary PPM image")


def cmd_forward(args) -> int:
    x = _load_input(Path(args.input)).astype("float32", copy=False)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"input tensor must be (N, 3, H, W), got {x.shape}")
    size = tuple(x.shape[2:])
    if args.input_size_given and tuple(args.input_size) != size:
        raise GeometryError(f"--input-size {args.input_size[0]}x{args.input_size[1]} disagrees with input {size}")
    g = _graph(args, size)
    if args.weights:
        params = F.load_weights(args.weights, A.param_shapes(g))
    else:
        params = A.init_params(g, seed=args.seed)
    with single_threaded():
        heads = A.forward(g, x, params)
    dets = E.decode(heads, g.anchors, A.HEAD_STRIDES, args.conf, image_size=size)
    dets = E.nms(dets, args.iou)
    _emit(E.format_detections(dets), args.output)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(tol=args.tol, seed=args.seed)
    failed = 0
    for r in reports:
        print(r.line())
        failed += not r.passed
    print(f"{len(reports) - failed}/{len(reports)} passed")
    return EXIT_FAIL if failed else EXIT_OK


def _fmt_metric(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:.6f}"


def cmd_eval(args) -> int:
    gts = E.parse_boxes(Path(args.gt).read_text(), with_score=False, source=args.gt)
    dets = E.parse_boxes(Path(args.det).read_text(), with_score=True, source=args.det)
    m = E.mean_ap(dets, gts)
    rows = m.as_dict()
    width = max(len(k) for k in rows)
    sys.stdout.write(f"classes {len(m.classes)}  gt {len(gts)}  det {len(dets)}\n")
    for k, v in rows.items():
        sys.stdout.write(f"{k:<{width}}  {_fmt_metric(v)}\n")
    if args.csv:
        _emit(",".join(rows) + "\n" + ",".join(_fmt_metric(v) for v in rows.values()) + "\n", args.csv)
    return EXIT_OK


def cmd_prune_compare(args) -> int:
    a = P.count_flops(A.build_yolov5s(args.nc), args.input_size)
    b = P.count_flops(A.build_yolov5s_pruned(args.nc), args.input_size)
    sys.stdout.write(P.compare_text(a, b, COMPARE_STAGES))
    if args.csv:
        lines = ["stage,name,params_baseline,params_pruned,baseline_minus_pruned"]
        for r in P.compare(a, b):
            if r.stage_a in COMPARE_STAGES:
                lines.append(f"{r.stage_a},{r.name},{r.params_a},{r.params_b},{r.params_delta}")
        lines.append(f",total,{a.total_params},{b.total_params},{a.total_params - b.total_params}")
        _emit("\n".join(lines) + "\n", args.csv)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="yoloant", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_flags(p, with_model=True):
        if with_model:
            p.add_argument("--model", default="yolo-ant", choices=sorted(A.BUILDERS))
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="yolo-ant hyperparameter override, e.g. vit_sr=2,2")
        p.add_argument("--nc", type=int, default=80, help="number of classes (default 80)")
        p.add_argument("--input-size", type=_input_size, default=None, help="H or HxW (default 640)")

    p = sub.add_parser("describe", help="per-stage parameter/FLOP table")
    model_flags(p)
    p.add_argument("--csv", help="also write the table as CSV to this path ('-' for stdout)")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("forward", help="run a model on an ATF tensor or PPM image")
    p.add_argument("input")
    model_flags(p)
    p.add_argument("--weights", help="ANTW weight container (default: seeded initialization)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--iou", type=float, default=0.45)
    p.add_argument("-o", "--output", help="detections file (default stdout)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and block")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="P, R, mAP.5, mAP.5:.95 and size-split mAP.5")
    p.add_argument("gt")
    p.add_argument("det")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune-compare", help="baseline vs pruned YOLOv5-s parameter table")
    model_flags(p, with_model=False)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_prune_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = None
    try:
        args = build_parser().parse_args(argv)
        if hasattr(args, "input_size"):
            args.input_size_given = args.input_size is not None
            args.input_size = args.input_size or (640, 640)
        if getattr(args, "nc", 1) < 1:
            raise UsageError("--nc must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FormatError as exc:
        # malformed eval text is a usage problem; malformed binaries are data problems
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if getattr(args, "command", None) == "eval" else EXIT_DATA
    except (SpecError, GeometryError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
