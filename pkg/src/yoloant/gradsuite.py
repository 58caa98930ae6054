"""Gradient checks of every primitive and block at miniature geometry.

Each case builds ``(fn, x, params)`` from a seeded generator; ``fn`` has the
``fn(x, params, ops)`` signature expected by :func:`diffcheck.gradcheck`.
Everything runs in float64.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import blocks as B
from .diffcheck import GradReport, gradcheck
from .params import RandomInit


def _randn(rng, *shape):
    return rng.standard_normal(shape)


def _norm_params(rng, c):
    # non-trivial statistics so the normalization is not the identity
    return {"gamma": 1 + 0.1 * _randn(rng, c), "beta": 0.1 * _randn(rng, c),
            "mean": 0.1 * _randn(rng, c), "var": 1 + 0.5 * rng.random(c)}


def _primitive_cases() -> Dict[str, Callable]:
    def conv_dense(rng):
        p = {"w": _randn(rng, 4, 3, 3, 3), "b": _randn(rng, 4)}
        return lambda x, p, ops: ops.conv2d(x, p["w"], p["b"], stride=2, padding=1), _randn(rng, 2, 3, 7, 6), p

    def conv_grouped(rng):
        p = {"w": _randn(rng, 4, 2, 3, 3)}
        return lambda x, p, ops: ops.conv2d(x, p["w"], None, stride=1, padding=1, groups=2), _randn(rng, 1, 4, 5, 5), p

    def conv_depthwise(rng):
        p = {"w": _randn(rng, 3, 1, 5, 5)}
        return lambda x, p, ops: ops.conv2d(x, p["w"], None, padding=2, groups=3), _randn(rng, 1, 3, 6, 6), p

    def tconv(rng):
        p = {"w": _randn(rng, 3, 2, 3, 3), "b": _randn(rng, 2)}
        fn = lambda x, p, ops: ops.transposed_conv(x, p["w"], p["b"], stride=2, padding=1, output_padding=1)
        return fn, _randn(rng, 1, 3, 4, 4), p

    def batchnorm(rng):
        p = _norm_params(rng, 3)
        fn = lambda x, p, ops: ops.batchnorm_infer(x, p["gamma"], p["beta"], p["mean"], p["var"])
        return fn, _randn(rng, 2, 3, 3, 3), p

    def layernorm(rng):
        p = {"gamma": 1 + 0.1 * _randn(rng, 4), "beta": 0.1 * _randn(rng, 4)}
        return lambda x, p, ops: ops.layernorm_channels(x, p["gamma"], p["beta"]), _randn(rng, 1, 4, 3, 3), p

    def act(kind):
        return lambda rng: (lambda x, p, ops: ops.activation(x, kind), _randn(rng, 1, 2, 4, 4), {})

    def pool(kind, k, s, pad):
        return lambda rng: (lambda x, p, ops: ops.pool(x, kind, k, s, pad), _randn(rng, 1, 2, 6, 6), {})

    def upsample(rng):
        return lambda x, p, ops: ops.upsample_nearest(x, 2), _randn(rng, 1, 2, 3, 3), {}

    def concat(rng):
        p = {"y": _randn(rng, 1, 3, 4, 4)}
        return lambda x, p, ops: ops.concat_channels([x, p["y"]]), _randn(rng, 1, 2, 4, 4), p

    def add(rng):
        p = {"y": _randn(rng, 1, 2, 3, 3)}
        return lambda x, p, ops: ops.add(x, p["y"]), _randn(rng, 1, 2, 3, 3), p

    def scale(rng):
        return lambda x, p, ops: ops.scale(x, 0.37), _randn(rng, 1, 2, 3, 3), {}

    def linear(rng):
        p = {"w": _randn(rng, 4, 5), "b": _randn(rng, 5)}
        return lambda x, p, ops: ops.linear(x, p["w"], p["b"]), _randn(rng, 2, 3, 4), p

    def matmul(rng):
        p = {"b": _randn(rng, 2, 4, 3)}
        return lambda x, p, ops: ops.matmul(x, p["b"]), _randn(rng, 2, 5, 4), p

    def softmax(rng):
        return lambda x, p, ops: ops.softmax_rows(x), _randn(rng, 2, 3, 5), {}

    def reshape(rng):
        return lambda x, p, ops: ops.reshape(x, (2, 12)), _randn(rng, 1, 2, 3, 4), {}

    def transpose(rng):
        return lambda x, p, ops: ops.transpose(x, (0, 2, 3, 1)), _randn(rng, 1, 2, 3, 4), {}

    return {
        "conv2d": conv_dense,
        "conv2d.grouped": conv_grouped,
        "conv2d.depthwise": conv_depthwise,
        "transposed_conv": tconv,
        "batchnorm_infer": batchnorm,
        "layernorm_channels": layernorm,
        "activation.silu": act("silu"),
        "activation.gelu": act("gelu"),
        "pool.avg": pool("avg", 2, 2, 0),
        "pool.max": pool("max", 3, 1, 1),
        "upsample_nearest": upsample,
        "concat_channels": concat,
        "add": add,
        "scale": scale,
        "linear": linear,
        "matmul": matmul,
        "softmax_rows": softmax,
        "reshape": reshape,
        "transpose": transpose,
    }


def _perturb_norms(tree, rng):
    """Replace identity-initialised norms with random statistics (in place)."""
    if isinstance(tree, dict):
        if "gamma" in tree:
            c = tree["gamma"].shape[0]
            fresh = _norm_params(rng, c)
            for key in tree:
                tree[key] = fresh[key]
            return tree
        for v in tree.values():
            _perturb_norms(v, rng)
    elif isinstance(tree, list):
        for v in tree:
            _perturb_norms(v, rng)
    return tree


def _block_cases() -> Dict[str, Callable]:
    def make(init, fn, shape):
        def case(rng):
            params = _perturb_norms(init(RandomInit(rng, np.float64)), rng)
            return fn, _randn(rng, *shape), params

        return case

    blk = B.DslkBlockSpec(4, k_large=5, k_small=3, expand=2.0)
    blk0 = B.DslkBlockSpec(4, k_large=3, k_small=0, expand=1.0)
    lay = B.layer_block_spec(4, 5, 3, 1.5)
    vit = B.VitSpec(4, sr=2, heads=2, ffn_expand=2.0)
    vit_ln = B.VitSpec(4, sr=2, heads=2, ffn_expand=1.0, norm="layer")
    return {
        "CBS": make(lambda pf: B.init_cbs(pf, 3, 4, 3), lambda x, p, ops: B.cbs_forward(x, p, stride=2, ops=ops),
                    (1, 3, 6, 6)),
        "depthwise": make(lambda pf: B.init_depthwise(pf, 3, 5), lambda x, p, ops: B.depthwise_forward(x, p, ops),
                          (1, 3, 5, 5)),
        "pointwise": make(lambda pf: B.init_pointwise(pf, 3, 6), lambda x, p, ops: B.pointwise_forward(x, p, ops),
                          (1, 3, 4, 4)),
        "DSLK-Block": make(lambda pf: B.init_dslk_block(pf, blk),
                           lambda x, p, ops: B.dslk_block_forward(x, blk, p, ops), (1, 4, 5, 5)),
        "DSLK-Block.shortcut": make(lambda pf: B.init_dslk_block(pf, blk0),
                                    lambda x, p, ops: B.dslk_block_forward(x, blk0, p, ops), (1, 4, 4, 4)),
        "DSLK-Layer": make(lambda pf: B.init_dslk_layer(pf, 2, 4, 2, lay),
                           lambda x, p, ops: B.dslk_layer_forward(x, 2, lay, p, ops), (1, 2, 5, 5)),
        "f_local": make(lambda pf: B.init_f_local(pf, vit), lambda x, p, ops: B.f_local(x, vit, p, ops),
                        (1, 4, 4, 4)),
        "MHSA": make(lambda pf: B.init_mhsa(pf, vit.mhsa), lambda x, p, ops: B.mhsa(x, vit.mhsa, p, ops),
                     (2, 4, 2, 3)),
        "f_global": make(lambda pf: B.init_f_global(pf, vit), lambda x, p, ops: B.f_global(x, vit, p, ops),
                         (1, 4, 4, 4)),
        "FFN": make(lambda pf: B.init_ffn(pf, 4, 8), lambda x, p, ops: B.ffn(x, p, ops), (1, 4, 3, 3)),
        "DSLKVit": make(lambda pf: B.init_dslkvit(pf, vit), lambda x, p, ops: B.dslkvit_forward(x, vit, p, ops),
                        (1, 4, 4, 4)),
        "DSLKVit.layernorm": make(lambda pf: B.init_dslkvit(pf, vit_ln),
                                  lambda x, p, ops: B.dslkvit_forward(x, vit_ln, p, ops), (1, 4, 4, 4)),
        "C3": make(lambda pf: B.init_c3(pf, 4, 4, 1), lambda x, p, ops: B.c3_forward(x, p, shortcut=True, ops=ops),
                   (1, 4, 4, 4)),
        "SPPF": make(lambda pf: B.init_sppf(pf, 4, 4), lambda x, p, ops: B.sppf_forward(x, p, k=3, ops=ops),
                     (1, 4, 5, 5)),
    }


PRIMITIVES = _primitive_cases()
BLOCKS = _block_cases()
CASES = {**PRIMITIVES, **BLOCKS}


def run_suite(
    tol: float = 1e-4,
    seed: int = 0,
    n_probes: int = 16,
    names: Optional[Sequence[str]] = None,
) -> List[GradReport]:
    """Gradcheck every case (or ``names``) in a fixed order."""
    reports = []
    for i, name in enumerate(names or CASES):
        rng = np.random.default_rng([seed, i])
        fn, x, params = CASES[name](rng)
        reports.append(gradcheck(fn, x, params, name=name, seed=seed + i, tol=tol, n_probes=n_probes))
    return reports
