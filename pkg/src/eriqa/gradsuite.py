"""Randomised finite-difference suite over every primitive and fusion module."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .model import BottleneckParams, FebParams, MafeParams, bottleneck_fusion, cosine_fusion, feb_forward, mafe_fusion
from .tensor import Tensor


def _params_of(p):
    return [t for _, t in p.params("p")]


def _module(kind):
    """Wrap a fusion module as op(f_d, f_er, *params) with fresh params per trial."""

    def build(rng):
        c = 3
        if kind == "feb":
            p = FebParams.init(rng, 2, c, np.float64)
            return (lambda x, *_: feb_forward(p, x)), [(2, 2, 5, 5)], _params_of(p)
        if kind == "cosine_fusion":
            return cosine_fusion, [(2, c, 4, 4), (2, c, 4, 4)], []
        if kind == "bottleneck_fusion":
            p = BottleneckParams.init(rng, c, np.float64)
            return (lambda a, b, *_: bottleneck_fusion(p, a, b)), [(2, c, 4, 4), (2, c, 4, 4)], _params_of(p)
        p = MafeParams.init(rng, c, np.float64)
        return (lambda a, b, *_: mafe_fusion(p, a, b)), [(2, c, 4, 4), (2, c, 4, 4)], _params_of(p)

    return build


def _primitive(op, shapes):
    return lambda rng: (op, shapes, [])


SUITE = {
    "conv2d_3x3": _primitive(lambda x, w, b: T.conv2d(x, w, b, padding=1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
    "conv2d_1x1": _primitive(lambda x, w, b: T.conv2d(x, w, b), [(2, 3, 4, 4), (2, 3, 1, 1), (2,)]),
    "relu": _primitive(T.relu, [(2, 3, 4, 4)]),
    "sigmoid": _primitive(T.sigmoid, [(2, 5)]),
    "add_channel": _primitive(T.add, [(2, 3, 3, 3), (2, 3)]),
    "mul_channel": _primitive(T.mul, [(2, 3, 3, 3), (2, 3)]),
    "concat_channels": _primitive(T.concat_channels, [(2, 2, 3, 3), (2, 3, 3, 3)]),
    "global_avg_pool": _primitive(T.global_avg_pool, [(2, 3, 4, 4)]),
    "channel_cosine": _primitive(T.channel_cosine, [(2, 3, 4, 4), (2, 3, 4, 4)]),
    "bilinear_pool": _primitive(T.bilinear_pool, [(2, 3, 3, 3), (2, 2, 3, 3)]),
    "max_pool2": _primitive(T.max_pool2, [(2, 2, 4, 4)]),
    "linear": _primitive(T.linear, [(3, 4), (2, 4), (2,)]),
    "resize_nearest": _primitive(lambda x: T.resize_nearest(x, (5, 7)), [(2, 3, 2, 3)]),
    "scale": _primitive(lambda x: T.scale(x, -2.5), [(2, 3)]),
    "slice_channels": _primitive(lambda x: T.slice_channels(x, 1, 3), [(2, 4, 3, 3)]),
    "reshape": _primitive(lambda x: T.reshape(x, (3, 8)), [(2, 3, 4)]),
    "mean_all": _primitive(lambda x: T.reshape(T.mean_all(x), (1,)), [(2, 3, 4)]),
    "cross_entropy": _primitive(lambda z: T.cross_entropy(z, [1, 0, 3]), [(3, 4)]),
    "mse": _primitive(lambda z: T.mse(z, np.array([0.5, -1.0, 2.0])), [(3,)]),
    "feb": _module("feb"),
    "cosine_fusion": _module("cosine_fusion"),
    "bottleneck_fusion": _module("bottleneck_fusion"),
    "mafe_fusion": _module("mafe_fusion"),
}


@dataclass
class SuiteRow:
    name: str
    trials: int
    max_rel_error: float
    passed: bool
    seconds: float


def check_one(name, trial, seed=0, tol=1e-4):
    """One randomised trial: a random projection turns the op output into a scalar."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, trial, sum(map(ord, name))]))
    op, shapes, params = SUITE[name](rng)
    inputs = [Tensor(rng.standard_normal(s)) for s in shapes] + params
    n_data = len(shapes)
    out = op(*inputs[:n_data])
    proj = Tensor(rng.standard_normal(out.shape))
    return grad_check(lambda *a: T.sum_all(T.mul(op(*a[:n_data]), proj)), inputs, tol=tol)


def run_suite(trials=20, seed=0, names=None, tol=1e-4):
    rows = []
    for name in names or SUITE:
        t0 = time.perf_counter()
        worst, ok = 0.0, True
        for trial in range(trials):
            rep = check_one(name, trial, seed, tol)
            worst = max(worst, rep.max_rel_error)
            ok = ok and rep.passed
        rows.append(SuiteRow(name, trials, worst, ok, time.perf_counter() - t0))
    return rows
