"""Finite-difference gradient checks for every primitive and the full model."""

from __future__ import annotations

import numpy as np

from .diffcore import (GRUParams, Tensor, affine, concat, cross_entropy, depthwise_conv1d,
                       finite_difference_check, gru_forward, instance_stats, log, matmul, mean_axis,
                       relu, sigmoid, softmax, sqrt, std_axis, tanh)
from .network import ArchConfig, TSASAN, loss

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


def _leaf(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
    return Tensor(data, requires_grad=True)


def _probe(out: Tensor, weights: np.ndarray) -> Tensor:
    # fixed random projection turns any output into a scalar
    return (out * Tensor(weights)).sum()


def primitive_cases(seed: int = 0):
    """Yield (name, scalar function, list of input leaves)."""
    rng = np.random.default_rng(seed)

    def case(name, fn, *inputs):
        out = fn(*inputs)
        w = rng.normal(size=out.shape)
        return name, (lambda *xs: _probe(fn(*xs), w)), list(inputs)

    yield case("add", lambda a, b: a + b, _leaf(rng, 3, 4), _leaf(rng, 4))
    yield case("mul", lambda a, b: a * b, _leaf(rng, 3, 4), _leaf(rng, 3, 1))
    yield case("div", lambda a, b: a / b, _leaf(rng, 3, 4), _leaf(rng, 3, 4, low=1.0))
    yield case("pow", lambda a: a ** 3, _leaf(rng, 5, low=0.5))
    yield case("matmul", matmul, _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5))
    yield case("affine", affine, _leaf(rng, 6, 4), _leaf(rng, 4, 3), _leaf(rng, 3))
    yield case("concat", lambda a, b: concat([a, b], axis=1), _leaf(rng, 2, 3), _leaf(rng, 2, 2))
    yield case("relu", relu, Tensor(rng.choice([-1, 1], size=(4, 5)) * rng.uniform(0.1, 1, (4, 5)),
                                    requires_grad=True))
    yield case("sigmoid", sigmoid, _leaf(rng, 4, 5))
    yield case("tanh", tanh, _leaf(rng, 4, 5))
    yield case("sqrt", sqrt, _leaf(rng, 4, low=0.5))
    yield case("log", log, _leaf(rng, 4, low=0.5))
    yield case("depthwise_conv1d", depthwise_conv1d, _leaf(rng, 2, 3, 16), _leaf(rng, 3, 5), _leaf(rng, 3))
    yield case("mean_axis", lambda x: mean_axis(x, 1), _leaf(rng, 2, 3, 8))
    yield case("std_axis", lambda x: std_axis(x, 1), _leaf(rng, 2, 3, 8))
    yield case("instance_stats", lambda x: concat(list(instance_stats(x)), axis=-1), _leaf(rng, 2, 3, 16))
    yield case("softmax", softmax, _leaf(rng, 4, 6))
    labels = rng.integers(0, 6, size=4)
    yield ("cross_entropy(softmax)", lambda z: cross_entropy(softmax(z), labels), [_leaf(rng, 4, 6)])
    p = softmax(Tensor(rng.normal(size=(4, 6)))).data

    def plain_ce(q):
        return cross_entropy(q, labels)
    yield ("cross_entropy(probabilities)", plain_ce, [Tensor(p, requires_grad=True)])
    H, C = 3, 2
    yield case("gru", lambda x, wi, wh, bi, bh: gru_forward(x, GRUParams(wi, wh, bi, bh)),
               _leaf(rng, 2, C, 10), Tensor(rng.normal(0, 0.5, (C, 3 * H)), requires_grad=True),
               Tensor(rng.normal(0, 0.5, (H, 3 * H)), requires_grad=True),
               _leaf(rng, 3 * H), _leaf(rng, 3 * H))


def check_case(fn, inputs, h: float = 1e-4) -> float:
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            args = list(inputs)
            args[k] = xk
            return fn(*args)
        for other in inputs:
            other.grad = np.zeros_like(other.data)
        worst = max(worst, finite_difference_check(f, x, h=h))
    return worst


def model_gradient_error(v: int = 3, n: int = 2, seed: int = 0, sain: str = "adaptive",
                         tsam: bool = True, h: float = 1e-4) -> dict:
    """Worst relative error per parameter tensor of the batch loss of a small model."""
    rng = np.random.default_rng(seed + 100)
    model = TSASAN(ArchConfig(v=v, sain=sain, tsam=tsam), seed=seed)
    # move biases off zero so every ReLU branch sees varied inputs
    for name, p in model.params.items():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0, 0.3, size=p.shape)
    x = rng.normal(size=(n, v, model.arch.T))
    y = rng.integers(0, model.arch.n_classes, size=n)

    def f(_):
        return loss(model(x), y)
    return {name: finite_difference_check(f, p, h=h) for name, p in model.params.items()}


def gradient_suite(seed: int = 0):
    results = []
    for name, fn, inputs in primitive_cases(seed):
        results.append((name, check_case(fn, inputs), PRIMITIVE_TOL))
    errs = model_gradient_error(seed=seed)
    results.append(("TSA-SAN loss (v=3, N=2)", max(errs.values()), MODEL_TOL))
    return results


def run_selfcheck(out=print) -> bool:
    ok = True
    for name, err, tol in gradient_suite():
        passed = err < tol
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name:<32} max rel err {err:.2e} (tol {tol:g})")
    return ok
