"""Central finite-difference verification of every differentiable op.

Each registered check builds a small seeded problem, runs one backward
pass, and compares the analytic gradient of every input against central
differences (h=1e-5 in 64-bit). The relative error uses
``|a - n| / max(|a|, |n|, 1)`` elementwise so near-zero gradients are
compared absolutely.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T

FD_EPS = 1e-5
FD_TOL = 1e-4


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = FD_EPS) -> np.ndarray:
    """Central differences of f with respect to x, perturbing x in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check(loss_fn: Callable[[], T.Tensor], inputs: list[T.Tensor]) -> float:
    """Max relative error over all inputs of a scalar-valued graph."""
    loss = loss_fn()
    for t in inputs:
        t.zero_grad()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numeric_gradient(lambda: loss_fn().item(), t.data)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _weigh(out: T.Tensor, coeffs: np.ndarray) -> T.Tensor:
    # Random projection to a scalar; catches transposition bugs that a
    # plain sum() would miss.
    return T.weighted_sum(out, coeffs)


def _rand(rng, *shape) -> T.Tensor:
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


def check_matmul() -> float:
    rng = np.random.default_rng(11)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 5)
    c = rng.standard_normal((3, 5))
    return _check(lambda: _weigh(T.matmul(a, b), c), [a, b])


def check_linear() -> float:
    rng = np.random.default_rng(12)
    x, w, b = _rand(rng, 4, 6), _rand(rng, 3, 6), _rand(rng, 3)
    c = rng.standard_normal((4, 3))
    return _check(lambda: _weigh(T.linear(x, w, b), c), [x, w, b])


def check_conv2d() -> float:
    rng = np.random.default_rng(13)
    worst = 0.0
    for stride, padding in ((1, 0), (1, 1), (2, 1)):
        x, w, b = _rand(rng, 2, 3, 5, 5), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
        out = T.conv2d(x, w, b, stride=stride, padding=padding)
        c = rng.standard_normal(out.shape)
        worst = max(worst, _check(
            lambda: _weigh(T.conv2d(x, w, b, stride=stride, padding=padding), c),
            [x, w, b]))
    return worst


def check_batchnorm() -> float:
    rng = np.random.default_rng(14)
    worst = 0.0
    for shape in ((8, 4), (4, 3, 3, 3)):
        x = _rand(rng, *shape)
        gamma = T.Tensor(rng.standard_normal(shape[1]) + 1.5, requires_grad=True)
        beta = _rand(rng, shape[1])
        for training in (True, False):
            rm = rng.standard_normal(shape[1]) * 0.1
            rv = rng.random(shape[1]) + 0.5
            c = rng.standard_normal(shape)

            def loss():
                return _weigh(T.batchnorm(x, gamma, beta, rm.copy(), rv.copy(),
                                          training=training), c)

            worst = max(worst, _check(loss, [x, gamma, beta]))
    return worst


def check_relu() -> float:
    rng = np.random.default_rng(15)
    x = _rand(rng, 4, 7)
    c = rng.standard_normal((4, 7))
    return _check(lambda: _weigh(T.relu(x), c), [x])


def check_maxpool2d() -> float:
    rng = np.random.default_rng(16)
    x = _rand(rng, 2, 3, 4, 6)
    c = rng.standard_normal((2, 3, 2, 3))
    return _check(lambda: _weigh(T.maxpool2d(x, 2), c), [x])


def check_flatten() -> float:
    rng = np.random.default_rng(17)
    x = _rand(rng, 3, 2, 2, 2)
    c = rng.standard_normal((3, 8))
    return _check(lambda: _weigh(T.flatten(x), c), [x])


def check_add() -> float:
    rng = np.random.default_rng(18)
    a, b = _rand(rng, 4, 5), _rand(rng, 5)  # broadcast bias path
    c = rng.standard_normal((4, 5))
    return _check(lambda: _weigh(T.add(a, b), c), [a, b])


def check_softmax_cross_entropy() -> float:
    rng = np.random.default_rng(19)
    worst = 0.0
    logits = _rand(rng, 6, 4)
    labels = rng.integers(0, 4, size=6)
    worst = max(worst, _check(
        lambda: T.softmax_cross_entropy(logits, labels), [logits]))
    weights = rng.random(6) + 0.5
    worst = max(worst, _check(
        lambda: T.softmax_cross_entropy(logits, labels, weights), [logits]))
    return worst


def check_mlp_end_to_end() -> float:
    from .model import build_mlp

    rng = np.random.default_rng(20)
    net = build_mlp(6, [5, 4], 3, rng=np.random.default_rng(21))
    x = rng.standard_normal((5, 6))
    labels = rng.integers(0, 3, size=5)
    params = [p for _, p in net.parameters()]

    def loss():
        return T.softmax_cross_entropy(net.forward(T.Tensor(x), training=True), labels)

    return _check(loss, params)


def check_cnn_end_to_end() -> float:
    from .model import build_small_cnn

    rng = np.random.default_rng(22)
    net = build_small_cnn((1, 6, 6), [3], 2, rng=np.random.default_rng(23))
    x = rng.standard_normal((3, 1, 6, 6))
    labels = rng.integers(0, 2, size=3)
    params = [p for _, p in net.parameters()]

    def loss():
        return T.softmax_cross_entropy(net.forward(T.Tensor(x), training=True), labels)

    return _check(loss, params)


CHECKS: dict[str, Callable[[], float]] = {
    "matmul": check_matmul,
    "linear": check_linear,
    "conv2d": check_conv2d,
    "batchnorm": check_batchnorm,
    "relu": check_relu,
    "maxpool2d": check_maxpool2d,
    "flatten": check_flatten,
    "add": check_add,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "mlp_end_to_end": check_mlp_end_to_end,
    "cnn_end_to_end": check_cnn_end_to_end,
}


def run_all() -> dict[str, float]:
    return {name: fn() for name, fn in CHECKS.items()}
