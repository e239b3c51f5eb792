"""Finite-difference verification of every layer kind and every loss gradient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .nn import (
    NeuralNet,
    batchnorm2d,
    conv2d,
    dense,
    flatten,
    maxpool2d,
    relu,
    reshape,
    tanh,
    upsample2d,
)

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} max rel err {self.max_rel_error:.2e}"


def central_difference(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of ``f()`` w.r.t. the array ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_net(net: NeuralNet, x: np.ndarray, seed: int = 0) -> float:
    """Compare backward() against finite differences for loss = <r, net(x)>."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((x.shape[0],) + net.output_shape)

    def loss() -> float:
        return float((net.forward(x, training=True) * r).sum())

    net.forward(x, training=True)
    gp, gx = net.backward(r)
    num_p = central_difference(loss, net.params)
    num_x = central_difference(loss, x)
    return max(relative_error(gp, num_p), relative_error(gx, num_x))


def layer_cases() -> dict[str, tuple[NeuralNet, tuple[int, ...]]]:
    """One small net per layer kind, with the per-sample input shape."""
    cases = {
        "dense": NeuralNet((5,), [dense(5, 4), dense(4, 3)]),
        "conv2d/same": NeuralNet((2, 5, 5), [conv2d(2, 3, 3), flatten(), dense(75, 2)]),
        "conv2d/valid-stride2": NeuralNet((2, 7, 7), [conv2d(2, 2, 3, stride=2, padding="valid"), flatten(), dense(18, 2)]),
        "relu": NeuralNet((6,), [dense(6, 6), relu(), dense(6, 2)]),
        "tanh": NeuralNet((6,), [dense(6, 6), tanh(), dense(6, 2)]),
        "flatten": NeuralNet((2, 3, 3), [flatten(), dense(18, 3)]),
        "reshape": NeuralNet((4,), [dense(4, 18), reshape(2, 3, 3), conv2d(2, 1, 3), flatten(), dense(9, 2)]),
        "maxpool2d": NeuralNet((2, 5, 5), [conv2d(2, 2, 3), maxpool2d(2), flatten(), dense(8, 2)]),
        "upsample2d": NeuralNet((1, 3, 3), [conv2d(1, 2, 3), upsample2d(2), flatten(), dense(72, 2)]),
        "batchnorm2d": NeuralNet((2, 4, 4), [conv2d(2, 3, 3), batchnorm2d(3), flatten(), dense(48, 2)]),
    }
    return {name: (net, net.input_shape) for name, net in cases.items()}


def check_layers(seed: int = 0) -> list[CheckResult]:
    results = []
    for i, (name, (net, shape)) in enumerate(layer_cases().items()):
        rng = np.random.default_rng(seed + i)
        net.glorot_init(rng)
        net.params += 0.1 * rng.standard_normal(net.params.size)  # nonzero biases, non-unit BN scale
        x = rng.standard_normal((3,) + shape)
        results.append(CheckResult(f"layer:{name}", check_net(net, x, seed + i)))
    return results


def _tiny_classifier(rng: np.random.Generator, hidden: int) -> NeuralNet:
    net = NeuralNet((1, 4, 4), [conv2d(1, 2, 3), relu(), flatten(), dense(32, hidden), tanh(), dense(hidden, 4)])
    return net.glorot_init(rng)


def check_losses(seed: int = 0) -> list[CheckResult]:
    """Parameter and input gradients of each training loss vs finite differences."""
    rng = np.random.default_rng(seed)
    results = []
    x = rng.standard_normal((3, 1, 4, 4))
    student = _tiny_classifier(rng, 5)
    devices = [_tiny_classifier(rng, h) for h in (3, 4)]

    for kind in losses.LOSS_KINDS:
        def value() -> float:
            u = student.forward(x, training=True)
            vs = [d.forward(x, training=True) for d in devices]
            return losses.disagreement(kind, u, vs)[0]

        u = student.forward(x, training=True)
        vs = [d.forward(x, training=True) for d in devices]
        _, du, dvs = losses.disagreement(kind, u, vs)
        gp, gx = student.backward(du)
        err = relative_error(gp, central_difference(value, student.params))
        for d, dv in zip(devices, dvs):
            d.forward(x, training=True)
            gd, gxd = d.backward(dv)
            gx = gx + gxd
            err = max(err, relative_error(gd, central_difference(value, d.params)))
        err = max(err, relative_error(gx, central_difference(value, x)))
        results.append(CheckResult(f"loss:{kind}", err))

    labels = rng.integers(0, 4, size=3)

    def ce() -> float:
        return losses.cross_entropy(losses.softmax(student.forward(x, training=True)), labels)

    probs = losses.softmax(student.forward(x, training=True))
    gp, _ = student.backward(losses.cross_entropy_logit_grad(probs, labels))
    results.append(CheckResult("loss:cross_entropy", relative_error(gp, central_difference(ce, student.params))))

    w = rng.standard_normal(7)
    anchor = rng.standard_normal(7)
    g = losses.prox_regularizer_grad(w, anchor, 0.7)
    num = central_difference(lambda: losses.prox_regularizer(w, anchor, 0.7), w)
    results.append(CheckResult("loss:prox_l2", relative_error(g, num)))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_layers(seed) + check_losses(seed)
