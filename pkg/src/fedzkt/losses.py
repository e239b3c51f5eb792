"""Training and disagreement losses with their analytic gradients.

Every loss reduces over the batch with the mean. Gradient helpers return the
derivative of that batch-mean value.

Disagreement between a student and an ensemble of device models comes in
three flavours (``LOSS_KINDS``):

``kl``  KL(U || mean_k V_k) on softmax outputs
``l1``  ||u - mean_k v_k||_1 on raw logits
``sl``  ||U - mean_k V_k||_1 on softmax outputs
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import NeuralNet

LOSS_KINDS = ("kl", "l1", "sl")
PROB_FLOOR = 1e-12


def _check_kind(kind: str) -> None:
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[-1]):
        raise ValueError(f"labels must lie in [0, {probs.shape[-1]})")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def cross_entropy_logit_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean CE)/d(logits) for ``probs = softmax(logits)``."""
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def kl_loss(student: np.ndarray, ensemble: np.ndarray) -> float:
    """Batch mean of sum_i U_i log(U_i / V_i); terms with U_i = 0 contribute 0."""
    _same_shape(student, ensemble)
    u = student
    v = np.maximum(ensemble, PROB_FLOOR)
    terms = np.where(u > 0, u * (np.log(np.maximum(u, PROB_FLOOR)) - np.log(v)), 0.0)
    return float(terms.sum(axis=-1).mean())


def kl_loss_grad(student: np.ndarray, ensemble: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _same_shape(student, ensemble)
    n = student.shape[0]
    v = np.maximum(ensemble, PROB_FLOOR)
    du = np.where(student > 0, np.log(np.maximum(student, PROB_FLOOR)) - np.log(v) + 1.0, 0.0) / n
    dv = np.where(ensemble > PROB_FLOOR, -student / v, 0.0) / n
    return du, dv


def sl_loss(student: np.ndarray, ensemble: np.ndarray) -> float:
    _same_shape(student, ensemble)
    return float(np.abs(student - ensemble).sum(axis=-1).mean())


def sl_loss_grad(student: np.ndarray, ensemble: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _same_shape(student, ensemble)
    s = np.sign(student - ensemble) / student.shape[0]
    return s, -s


def l1_logit_loss(student_logits: np.ndarray, device_logits: Sequence[np.ndarray]) -> float:
    if len(device_logits) == 0:
        raise ValueError("l1_logit_loss needs at least one device")
    for v in device_logits:
        _same_shape(student_logits, v)
    mean_v = sum(device_logits) / len(device_logits)
    return float(np.abs(student_logits - mean_v).sum(axis=-1).mean())


def prox_regularizer(w_now: np.ndarray, w_anchor: np.ndarray, coefficient: float) -> float:
    """``coefficient * ||w_now - w_anchor||_2^2``."""
    _same_shape(w_now, w_anchor)
    if coefficient < 0:
        raise ValueError("coefficient must be non-negative")
    d = w_now - w_anchor
    return float(coefficient * (d @ d))


def prox_regularizer_grad(w_now: np.ndarray, w_anchor: np.ndarray, coefficient: float) -> np.ndarray:
    _same_shape(w_now, w_anchor)
    return 2.0 * coefficient * (w_now - w_anchor)


def disagreement(
    kind: str, student_logits: np.ndarray, device_logits: Sequence[np.ndarray]
) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Student-vs-ensemble loss and its gradients w.r.t. every set of logits.

    For ``kl`` and ``sl`` the ensemble is the mean of the devices' softmax
    outputs; for ``l1`` it is the mean of their raw logits.

    Returns ``(value, d_student_logits, [d_device_logits, ...])``.
    """
    _check_kind(kind)
    k = len(device_logits)
    if k == 0:
        raise ValueError("need at least one device model")
    if kind == "l1":
        value = l1_logit_loss(student_logits, device_logits)
        s = np.sign(student_logits - sum(device_logits) / k) / student_logits.shape[0]
        return value, s, [-s / k] * k

    u = softmax(student_logits)
    vs = [softmax(v) for v in device_logits]
    ens = sum(vs) / k
    if kind == "kl":
        value = kl_loss(u, ens)
        du, dens = kl_loss_grad(u, ens)
    else:
        value = sl_loss(u, ens)
        du, dens = sl_loss_grad(u, ens)
    d_student = softmax_backward(u, du)
    d_devices = [softmax_backward(v, dens / k) for v in vs]
    return value, d_student, d_devices


def _input_gradient(kind: str, student: NeuralNet, devices: Sequence[NeuralNet], x: np.ndarray) -> np.ndarray:
    for net in devices:
        if net.input_shape != student.input_shape or net.output_shape != student.output_shape:
            raise ValueError(
                f"device net {net.input_shape}->{net.output_shape} incompatible with "
                f"student {student.input_shape}->{student.output_shape}"
            )
    u = student.forward(x, training=True)
    vs = [net.forward(x, training=True) for net in devices]
    _, du, dvs = disagreement(kind, u, vs)
    _, dx = student.backward(du, param_grads=False)
    for net, dv in zip(devices, dvs):
        dx = dx + net.backward(dv, param_grads=False)[1]
    return dx


def input_gradient_norm(kind: str, student: NeuralNet, devices: Sequence[NeuralNet], x: np.ndarray) -> float:
    """l2 norm of d(batch-mean disagreement)/dx, backpropagated through every net."""
    return float(np.linalg.norm(_input_gradient(kind, student, devices, x)))


def per_sample_input_gradient_norms(
    kind: str, student: NeuralNet, devices: Sequence[NeuralNet], x: np.ndarray
) -> np.ndarray:
    """Norm of each sample's own loss gradient w.r.t. that sample.

    Valid for nets without cross-sample coupling (no batchnorm in training
    mode), which holds for every classifier in the model zoo.
    """
    dx = _input_gradient(kind, student, devices, x) * x.shape[0]
    return np.linalg.norm(dx.reshape(x.shape[0], -1), axis=1)
