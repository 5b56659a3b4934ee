"""Central finite-difference checks for every hand-written gradient.

The error reported for a check is the normwise relative error
``||analytic - numeric|| / max(||analytic||, ||numeric||)``; the worst value
over all trials and parameter tensors is what gets compared to the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import alignment, network
from .alignment import FocalGate
from .numerics import RngStream

__all__ = [
    "CheckResult",
    "relative_error",
    "numeric_grad",
    "check_ssa_grad",
    "check_layers",
    "check_end_to_end",
    "run_suite",
]


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)


def relative_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(fn: Callable[[], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``fn()`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return g


def check_ssa_grad(seed: int = 0, trials: int = 20, shape=(3, 3, 2, 4), h: float = 1e-4,
                   tol: float = 1e-5, grad_fn=None) -> CheckResult:
    grad_fn = grad_fn or alignment.ssa_loss_grad
    rng = RngStream(seed).spawn(1)
    gate = FocalGate(rho=1.0, loss_self=1.0, loss_other=0.5, beta=2.0)
    worst = 0.0
    for _ in range(trials):
        fm = rng.normal(shape)
        target = rng.normal(shape[:3] + (shape[3] + 1,))
        analytic = grad_fn(fm, target, gate)
        numeric = numeric_grad(lambda: alignment.ssa_loss(fm, target, gate), fm, h)
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult("ssa_loss_grad", worst, tol)


def _layer_trials(kind: str, rng: RngStream):
    """(loss closure, [(analytic grad, tensor)]) for one random instance of a layer."""
    if kind == "conv3d":
        x = rng.normal((2, 4, 4, 4, 2))
        w = rng.normal((3, 3, 3, 2, 3))
        b = rng.normal(3)
        proj = rng.normal((2, 4, 4, 4, 3))
        y, cache = network.conv3d_forward(x, w, b)
        dx, dw, db = network.conv3d_backward(cache, proj)

        def loss():
            return float((network.conv3d_forward(x, w, b)[0] * proj).sum())

        return loss, [(dx, x), (dw, w), (db, b)]
    if kind == "relu":
        x = rng.normal((2, 2, 2, 2, 3))
        x[np.abs(x) < 1e-2] += 0.1  # keep clear of the kink
        proj = rng.normal(x.shape)
        _, mask = network.relu_forward(x)

        def loss():
            return float((network.relu_forward(x)[0] * proj).sum())

        return loss, [(network.relu_backward(mask, proj), x)]
    if kind == "maxpool3d":
        # distinct, well-separated values so the argmax is stable under h
        x = rng.permutation(2 * 4 * 4 * 4 * 2)
        x = np.asarray(x, dtype=np.float64).reshape(2, 4, 4, 4, 2) * 0.1
        proj = rng.normal((2, 2, 2, 2, 2))
        _, idx = network.maxpool3d_forward(x)

        def loss():
            return float((network.maxpool3d_forward(x)[0] * proj).sum())

        return loss, [(network.maxpool3d_backward(idx, proj), x)]
    if kind == "gavgpool":
        x = rng.normal((2, 2, 3, 2, 4))
        proj = rng.normal((2, 4))
        _, shape = network.gavgpool_forward(x)

        def loss():
            return float((network.gavgpool_forward(x)[0] * proj).sum())

        return loss, [(network.gavgpool_backward(shape, proj), x)]
    if kind == "dense":
        x = rng.normal((3, 5))
        w = rng.normal((5, 4))
        b = rng.normal(4)
        proj = rng.normal((3, 4))
        dx, dw, db = network.dense_backward(x, w, proj)

        def loss():
            return float((network.dense_forward(x, w, b)[0] * proj).sum())

        return loss, [(dx, x), (dw, w), (db, b)]
    if kind == "softmax_xent":
        logits = rng.normal(6)
        label = rng.randint(6)
        _, d = network.softmax_xent(logits, label)
        return (lambda: network.softmax_xent(logits, label)[0]), [(d, logits)]
    raise ValueError(kind)


LAYER_CHECKS = ("conv3d", "relu", "maxpool3d", "gavgpool", "dense", "softmax_xent")


def check_layers(seed: int = 0, trials: int = 20, h: float = 1e-5,
                 tol: float = 1e-6) -> list[CheckResult]:
    out = []
    for k, kind in enumerate(LAYER_CHECKS):
        rng = RngStream(seed).spawn(100 + k)
        worst = 0.0
        for _ in range(trials):
            loss, pairs = _layer_trials(kind, rng)
            for analytic, tensor in pairs:
                worst = max(worst, relative_error(analytic, numeric_grad(loss, tensor, h)))
        out.append(CheckResult(kind, worst, tol))
    return out


def toy_networks(seed: int = 0, classes: int = 4):
    """Two toy nets on 4x4x4 single-channel clips; alignment layer 2x2x2."""
    root = RngStream(seed)
    nets = []
    for key, widths in ((1, (4, 6)), (2, (4, 5))):
        layers = network.mini_gesture_net(1, classes, widths)
        nets.append(network.init_network(layers, root.spawn(key), f"m{key}", (4, 4, 4, 1)))
    return nets


def check_end_to_end(seed: int = 0, batch: int = 3, lam: float = 0.05, beta: float = 2.0,
                     h: float = 1e-4, tol: float = 1e-5) -> CheckResult:
    """Total objective of a toy network, finite-differenced on every parameter.

    Network m is trained against a fixed peer n; the gate comes from
    hand-picked losses so it is positive and held constant, as in training.
    """
    net, peer = toy_networks(seed)
    rng = RngStream(seed).spawn(7)
    for p in net.params:
        if "b" in p:
            p["b"][:] = rng.normal(p["b"].shape, 0.1)
    x = rng.normal((batch, 4, 4, 4, 1))
    x_peer = x + rng.normal(x.shape, 0.3)
    labels = np.array([rng.randint(net.classes) for _ in range(batch)])
    _, target, _ = network.network_forward(peer, x_peer)
    gate = alignment.focal_rho(1.5, 1.0, beta)

    def objective():
        logits, align, _ = network.network_forward(net, x)
        losses, _ = network.softmax_xent_batch(logits, labels)
        values, _ = alignment.ssa_loss_and_grad_batch(align, target, gate.rho, need_grad=False)
        return float(losses.mean() + lam * values.mean())

    logits, align, cache = network.network_forward(net, x)
    _, d_logits = network.softmax_xent_batch(logits, labels)
    _, g_align = alignment.ssa_loss_and_grad_batch(align, target, gate.rho)
    grads = network.network_backward(net, cache, d_logits, lam * g_align / batch)
    worst = 0.0
    for p, g in zip(net.params, grads):
        for k in p:
            worst = max(worst, relative_error(g[k], numeric_grad(objective, p[k], h)))
    return CheckResult("end_to_end", worst, tol)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return [check_ssa_grad(seed), *check_layers(seed), check_end_to_end(seed)]
