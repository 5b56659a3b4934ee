"""A small 3D convolutional classifier with hand-written backward passes.

All activations are batch-first and channels-last: ``(N, W, H, T, C)``.
Every layer function returns its output together with whatever the matching
backward function needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import RngStream, ShapeError

__all__ = [
    "LayerSpec",
    "ModalityNetwork",
    "ForwardCache",
    "mini_gesture_net",
    "init_network",
    "conv3d_forward",
    "conv3d_backward",
    "relu_forward",
    "relu_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "gavgpool_forward",
    "gavgpool_backward",
    "dense_forward",
    "dense_backward",
    "softmax",
    "softmax_xent",
    "softmax_xent_batch",
    "network_forward",
    "network_backward",
]

LAYER_KINDS = ("conv3d", "relu", "maxpool3d", "gavgpool", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    cin: int = 0
    cout: int = 0
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: int = 1
    pad: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3d", "dense") and (self.cin <= 0 or self.cout <= 0):
            raise ValueError(f"{self.kind} needs positive channel counts")
        if self.kind == "conv3d":
            if any(k <= 0 for k in self.kernel) or self.stride <= 0:
                raise ValueError("kernel extents and stride must be positive")
            if any(self.pad >= k for k in self.kernel) or self.pad < 0:
                raise ValueError("padding must be smaller than the kernel extent")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout,
                "kernel": list(self.kernel), "stride": self.stride, "pad": self.pad}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(kind=d["kind"], cin=d["cin"], cout=d["cout"],
                   kernel=tuple(d["kernel"]), stride=d["stride"], pad=d["pad"])


@dataclass
class ModalityNetwork:
    modality: str
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    align_index: int
    input_extents: tuple[int, int, int, int]

    @property
    def classes(self) -> int:
        return self.layers[-1].cout

    def align_extents(self) -> tuple[int, int, int, int]:
        return _trace_shapes(self.layers, self.input_extents)[self.align_index]

    def copy(self) -> "ModalityNetwork":
        return ModalityNetwork(
            self.modality, list(self.layers),
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            self.align_index, self.input_extents,
        )


@dataclass
class ForwardCache:
    entries: list = field(default_factory=list)


def mini_gesture_net(in_channels: int = 1, classes: int = 8,
                     widths: Sequence[int] = (8, 16, 32)) -> list[LayerSpec]:
    """Conv-ReLU blocks separated by 2x max pooling, then global pool and dense.

    The default widths give the 16^3 -> 4x4x4x32 alignment layer; pass
    ``widths=(4, 6)`` for a toy net on 4^3 inputs.
    """
    layers = []
    cin = in_channels
    for i, width in enumerate(widths):
        if i > 0:
            layers.append(LayerSpec("maxpool3d"))
        layers.append(LayerSpec("conv3d", cin=cin, cout=width))
        layers.append(LayerSpec("relu"))
        cin = width
    layers.append(LayerSpec("gavgpool"))
    layers.append(LayerSpec("dense", cin=cin, cout=classes))
    return layers


def _trace_shapes(layers, input_extents):
    """Output extents ``(W, H, T, C)`` (or ``(C,)``) after each layer."""
    shape = tuple(input_extents)
    out = []
    for i, ls in enumerate(layers):
        if ls.kind == "conv3d":
            if len(shape) != 4 or shape[3] != ls.cin:
                raise ShapeError(f"layer {i}: conv3d expects {ls.cin} input channels, got {shape}")
            sp = tuple((n + 2 * ls.pad - k) // ls.stride + 1
                       for n, k in zip(shape[:3], ls.kernel))
            if any(n <= 0 for n in sp):
                raise ShapeError(f"layer {i}: input {shape} too small for kernel")
            shape = sp + (ls.cout,)
        elif ls.kind == "maxpool3d":
            if len(shape) != 4 or any(n % 2 for n in shape[:3]):
                raise ShapeError(f"layer {i}: maxpool needs even extents, got {shape}")
            shape = tuple(n // 2 for n in shape[:3]) + (shape[3],)
        elif ls.kind == "gavgpool":
            if len(shape) != 4:
                raise ShapeError(f"layer {i}: gavgpool needs a 4-D input")
            shape = (shape[3],)
        elif ls.kind == "dense":
            if len(shape) != 1 or shape[0] != ls.cin:
                raise ShapeError(f"layer {i}: dense expects ({ls.cin},), got {shape}")
            shape = (ls.cout,)
        out.append(shape)
    return out


def init_network(layers: Sequence[LayerSpec], rng: RngStream, modality: str = "a",
                 input_extents=(16, 16, 16, 1), align_index: Optional[int] = None,
                 ) -> ModalityNetwork:
    """He-initialized weights (normal, std sqrt(2/fan_in)) and zero biases.

    ``align_index`` defaults to the last layer before global pooling.
    """
    layers = list(layers)
    shapes = _trace_shapes(layers, input_extents)
    if layers[-1].kind != "dense":
        raise ShapeError("the last layer must be dense")
    if align_index is None:
        align_index = max(i for i, ls in enumerate(layers) if ls.kind == "gavgpool") - 1
    a_shape = shapes[align_index]
    if len(a_shape) != 4 or a_shape[3] < 2 or math.prod(a_shape[:3]) < 2:
        raise ShapeError(f"alignment layer output {a_shape} needs C >= 2 and d >= 2")
    params = []
    for ls in layers:
        if ls.kind == "conv3d":
            fan_in = math.prod(ls.kernel) * ls.cin
            w = rng.normal(tuple(ls.kernel) + (ls.cin, ls.cout), math.sqrt(2.0 / fan_in))
            params.append({"w": w, "b": np.zeros(ls.cout)})
        elif ls.kind == "dense":
            w = rng.normal((ls.cin, ls.cout), math.sqrt(2.0 / ls.cin))
            params.append({"w": w, "b": np.zeros(ls.cout)})
        else:
            params.append({})
    return ModalityNetwork(modality, layers, params, align_index, tuple(input_extents))


# -- layers -----------------------------------------------------------------

def _as_batch(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != ndim:
        raise ShapeError(f"expected a batch with {ndim} dims, got shape {x.shape}")
    return x


def _window(xp, offset, stride, out_extents):
    a, c, e = offset
    wo, ho, to = out_extents
    return xp[:, a:a + stride * (wo - 1) + 1:stride,
              c:c + stride * (ho - 1) + 1:stride,
              e:e + stride * (to - 1) + 1:stride]


def conv3d_forward(x, w, b, stride: int = 1, pad: int = 1):
    """Zero-padded 3D cross-correlation plus bias, via an im2col matrix.

    Single-channel inputs use an offset-major ``(k^3, N*d)`` column matrix,
    everything else the usual ``(N*d, k^3*Cin)`` layout; both give the same
    products, the choice is purely about copy speed.
    """
    x = _as_batch(x, 5)
    kx, ky, kz, cin, cout = w.shape
    if x.shape[-1] != cin or b.shape != (cout,):
        raise ShapeError(f"conv3d: input {x.shape}, weight {w.shape}, bias {b.shape}")
    n, wd, ht, tt, _ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    out = ((wd + 2 * pad - kx) // stride + 1,
           (ht + 2 * pad - ky) // stride + 1,
           (tt + 2 * pad - kz) // stride + 1)
    if min(out) <= 0:
        raise ShapeError("conv3d: kernel larger than padded input")
    rows = n * math.prod(out)
    wmat = w.reshape(-1, cout)
    if cin == 1:
        cols = np.empty((kx * ky * kz,) + (n,) + out)
        for o, off in enumerate(np.ndindex(kx, ky, kz)):
            cols[o] = _window(xp, off, stride, out)[..., 0]
        cols = cols.reshape(kx * ky * kz, rows)
        y = cols.T @ wmat + b
    else:
        v = sliding_window_view(xp, (kx, ky, kz), axis=(1, 2, 3))
        v = v[:, ::stride, ::stride, ::stride][:, :out[0], :out[1], :out[2]]
        cols = v.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(rows, -1)
        y = cols @ wmat + b
    cache = {"cols": cols, "w": w, "x_shape": x.shape, "stride": stride, "pad": pad}
    return y.reshape((n,) + out + (cout,)), cache


def conv3d_backward(cache, d_out, need_dx: bool = True):
    """Return ``(dx, dw, db)`` for the forward call that produced ``cache``.

    With ``need_dx=False`` the input gradient is skipped and returned as None.
    """
    w = cache["w"]
    kx, ky, kz, cin, cout = w.shape
    n, wd, ht, tt, _ = cache["x_shape"]
    stride, pad = cache["stride"], cache["pad"]
    d_out = np.asarray(d_out, dtype=np.float64)
    cols = cache["cols"]
    rows = cols.shape[1] if cin == 1 else cols.shape[0]
    if d_out.ndim != 5 or d_out.shape[0] != n or d_out.shape[-1] != cout or \
            rows != math.prod(d_out.shape[:4]):
        raise ShapeError(f"conv3d_backward: gradient {d_out.shape} does not match cache")
    out = d_out.shape[1:4]
    dy = d_out.reshape(-1, cout)
    dw = (cols @ dy if cin == 1 else cols.T @ dy).reshape(w.shape)
    db = dy.sum(axis=0)
    if not need_dx:
        return None, dw, db
    wt = np.ascontiguousarray(w.reshape(-1, cin, cout).transpose(0, 2, 1))
    dxp = np.zeros((n, wd + 2 * pad, ht + 2 * pad, tt + 2 * pad, cin))
    for o, off in enumerate(np.ndindex(kx, ky, kz)):
        _window(dxp, off, stride, out)[...] += (dy @ wt[o]).reshape((n,) + out + (cin,))
    dx = dxp[:, pad:pad + wd, pad:pad + ht, pad:pad + tt]
    return np.ascontiguousarray(dx), dw, db


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0.0


def relu_backward(mask, d_out):
    return np.where(mask, d_out, 0.0)


def maxpool3d_forward(x, window: int = 2, stride: int = 2):
    """2x2x2 max pooling. Ties go to the lowest row-major index in the window.

    Reduces T, then H, then W pairwise; a strict ``>`` at each level keeps the
    lower index, which composes to the lexicographically first maximum.
    Returns ``(y, argmax)`` with argmax in 0..7 as ``4*dw + 2*dh + dt``.
    """
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 pooling is supported")
    x = _as_batch(x, 5)
    n, wd, ht, tt, c = x.shape
    if wd % 2 or ht % 2 or tt % 2:
        raise ShapeError(f"maxpool3d needs even extents, got {x.shape[1:4]}")
    lo, hi = x[:, :, :, 0::2], x[:, :, :, 1::2]
    pick_t = hi > lo
    m = np.where(pick_t, hi, lo)
    lo, hi = m[:, :, 0::2], m[:, :, 1::2]
    pick_h = hi > lo
    m = np.where(pick_h, hi, lo)
    lo, hi = m[:, 0::2], m[:, 1::2]
    pick_w = hi > lo
    y = np.where(pick_w, hi, lo)
    # trace the winner back down through the levels
    h0, h1 = pick_h[:, 0::2], pick_h[:, 1::2]
    dh = np.where(pick_w, h1, h0)
    dt = np.where(pick_w,
                  np.where(h1, pick_t[:, 1::2, 1::2], pick_t[:, 1::2, 0::2]),
                  np.where(h0, pick_t[:, 0::2, 1::2], pick_t[:, 0::2, 0::2]))
    idx = 4 * pick_w.astype(np.int8) + 2 * dh.astype(np.int8) + dt.astype(np.int8)
    return y, idx


def maxpool3d_backward(argmax, d_out):
    n, w2, h2, t2, c = argmax.shape
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != argmax.shape:
        raise ShapeError(f"maxpool3d_backward: {d_out.shape} vs {argmax.shape}")
    dx = np.zeros((n, w2, 2, h2, 2, t2, 2, c))
    for o in range(8):
        dx[:, :, o >> 2, :, (o >> 1) & 1, :, o & 1] = np.where(argmax == o, d_out, 0.0)
    return dx.reshape(n, 2 * w2, 2 * h2, 2 * t2, c)


def gavgpool_forward(x):
    x = _as_batch(x, 5)
    return x.mean(axis=(1, 2, 3)), x.shape


def gavgpool_backward(shape, d_out):
    n, wd, ht, tt, c = shape
    scale = np.asarray(d_out, dtype=np.float64) / (wd * ht * tt)
    return np.broadcast_to(scale[:, None, None, None, :], shape).copy()


def dense_forward(x, w, b):
    x = _as_batch(x, 2)
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w + b, x


def dense_backward(x, w, d_out):
    """Return ``(dx, dw, db)``."""
    return d_out @ w.T, x.T @ d_out, d_out.sum(axis=0)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, label: int):
    """Cross-entropy of one logit vector; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if not 0 <= label < k:
        raise ValueError(f"label {label} outside [0, {k})")
    z = logits - logits.max()
    log_z = math.log(np.exp(z).sum())
    loss = log_z - z[label]
    grad = np.exp(z - log_z)
    grad[label] -= 1.0
    return float(loss), grad


def softmax_xent_batch(logits, labels):
    """Per-sample losses ``(N,)`` and gradients of the *mean* loss ``(N, K)``."""
    logits = _as_batch(logits, 2)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels must be one class index per row within [0, K)")
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    losses = log_z - z[rows, labels]
    grad = np.exp(z - log_z[:, None])
    grad[rows, labels] -= 1.0
    return losses, grad / n


# -- whole network ----------------------------------------------------------

def network_forward(net: ModalityNetwork, x):
    """Run ``x`` of shape ``(N, W, H, T, C)``; return ``(logits, align_map, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5 or tuple(x.shape[1:]) != tuple(net.input_extents):
        raise ShapeError(
            f"{net.modality}: input {x.shape[1:]} does not match {net.input_extents}"
        )
    cache = ForwardCache()
    h = x
    align = None
    for i, (ls, p) in enumerate(zip(net.layers, net.params)):
        if ls.kind == "conv3d":
            h, c = conv3d_forward(h, p["w"], p["b"], ls.stride, ls.pad)
        elif ls.kind == "relu":
            h, c = relu_forward(h)
        elif ls.kind == "maxpool3d":
            h, c = maxpool3d_forward(h)
        elif ls.kind == "gavgpool":
            h, c = gavgpool_forward(h)
        else:
            h, c = dense_forward(h, p["w"], p["b"])
        cache.entries.append(c)
        if i == net.align_index:
            align = h
    return h, align, cache


def network_backward(net: ModalityNetwork, cache: ForwardCache, d_logits, d_align=None):
    """Parameter gradients, one dict per layer (empty for parameter-free layers).

    ``d_align`` is added to the signal flowing back into the alignment layer's
    output.
    """
    if len(cache.entries) != len(net.layers):
        raise ShapeError("cache does not belong to this network")
    grads: list[dict] = [{} for _ in net.layers]
    g = np.asarray(d_logits, dtype=np.float64)
    for i in range(len(net.layers) - 1, -1, -1):
        ls, p, c = net.layers[i], net.params[i], cache.entries[i]
        if i == net.align_index and d_align is not None:
            d_align = np.asarray(d_align, dtype=np.float64)
            if d_align.shape != g.shape:
                raise ShapeError(f"d_align {d_align.shape} does not match {g.shape}")
            g = g + d_align
        if ls.kind == "conv3d":
            g, dw, db = conv3d_backward(c, g, need_dx=i > 0)
            grads[i] = {"w": dw, "b": db}
        elif ls.kind == "relu":
            g = relu_backward(c, g)
        elif ls.kind == "maxpool3d":
            g = maxpool3d_backward(c, g)
        elif ls.kind == "gavgpool":
            g = gavgpool_backward(c, g)
        else:
            g, dw, db = dense_backward(c, p["w"], g)
            grads[i] = {"w": dw, "b": db}
    return grads
