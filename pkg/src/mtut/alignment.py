"""Correlation-matrix alignment between modality networks.

A feature map ``F`` of shape ``(W, H, T, C)`` is viewed as ``d = W*H*T``
element vectors of length ``C``. Every element is standardized over its
channels, scaled to unit length, and the ``d x d`` matrix of inner products
between elements is compared across networks with a squared Frobenius
distance. The distance is weighted by a focal gate that is positive only when
the other network currently classifies better, so knowledge flows one way.

The batched helpers (``*_batch``) operate on arrays of shape
``(N, W, H, T, C)`` and are what the training loop uses; the single-map
functions wrap them with ``N = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import ShapeError

__all__ = [
    "DEFAULT_EPS",
    "NormalizedFeatureMap",
    "FocalGate",
    "SsaTerm",
    "LossBreakdown",
    "normalize_feature_map",
    "correlation_matrix",
    "ssa_loss",
    "ssa_loss_grad",
    "focal_rho",
    "total_objective",
    "write_correlation_csv",
    "normalize_batch",
    "correlation_batch",
    "ssa_loss_and_grad_batch",
]

# (eps added to the channel std, threshold below which an element is masked)
DEFAULT_EPS = (1e-5, 1e-8)
_MAX_EXPONENT = 700.0


@dataclass
class NormalizedFeatureMap:
    """Standardized unit-length element vectors of one feature map.

    ``rows`` is ``(d, C)`` in row-major (i, j, t) order. Masked rows came from
    zero-variance elements and are exactly zero.
    """

    rows: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    zero_mask: np.ndarray
    extents: tuple[int, int, int]

    @property
    def d(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class FocalGate:
    rho: float
    loss_self: float
    loss_other: float
    beta: float

    @property
    def delta_loss(self) -> float:
        return self.loss_self - self.loss_other


@dataclass(frozen=True)
class SsaTerm:
    other: str
    gate: FocalGate
    value: float


@dataclass
class LossBreakdown:
    cls_loss: float
    ssa_terms: list[SsaTerm] = field(default_factory=list)
    lam: float = 0.0
    total: float = 0.0


def _check_map(f: np.ndarray, name: str = "feature map") -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 5:
        raise ShapeError(f"{name} batch must be (N, W, H, T, C), got {f.shape}")
    if f.shape[-1] < 2:
        raise ValueError(f"{name} needs at least 2 channels, got {f.shape[-1]}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite values")
    return f


def _fast_sum(a: np.ndarray) -> np.ndarray:
    return a.sum(axis=-1, keepdims=True)


def _sorted_sum(a: np.ndarray) -> np.ndarray:
    # summing in sorted order makes the result independent of channel order
    return np.sort(a, axis=-1).sum(axis=-1, keepdims=True)


def _standardize(x: np.ndarray, eps_std: float, eps_norm: float, csum=_fast_sum):
    # x: (N, d, C)
    c = x.shape[-1]
    mu = csum(x) / c
    u = x - mu
    sigma = np.sqrt(csum(u * u) / c)
    s = sigma + eps_std
    tilde = np.divide(u, s, out=np.zeros_like(u), where=s > 0.0)
    norm = np.sqrt(csum(tilde * tilde))
    mask = norm[..., 0] <= eps_norm
    safe = np.where(norm > eps_norm, norm, 1.0)
    rows = np.where(mask[..., None], 0.0, tilde / safe)
    return rows, mu[..., 0], sigma[..., 0], mask, u, s, safe


def normalize_batch(f: np.ndarray, eps=DEFAULT_EPS, canonical: bool = False):
    """Return ``(rows, mean, std, mask)`` for a batch of feature maps.

    ``canonical`` sums channels in sorted order so the result is bitwise
    invariant to channel permutations; the default uses plain sums.
    """
    f = _check_map(f)
    n = f.shape[0]
    x = f.reshape(n, -1, f.shape[-1])
    csum = _sorted_sum if canonical else _fast_sum
    rows, mu, sigma, mask, *_ = _standardize(x, *eps, csum=csum)
    return rows, mu, sigma, mask


def _gram_symmetric(rows: np.ndarray) -> np.ndarray:
    g = rows @ rows.swapaxes(-1, -2)
    d = g.shape[-1]
    iu, ju = np.triu_indices(d, 1)
    g[..., ju, iu] = g[..., iu, ju]
    return g


def correlation_batch(f: np.ndarray, eps=DEFAULT_EPS) -> np.ndarray:
    """Correlation matrices ``(N, d, d)`` of a batch of feature maps."""
    rows, *_ = normalize_batch(f, eps)
    return _gram_symmetric(rows)


def ssa_loss_and_grad_batch(fm, target, rho, eps=DEFAULT_EPS, need_grad=True):
    """Per-sample alignment losses and their gradients with respect to ``fm``.

    ``target`` is treated as a constant. ``rho`` is a scalar or a length-N
    vector of gate values, also constant. Returns ``(values, grads)`` with
    ``values`` of shape ``(N,)`` and ``grads`` shaped like ``fm`` (``None``
    when ``need_grad`` is false).
    """
    fm = _check_map(fm)
    target = _check_map(target, "target feature map")
    if fm.shape[:4] != target.shape[:4]:
        raise ShapeError(
            f"spatiotemporal extents differ: {fm.shape[1:4]} vs {target.shape[1:4]}"
        )
    n, c = fm.shape[0], fm.shape[-1]
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (n,))
    eps_std, eps_norm = eps

    x = fm.reshape(n, -1, c)
    rows, _, sigma, mask, u, s, norm = _standardize(x, eps_std, eps_norm)
    g = _gram_symmetric(rows)
    t = correlation_batch(target, eps)
    diff = g - t
    values = rho * (diff * diff).sum(axis=(1, 2))
    if not need_grad:
        return values, None

    # d/dG of rho*||G - T||^2 is 2*rho*(G - T); G = R R^T with symmetric diff
    g_rows = 4.0 * rho[:, None, None] * (diff @ rows)
    g_tilde = (g_rows - rows * (rows * g_rows).sum(-1, keepdims=True)) / norm
    s = np.where(s > 0.0, s, 1.0)
    g_u = g_tilde / s
    g_s = -(g_tilde * u).sum(-1, keepdims=True) / (s * s)
    safe_sigma = np.where(sigma > 0.0, sigma, 1.0)[..., None]
    g_u = g_u + g_s * u / (c * safe_sigma)
    g_x = g_u - g_u.mean(-1, keepdims=True)
    g_x[mask] = 0.0
    return values, g_x.reshape(fm.shape)


def _one(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 4:
        raise ShapeError(f"feature map must be (W, H, T, C), got {f.shape}")
    return f[None]


def normalize_feature_map(f, eps_std=DEFAULT_EPS[0], eps_norm=DEFAULT_EPS[1]):
    """Standardize and unit-normalize every element of a ``(W, H, T, C)`` map."""
    if eps_std < 0 or eps_norm <= 0:
        raise ValueError("eps_std must be >= 0 and eps_norm > 0")
    fb = _one(f)
    rows, mu, sigma, mask = normalize_batch(fb, (eps_std, eps_norm), canonical=True)
    return NormalizedFeatureMap(
        rows=rows[0], mean=mu[0], std=sigma[0], zero_mask=mask[0],
        extents=tuple(fb.shape[1:4]),
    )


def correlation_matrix(nfm: NormalizedFeatureMap) -> np.ndarray:
    """``rows @ rows.T`` built from the upper triangle so it is exactly symmetric.

    Each dot product is summed in sorted order, so permuting the channels of
    the underlying map leaves every entry bitwise unchanged.
    """
    rows = nfm.rows
    d = rows.shape[0]
    iu, ju = np.triu_indices(d)
    upper = _sorted_sum(rows[iu] * rows[ju])[:, 0]
    out = np.empty((d, d))
    out[iu, ju] = upper
    out[ju, iu] = upper
    return out


def ssa_loss(fm, fn_target, gate: FocalGate, eps=DEFAULT_EPS) -> float:
    """Gated squared Frobenius distance between the two correlation matrices."""
    values, _ = ssa_loss_and_grad_batch(
        _one(fm), _one(fn_target), gate.rho, eps, need_grad=False
    )
    return float(values[0])


def ssa_loss_grad(fm, fn_target, gate: FocalGate, eps=DEFAULT_EPS) -> np.ndarray:
    """Gradient of :func:`ssa_loss` with respect to ``fm`` only."""
    _, grads = ssa_loss_and_grad_batch(_one(fm), _one(fn_target), gate.rho, eps)
    return grads[0]


def focal_rho(loss_self: float, loss_other: float, beta: float) -> FocalGate:
    """Focal gate ``relu(exp(beta * (loss_self - loss_other)) - 1)``.

    Zero unless the other network has the strictly lower loss, in which case
    it grows exponentially with the loss gap.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    delta = float(loss_self) - float(loss_other)
    # exp overflows past ~709.78; such gaps only arise from already-diverged losses
    rho = max(math.expm1(min(beta * delta, _MAX_EXPONENT)), 0.0)
    return FocalGate(rho=rho, loss_self=float(loss_self),
                     loss_other=float(loss_other), beta=float(beta))


def total_objective(cls_loss: float, terms: Sequence[SsaTerm], lam: float) -> LossBreakdown:
    """Classification loss plus ``lam`` times the summed alignment terms."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    terms = list(terms)
    ssa_sum = math.fsum(t.value for t in terms)
    total = float(cls_loss) + lam * ssa_sum if terms else float(cls_loss)
    return LossBreakdown(cls_loss=float(cls_loss), ssa_terms=terms,
                         lam=float(lam), total=total)


def write_correlation_csv(corr: np.ndarray, path) -> Path:
    """One matrix row per line, comma separated, ``repr`` precision."""
    path = Path(path)
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(corr)]
    path.write_text("\n".join(lines) + "\n")
    return path
