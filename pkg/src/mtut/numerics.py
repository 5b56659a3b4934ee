"""Array helpers, deterministic random streams and the few kernels built on them.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in C (row-major)
order. The helpers here validate shapes and keep summation order fixed so
that results are bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ShapeError",
    "RngStream",
    "as_tensor",
    "matmul",
    "elementwise_map",
    "splitmix64",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class ShapeError(ValueError):
    """Raised when operand extents are inconsistent."""


def as_tensor(values, dims=None) -> np.ndarray:
    """Return ``values`` as a contiguous float64 array, optionally reshaped."""
    t = np.ascontiguousarray(values, dtype=np.float64)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d <= 0 for d in dims):
            raise ShapeError(f"extents must be positive, got {dims}")
        if math.prod(dims) != t.size:
            raise ShapeError(f"cannot view {t.size} values as {dims}")
        t = t.reshape(dims)
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with the inner sum accumulated in index order.

    ``c[i, k] = sum_j a[i, j] * b[j, k]`` where the sum runs j = 0..q-1 left
    to right, so the result matches a naive triple loop bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    c = np.zeros((a.shape[0], b.shape[1]))
    for j in range(a.shape[1]):
        c += np.multiply.outer(a[:, j], b[j, :])
    return c


def _relu(t, _):
    return np.maximum(t, 0.0)


def _relu_grad_mask(t, _):
    return (t > 0.0).astype(np.float64)


def _add_scalar(t, s):
    return t + s


def _mul_scalar(t, s):
    return t * s


def _exp(t, _):
    return np.exp(t)


_MAPS = {
    "relu": _relu,
    "relu_grad_mask": _relu_grad_mask,
    "add_scalar": _add_scalar,
    "mul_scalar": _mul_scalar,
    "exp": _exp,
}


def elementwise_map(t: np.ndarray, tag: str, scalar: float = 0.0) -> np.ndarray:
    """Apply one of the tagged scalar functions to every entry of ``t``.

    ``tag`` is one of ``relu``, ``relu_grad_mask``, ``add_scalar``,
    ``mul_scalar`` or ``exp``; ``scalar`` is the operand of the two
    ``*_scalar`` maps and ignored otherwise.
    """
    try:
        fn = _MAPS[tag]
    except KeyError:
        raise ValueError(f"unknown elementwise tag {tag!r}") from None
    return fn(np.asarray(t, dtype=np.float64), scalar)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: return ``(output, next_state)``."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


def _mix_array(states: np.ndarray) -> np.ndarray:
    z = states.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


class RngStream:
    """Splitmix64 random stream.

    The whole state is one 64-bit integer, so a stream can be serialized with
    :meth:`getstate` and resumed anywhere. Bulk draws are vectorized but
    produce exactly the values repeated scalar draws would.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def getstate(self) -> int:
        return self.state

    def setstate(self, state: int) -> None:
        self.state = int(state) & _MASK64

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream keyed by ``key``; does not advance self."""
        out, _ = splitmix64(self.state ^ (int(key) & _MASK64))
        return RngStream(out)

    def next_u64(self) -> int:
        out, self.state = splitmix64(self.state)
        return out

    def next_uniform(self) -> float:
        """Float in [0, 1) built from the top 53 bits of the next output."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def u64_array(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
            states = np.uint64(self.state) + steps
            out = _mix_array(states)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return out

    def uniform(self, size) -> np.ndarray:
        """Array of uniforms in [0, 1) with the given shape."""
        n = math.prod(size) if isinstance(size, tuple) else int(size)
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(size)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        """Gaussian samples via Box-Muller; consumes two uniforms per value."""
        n = math.prod(size) if isinstance(size, tuple) else int(size)
        u = self.uniform(2 * n).reshape(n, 2) if n else np.zeros((0, 2))
        # 1 - u lies in (0, 1], keeping the log finite
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        z = r * np.cos(2.0 * np.pi * u[:, 1])
        return (std * z).reshape(size)

    def randint(self, n: int) -> int:
        """Integer in [0, n) by multiply-shift on the top 53 bits."""
        return min(int(self.next_uniform() * n), n - 1)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            order[i], order[j] = order[j], order[i]
        return order
