"""Deterministic float64 numeric kernels.

Every kernel is a pure function with a pinned accumulation order so repeated
runs are bit-identical. ``matmul`` in particular accumulates in naive
triple-loop order (i, k, j), which the verification suite checks bitwise
against a pure-Python transcription.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from numba import njit

from .errors import NumericError, ShapeError

LAYERNORM_EPS = 1e-6

_U64 = np.uint64
_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# MAC counting
# ---------------------------------------------------------------------------

_tls = threading.local()


class MacCounter:
    """Accumulates multiply-accumulate counts of every matmul it observes."""

    def __init__(self) -> None:
        self.macs = 0

    def add(self, count: int) -> None:
        self.macs += count


def _counters() -> list:
    stack = getattr(_tls, "counters", None)
    if stack is None:
        stack = []
        _tls.counters = stack
    return stack


@contextmanager
def count_macs():
    """Context manager instrumenting matmul; yields a live MacCounter."""
    counter = MacCounter()
    stack = _counters()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


# ---------------------------------------------------------------------------
# Matrix ops
# ---------------------------------------------------------------------------


@njit(cache=True)
def _matmul_ikj(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] += aip * b[p, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with naive-loop accumulation order (bit-reproducible)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    counters = getattr(_tls, "counters", None)
    if counters:
        macs = a.shape[0] * a.shape[1] * b.shape[1]
        for counter in counters:
            counter.add(macs)
    out = np.zeros((a.shape[0], b.shape[1]))
    _matmul_ikj(np.ascontiguousarray(a, dtype=np.float64),
                np.ascontiguousarray(b, dtype=np.float64), out)
    return out


@njit(cache=True)
def _softmax_rows_jit(m, out):
    rows, cols = m.shape
    for i in range(rows):
        hi = m[i, 0]
        for j in range(1, cols):
            if m[i, j] > hi:
                hi = m[i, j]
        if not math.isfinite(hi):
            return False
        total = 0.0
        for j in range(cols):
            if not math.isfinite(m[i, j]):
                return False
            e = math.exp(m[i, j] - hi)
            out[i, j] = e
            total += e
        for j in range(cols):
            out[i, j] /= total
    return True


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D matrix")
    out = np.empty_like(m)
    if not _softmax_rows_jit(m, out):
        raise NumericError("softmax_rows requires finite input")
    return out


@njit(cache=True)
def _layernorm_jit(x, gamma, beta, eps, out):
    rows, cols = x.shape
    for i in range(rows):
        mean = 0.0
        for j in range(cols):
            mean += x[i, j]
        mean /= cols
        var = 0.0
        for j in range(cols):
            diff = x[i, j] - mean
            var += diff * diff
        var /= cols
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(cols):
            out[i, j] = (x[i, j] - mean) * inv * gamma[j] + beta[j]


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              eps: float = LAYERNORM_EPS) -> np.ndarray:
    """Per-row normalization to zero mean / unit variance, then affine."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("layernorm expects a 2-D matrix")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm affine length {gamma.shape}/{beta.shape} does not match width {x.shape[-1]}")
    out = np.empty_like(x)
    _layernorm_jit(x, gamma, beta, eps, out)
    return out


@njit(cache=True)
def _gelu_jit(x, out):
    inv_sqrt2 = 0.7071067811865476
    flat_in = x.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        v = flat_in[i]
        if not math.isfinite(v):
            return False
        flat_out[i] = v * (0.5 * (1.0 + math.erf(v * inv_sqrt2)))
    return True


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    if not _gelu_jit(x, out):
        raise NumericError("gelu requires finite input")
    return out


def argsort_desc(v: np.ndarray) -> np.ndarray:
    """Indices sorting v descending; ties keep the lower original index first."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("argsort_desc expects a 1-D vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("argsort_desc requires finite entries")
    return np.argsort(-v, kind="stable")


# ---------------------------------------------------------------------------
# Bicubic resize (Catmull-Rom, a = -0.5, half-pixel centers, edge clamp)
# ---------------------------------------------------------------------------


def _cubic_weight(t: np.ndarray) -> np.ndarray:
    a = -0.5
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    tn = t[near]
    tf = t[far]
    w[near] = (a + 2.0) * tn**3 - (a + 3.0) * tn**2 + 1.0
    w[far] = a * tf**3 - 5.0 * a * tf**2 + 8.0 * a * tf - 4.0 * a
    return w


def _resize_axis_taps(in_size: int, out_size: int):
    """Clamped source indices (out, 4) and tap weights (out, 4) for one axis."""
    dst = np.arange(out_size, dtype=np.float64)
    src = (dst + 0.5) * (in_size / out_size) - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    offsets = np.array([-1, 0, 1, 2], dtype=np.int64)
    idx = np.clip(base[:, None] + offsets[None, :], 0, in_size - 1)
    weights = _cubic_weight(frac[:, None] - offsets[None, :].astype(np.float64))
    return idx, weights


def _resize_rows(img: np.ndarray, out_h: int) -> np.ndarray:
    idx, w = _resize_axis_taps(img.shape[0], out_h)
    taps = img[idx]                     # (out_h, 4, w, c)
    # Difference form around the second tap keeps constants bit-exact.
    ref = taps[:, 1]
    delta = taps - ref[:, None]
    out = ref.copy()
    for t in range(4):
        out += w[:, t][:, None, None] * delta[:, t]
    return out


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom bicubic resize of an (h, w, c) array, channels independent."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError("bicubic_resize expects an (h, w, c) array")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ShapeError("bicubic_resize requires input at least 2x2")
    if out_h < 1 or out_w < 1:
        raise ShapeError("bicubic_resize output size must be positive")
    resized = _resize_rows(img, out_h)
    resized = _resize_rows(resized.transpose(1, 0, 2), out_w).transpose(1, 0, 2)
    return resized


# ---------------------------------------------------------------------------
# Seeded PRNG (counter-mode SplitMix64; platform-independent integer math)
# ---------------------------------------------------------------------------

_PHI64 = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class Rng:
    """Deterministic 64-bit PRNG: identical seeds give identical streams.

    Draw i of a given seed is SplitMix64's mix of ``seed + (i+1) * phi64``;
    scalar and batched draws therefore share one stream.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed & _MASK64
        self._count = 0

    # -- raw stream ---------------------------------------------------------

    def next_u64(self) -> int:
        self._count += 1
        z = (self.seed + self._count * _PHI64) & _MASK64
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def _u64_batch(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=_U64)
        self._count += n
        with np.errstate(over="ignore"):
            z = _U64(self.seed) + idx * _U64(_PHI64)
            z = (z ^ (z >> _U64(30))) * _U64(_MIX1)
            z = (z ^ (z >> _U64(27))) * _U64(_MIX2)
            return z ^ (z >> _U64(31))

    # -- derived draws ------------------------------------------------------

    def uniform(self, n: int | None = None):
        """Uniform floats in [0, 1) with 53-bit resolution."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self._u64_batch(n) >> _U64(11)).astype(np.float64) * 2.0**-53

    def integer(self, bound: int) -> int:
        """Uniform int in [0, bound), rejection-sampled to avoid modulo bias."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % bound)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % bound

    def subset(self, n: int, k: int) -> list[int]:
        """Uniform k-subset of range(n) in draw order (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        pool = list(range(n))
        for i in range(k):
            j = i + self.integer(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def permutation(self, n: int) -> list[int]:
        return self.subset(n, n)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on paired uniform draws."""
        pairs = (n + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def truncated_normal(self, n: int, std: float = 1.0, clip: float = 2.0) -> np.ndarray:
        """Normals rejected outside +/- clip standard deviations, then scaled."""
        chunks: list[np.ndarray] = []
        have = 0
        while have < n:
            want = min(max(n - have, 16), 1 << 22)  # bound transient memory
            batch = self.normal(want)
            kept = batch[np.abs(batch) <= clip]
            chunks.append(kept)
            have += kept.size
        return np.concatenate(chunks)[:n] * std
