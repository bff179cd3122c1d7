"""Dense numeric primitives shared by every other module.

Everything here is 64-bit float and purely functional: stabilized softmax,
row normalization, a counter-based RNG stream abstraction, and the
central-difference gradient oracle that all analytic gradients in the
package are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_FD_STEP = 1e-5

_MASK64 = (1 << 64) - 1


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, in [-1, 1] up to rounding."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(a @ b) / (na * nb)


def row_softmax(m, temperature: float = 1.0) -> np.ndarray:
    """Softmax of m / temperature along the last axis, stabilized by max-subtraction.

    Every output row is nonnegative and sums to 1; adding a constant to a
    row leaves its softmax unchanged.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(m, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def l2_normalize_rows(m) -> np.ndarray:
    """Scale each row of m to unit Euclidean norm."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise ValueError(f"row {int(bad[0])} has near-zero norm and cannot be normalized")
    return m / norms[..., None]


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    The oracle for every analytic gradient in this package: entry k of the
    result is (f(x + h e_k) - f(x - h e_k)) / 2h.
    """
    if h <= 0.0:
        raise ValueError(f"step must be > 0, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at entry {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(g, g_hat) -> float:
    """max over entries of |g - g_hat| / max(1, |g|, |g_hat|)."""
    g = np.asarray(g, dtype=np.float64)
    g_hat = np.asarray(g_hat, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(g_hat)))
    return float(np.max(np.abs(g - g_hat) / denom)) if g.size else 0.0


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense row-major matrix of feature vectors (moments or queries).

    When `normalized` is set, every row is unit-norm within 1e-9.
    """

    rows: int
    dim: int
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "data", data)
        if data.size != self.rows * self.dim:
            raise ValueError(
                f"data length {data.size} != rows*dim = {self.rows * self.dim}"
            )
        if self.normalized and self.rows:
            norms = np.linalg.norm(self.array, axis=1)
            worst = int(np.argmax(np.abs(norms - 1.0)))
            if abs(norms[worst] - 1.0) > 1e-9:
                raise ValueError(
                    f"row {worst} has norm {norms[worst]:.12g}, not unit within 1e-9"
                )

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.rows, self.dim)

    @classmethod
    def from_array(cls, arr, normalized: bool = False) -> "EmbeddingMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected 2-D array, got shape {arr.shape}")
        return cls(rows=arr.shape[0], dim=arr.shape[1], data=arr.reshape(-1).copy(), normalized=normalized)

    def normalized_copy(self) -> "EmbeddingMatrix":
        return EmbeddingMatrix.from_array(l2_normalize_rows(self.array), normalized=True)


def _splitmix64(v: int) -> int:
    v = (v + 0x9E3779B97F4A7C15) & _MASK64
    v = ((v ^ (v >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    v = ((v ^ (v >> 27)) * 0x94D049BB133111EB) & _MASK64
    return v ^ (v >> 31)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    The same key yields the same draw sequence on every run and platform
    (Philox). Streams are cheap value objects; derive a fresh one per
    logical task instead of sharing a generator across workers.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        # explicit counter=0 skips an entropy draw and changes nothing else
        return np.random.Generator(np.random.Philox(counter=0, key=key))

    def derive(self, *ids: int) -> "RngStream":
        """New stream whose id deterministically mixes this id with `ids`."""
        s = self.stream_id & _MASK64
        for i in ids:
            s = _splitmix64(s ^ _splitmix64(i & _MASK64))
        return RngStream(self.seed, s)
