"""Dense vector/matrix kernels.

Vectors and matrices are plain numpy arrays stored as float32. Every
reduction is accumulated in float64 and rounded back to float32 on output,
so results are reproducible run to run on the same platform.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

F32 = np.float32
F64 = np.float64

# below this norm a vector is treated as zero by cosine()
ZERO_NORM = 1e-12


def as_vec(a) -> np.ndarray:
    v = np.asarray(a, dtype=F32)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_mat(m) -> np.ndarray:
    a = np.asarray(m, dtype=F32)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def _check_same_len(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def dot(a, b) -> float:
    a, b = as_vec(a), as_vec(b)
    _check_same_len(a, b)
    return float(F32(np.dot(a.astype(F64), b.astype(F64))))


def l2_norm(a) -> float:
    a = as_vec(a).astype(F64)
    return float(F32(np.sqrt(np.dot(a, a))))


def linf_norm(a) -> float:
    a = as_vec(a)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))


def cosine(a, b) -> float:
    """Cosine similarity clamped to [-1, 1]; 0 when either side is (near) zero."""
    a, b = as_vec(a), as_vec(b)
    _check_same_len(a, b)
    a64, b64 = a.astype(F64), b.astype(F64)
    na = np.sqrt(np.dot(a64, a64))
    nb = np.sqrt(np.dot(b64, b64))
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    c = np.dot(a64, b64) / (na * nb)
    return float(min(1.0, max(-1.0, c)))


def cosine_matrix(a, b) -> np.ndarray:
    """All-pairs cosine between the rows of ``a`` (p x D) and ``b`` (q x D).

    Same conventions as :func:`cosine`, evaluated in float64. Values can
    differ from the scalar kernel in the last few ulps.
    """
    a = np.asarray(a, dtype=F64)
    b = np.asarray(b, dtype=F64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    num = a @ b.T
    den = np.outer(na, nb)
    out = np.zeros_like(num)
    ok = (na[:, None] >= ZERO_NORM) & (nb[None, :] >= ZERO_NORM)
    np.divide(num, den, out=out, where=ok)
    return np.clip(out, -1.0, 1.0)


def matvec(m, x) -> np.ndarray:
    m, x = as_mat(m), as_vec(x)
    if m.shape[1] != x.shape[0]:
        raise DimensionError(f"matrix has {m.shape[1]} columns, vector has length {x.shape[0]}")
    return (m.astype(F64) @ x.astype(F64)).astype(F32)


def silu(z):
    # tanh form avoids overflow in exp for large negative inputs
    z = np.asarray(z, dtype=F64)
    return 0.5 * z * (1.0 + np.tanh(0.5 * z))
