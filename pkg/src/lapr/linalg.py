"""Dense float64 vector primitives used throughout the engine.

Vectors and matrices are plain numpy float64 arrays; these helpers pin down
the numerical conventions (stable softmax, zero-tolerant normalization,
strict cosine) that the model, losses, and retrieval layers rely on.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVector, InvalidArgument

# Norms below this are treated as collapsed/blank embeddings.
ZERO_NORM_EPS = 1e-12


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-D vector (max-subtracted before exp)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidArgument("softmax expects a nonempty 1-D vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale to unit norm; vectors with norm < ZERO_NORM_EPS pass through.

    Blank (all-zero) label embeddings are legitimate input, so this never
    raises; scoring a zero vector later is what fails.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < ZERO_NORM_EPS:
        return v.copy()
    return v / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two nonzero vectors of equal dimension."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgument(f"cosine dims differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        raise DegenerateVector("cosine of a (near-)zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def affine_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """W @ x + b with shape validation."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise InvalidArgument("affine_forward expects matrix W, vectors b and x")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise InvalidArgument(
            f"affine shape mismatch: W {W.shape}, b {b.shape}, x {x.shape}"
        )
    return W @ x + b


def log_sum_exp_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp(.))) with max subtraction."""
    rowmax = m.max(axis=1)
    return rowmax + np.log(np.exp(m - rowmax[:, None]).sum(axis=1))
