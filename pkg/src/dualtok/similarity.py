"""Pure similarity kernels for both retrieval stages.

All kernels accept float32 or float64 input and accumulate in float64.
``local_similarity(X, Y)`` is asymmetric by definition: each Y token is
matched to its best X token and the matches are averaged over Y. Engine
convention: the text sample's tokens always play the Y role.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class SimilarityMode:
    """Scoring mode: pure global, pure local, or their convex mix."""

    kind: str  # "global" | "local" | "mixed"
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("global", "local", "mixed"):
            raise DomainError(f"unknown similarity kind {self.kind!r}")
        if self.kind == "mixed" and not (0.0 <= self.theta <= 1.0):
            raise DomainError(f"theta must lie in [0, 1], got {self.theta}")

    @staticmethod
    def global_() -> "SimilarityMode":
        return SimilarityMode("global")

    @staticmethod
    def local() -> "SimilarityMode":
        return SimilarityMode("local")

    @staticmethod
    def mixed(theta: float) -> "SimilarityMode":
        return SimilarityMode("mixed", theta)


def _as_f64_vector(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise DomainError(f"{name} must be a vector, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise DomainError(f"{name} contains non-finite values")
    return a


def global_similarity(x0, y0) -> float:
    """Cosine of the two global vectors."""
    a = _as_f64_vector(x0, "x0")
    b = _as_f64_vector(y0, "y0")
    if a.shape[0] != b.shape[0]:
        raise DomainError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine undefined for a zero vector")
    return float(a @ b / (na * nb))


def _as_f64_tokens(t, name: str) -> np.ndarray:
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise DomainError(f"{name} must be a nonempty 2-D token matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise DomainError(f"{name} contains non-finite values")
    norms = np.linalg.norm(a, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise DomainError(f"{name} row {int(zero[0])} is the zero vector")
    return a / norms[:, None]


def token_similarity_matrix(x_tokens, y_tokens) -> np.ndarray:
    """Pairwise cosine matrix M, entry (i, j) = cosine(x_i, y_j)."""
    x = _as_f64_tokens(x_tokens, "x_tokens")
    y = _as_f64_tokens(y_tokens, "y_tokens")
    if x.shape[1] != y.shape[1]:
        raise DomainError(f"token dim mismatch: {x.shape[1]} vs {y.shape[1]}")
    return x @ y.T


def local_similarity(x_tokens, y_tokens) -> float:
    """Best-match alignment score: mean over Y tokens of max over X tokens."""
    m = token_similarity_matrix(x_tokens, y_tokens)
    return float(m.max(axis=0).mean())


def mixed_similarity(s_g: float, s_l: float, theta: float) -> float:
    """Convex combination (1 - theta) * s_g + theta * s_l."""
    if not (0.0 <= theta <= 1.0):
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    if not (np.isfinite(s_g) and np.isfinite(s_l)):
        raise DomainError("scores must be finite")
    return (1.0 - theta) * s_g + theta * s_l
