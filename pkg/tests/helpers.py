"""Naive reference implementations and sample factories shared by the suite.

The naive functions deliberately use plain Python loops and ``math`` so they
cannot share a code path (or a bug) with the vectorized kernels under test.
"""

import math

import numpy as np

from dualtok import Modality, SampleFeatures


def naive_cosine(a, b):
    num = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) * float(x) for x in a))
    nb = math.sqrt(sum(float(y) * float(y) for y in b))
    return num / (na * nb)


def naive_token_matrix(x_tokens, y_tokens):
    return [[naive_cosine(x, y) for y in y_tokens] for x in x_tokens]


def naive_local(x_tokens, y_tokens):
    m = naive_token_matrix(x_tokens, y_tokens)
    per_y = []
    for j in range(len(y_tokens)):
        best = m[0][j]
        for i in range(1, len(x_tokens)):
            if m[i][j] > best:
                best = m[i][j]
        per_y.append(best)
    return sum(per_y) / len(per_y)


def naive_mixed(s_g, s_l, theta):
    return (1.0 - theta) * s_g + theta * s_l


def nonzero_rows(rng, rows, dim, scale=1.0):
    """Random float32 matrix where no row collapses to all zeros."""
    m = (scale * rng.normal(size=(rows, dim))).astype(np.float32)
    while not m.any(axis=1).all():
        m = (scale * rng.normal(size=(rows, dim))).astype(np.float32)
    return m


def random_sample(rng, sid, modality=Modality.IMAGE, dim=8, n_tokens=None):
    n = int(rng.integers(1, 6)) if n_tokens is None else n_tokens
    return SampleFeatures(sid, modality, nonzero_rows(rng, 1, dim)[0], nonzero_rows(rng, n, dim))


def random_gallery(rng, n, modality=Modality.IMAGE, dim=8, max_tokens=6):
    out = []
    for i in range(n):
        k = int(rng.integers(1, max_tokens + 1))
        out.append(random_sample(rng, i, modality, dim=dim, n_tokens=k))
    return out
