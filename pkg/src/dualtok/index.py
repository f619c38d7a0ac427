"""Immutable encoded gallery: packed globals for the fast first pass,
per-sample token matrices for exact re-scoring, and persistence.

Global vectors are stored pre-normalized (with their original norms kept
alongside), so scoring a unit-length query against the whole gallery is
a single matrix-vector product. Token matrices are stored verbatim in
float32; the normalized float64 copies used for token scoring are built
lazily and cached, never serialized.

Index file format (little-endian), extension ``.tgi``:

    magic "TGI1" (4 bytes), version u8 = 1, modality u8,
    sample_count u32, output_dim u32,
    build metadata (40 bytes): source digest (32 raw bytes, zeros when
        unknown) + build_time f64 (0.0 unless explicitly stamped),
    ids u64[n], original norms f64[n],
    normalized globals f64[n * output_dim],
    token counts u32[n], token payloads f32 (row-major per sample).

Token rows share the globals' dimensionality; that is forced by the
layout (there is no separate token-dim field) and always true for
encoder output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DataError, FormatError
from .features import Modality, SampleFeatures, validate_sample
from .features import _Cursor

INDEX_MAGIC = b"TGI1"
INDEX_VERSION = 1
DIGEST_SIZE = 32
EMPTY_DIGEST = bytes(DIGEST_SIZE)


@dataclass(frozen=True, eq=False)
class GalleryIndex:
    modality: Modality
    ids: np.ndarray              # (n,) u64
    norms: np.ndarray            # (n,) f64, original global norms
    globals_normalized: np.ndarray  # (n, d) f64 unit rows
    tokens: tuple[np.ndarray, ...]  # n float32 matrices, (m_i, d)
    digest: bytes = EMPTY_DIGEST
    build_time: float = 0.0
    _token_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def output_dim(self) -> int:
        return self.globals_normalized.shape[1]

    @cached_property
    def _id_to_pos(self) -> dict[int, int]:
        return {int(v): i for i, v in enumerate(self.ids)}

    def position(self, sample_id: int) -> int:
        pos = self._id_to_pos.get(int(sample_id))
        if pos is None:
            raise DataError(f"id {sample_id} not present in the index")
        return pos

    def tokens_normalized(self, pos: int) -> np.ndarray:
        """Float64 unit-row copy of one sample's token matrix (cached)."""
        cached = self._token_cache.get(pos)
        if cached is None:
            t = self.tokens[pos].astype(np.float64)
            norms = np.linalg.norm(t, axis=1, keepdims=True)
            cached = t / norms
            self._token_cache[pos] = cached
        return cached

    def global_scores(self, unit_query: np.ndarray) -> np.ndarray:
        """Cosine of a unit-length query against every gallery global."""
        return self.globals_normalized @ unit_query

    def equal_contents(self, other: "GalleryIndex") -> bool:
        """Bit-level equality of everything that gets serialized."""
        return (
            self.modality is other.modality
            and self.digest == other.digest
            and self.build_time == other.build_time
            and self.ids.tobytes() == other.ids.tobytes()
            and self.norms.tobytes() == other.norms.tobytes()
            and self.globals_normalized.tobytes() == other.globals_normalized.tobytes()
            and len(self.tokens) == len(other.tokens)
            and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                    for a, b in zip(self.tokens, other.tokens))
        )


def build_index(
    encoded: list[SampleFeatures],
    *,
    modality: Modality | None = None,
    output_dim: int | None = None,
    digest: bytes = EMPTY_DIGEST,
    build_time: float = 0.0,
) -> GalleryIndex:
    """Normalize and pack encoded samples into a searchable gallery.

    The modality/output_dim overrides matter only for empty input, where
    nothing can be inferred (defaults: image, 1).
    """
    if len(digest) != DIGEST_SIZE:
        raise DataError(f"digest must be {DIGEST_SIZE} bytes, got {len(digest)}")
    if not encoded:
        mod = Modality.IMAGE if modality is None else modality
        d = 1 if output_dim is None else output_dim
        return GalleryIndex(
            modality=mod,
            ids=np.empty(0, dtype=np.uint64),
            norms=np.empty(0, dtype=np.float64),
            globals_normalized=np.empty((0, d), dtype=np.float64),
            tokens=(),
            digest=digest, build_time=build_time,
        )

    mod = encoded[0].modality if modality is None else modality
    d = encoded[0].global_dim if output_dim is None else output_dim
    seen: set[int] = set()
    for s in encoded:
        if s.modality is not mod:
            raise DataError(f"sample {s.id}: modality {s.modality.name} differs from "
                            f"the gallery's {mod.name}")
        if s.global_dim != d or s.token_dim != d:
            raise DataError(
                f"sample {s.id}: dims (global {s.global_dim}, token {s.token_dim}) "
                f"do not match the gallery dimension {d}"
            )
        result = validate_sample(s)
        if not result.ok:
            raise DataError(f"sample {s.id}: {'; '.join(result.violations)}")
        if s.id in seen:
            raise DataError(f"duplicate id {s.id} in the gallery")
        seen.add(s.id)

    ids = np.array([s.id for s in encoded], dtype=np.uint64)
    globals_f64 = np.stack([s.global_vec.astype(np.float64) for s in encoded])
    norms = np.linalg.norm(globals_f64, axis=1)
    if (norms == 0).any():
        bad = int(ids[int(np.argmax(norms == 0))])
        raise DataError(f"sample {bad}: zero-norm global vector")
    return GalleryIndex(
        modality=mod,
        ids=ids,
        norms=norms,
        globals_normalized=globals_f64 / norms[:, None],
        tokens=tuple(s.tokens for s in encoded),
        digest=digest, build_time=build_time,
    )


def save_index(index: GalleryIndex, dest) -> int:
    """Serialize the index; returns bytes written. Roundtrip is bit-exact."""
    counts = np.array([t.shape[0] for t in index.tokens], dtype="<u4")
    parts = [
        INDEX_MAGIC,
        bytes([INDEX_VERSION, index.modality.value]),
        np.array([index.n, index.output_dim], dtype="<u4").tobytes(),
        index.digest,
        np.array([index.build_time], dtype="<f8").tobytes(),
        index.ids.astype("<u8").tobytes(),
        index.norms.astype("<f8").tobytes(),
        np.ascontiguousarray(index.globals_normalized, dtype="<f8").tobytes(),
        counts.tobytes(),
    ]
    parts += [np.ascontiguousarray(t, dtype="<f4").tobytes() for t in index.tokens]
    blob = b"".join(parts)
    dest.write(blob)
    return len(blob)


def load_index(source) -> GalleryIndex:
    cur = _Cursor(source.read())
    magic = cur.take(4, "magic")
    if magic != INDEX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}")
    version = cur.scalar("<u1", "version")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    mod_raw = cur.scalar("<u1", "modality")
    try:
        mod = Modality(mod_raw)
    except ValueError:
        raise FormatError(f"unknown modality code {mod_raw}") from None
    n = cur.scalar("<u4", "sample_count")
    d = cur.scalar("<u4", "output_dim")
    if d < 1:
        raise FormatError("output_dim must be >= 1")
    digest = cur.take(DIGEST_SIZE, "digest")
    build_time = float(cur.array("<f8", 1, "build_time")[0])
    ids = cur.array("<u8", n, "ids").astype(np.uint64)
    if len(set(ids.tolist())) != n:
        raise DataError("duplicate ids in index file")
    norms = cur.array("<f8", n, "norms").astype(np.float64)
    if n and not ((norms > 0) & np.isfinite(norms)).all():
        raise DataError("index norms must be finite and positive")
    globals_normalized = cur.array("<f8", n * d, "globals").astype(np.float64).reshape(n, d)
    if n:
        row_norms = np.linalg.norm(globals_normalized, axis=1)
        if not np.isfinite(globals_normalized).all() or \
                np.abs(row_norms - 1.0).max() > 1e-7:
            raise DataError("index global rows are not unit-normalized")
    counts = cur.array("<u4", n, "token_counts")
    if n and (counts < 1).any():
        raise DataError("every indexed sample needs at least one token")
    tokens = []
    for i in range(n):
        m = int(counts[i])
        rows = cur.array("<f4", m * d, f"tokens[{i}]").astype(np.float32).reshape(m, d)
        if not np.isfinite(rows).all() or (np.linalg.norm(rows, axis=1) == 0).any():
            raise DataError(f"sample {int(ids[i])}: invalid token rows in index file")
        tokens.append(rows)
    if cur.pos != len(cur.data):
        raise FormatError(f"{len(cur.data) - cur.pos} trailing bytes after token payloads")
    return GalleryIndex(
        modality=mod, ids=ids, norms=norms,
        globals_normalized=globals_normalized, tokens=tuple(tokens),
        digest=digest, build_time=build_time,
    )
