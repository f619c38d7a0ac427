"""Sample data model and the binary feature file format.

A sample is one image or one text: a global vector plus a matrix of local
token vectors, all float32. The same container is used on both sides of
the encoder (raw extractor dumps in, embedding-space features out).

Binary format (little-endian), extension ``.tgf``:

    header, 21 bytes:
        magic        "TGF1"      4 bytes
        version      u8          = 1
        modality     u8          0 = image, 1 = text
        reserved     3 x u8      = 0
        sample_count u32
        global_dim   u32
        token_dim    u32
    per sample record:
        id           u64
        n_tokens     u32
        global_vec   global_dim x f32
        tokens       n_tokens x token_dim x f32, row-major

A JSON-lines mirror (one sample object per line) is accepted for ingestion
only; see :func:`read_jsonl`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, TruncationError

MAGIC = b"TGF1"
VERSION = 1
HEADER_SIZE = 21


class Modality(Enum):
    IMAGE = 0
    TEXT = 1


@dataclass(frozen=True)
class SampleFeatures:
    """One sample's identity, global vector, and local token matrix.

    Construction only coerces shapes and dtype; semantic invariants
    (finiteness, nonzero rows) are checked by :func:`validate_sample`
    so that malformed samples can exist long enough to be reported.
    """

    id: int
    modality: Modality
    global_vec: np.ndarray
    tokens: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.global_vec, dtype=np.float32)
        t = np.asarray(self.tokens, dtype=np.float32)
        if g.ndim != 1:
            raise DataError(f"sample {self.id}: global_vec must be 1-D, got shape {g.shape}")
        if t.ndim != 2:
            raise DataError(f"sample {self.id}: tokens must be 2-D, got shape {t.shape}")
        object.__setattr__(self, "global_vec", g)
        object.__setattr__(self, "tokens", t)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def global_dim(self) -> int:
        return self.global_vec.shape[0]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleFeatures):
            return NotImplemented
        return (
            self.id == other.id
            and self.modality is other.modality
            and self.global_vec.shape == other.global_vec.shape
            and self.tokens.shape == other.tokens.shape
            and self.global_vec.tobytes() == other.global_vec.tobytes()
            and self.tokens.tobytes() == other.tokens.tobytes()
        )

    def __hash__(self):
        return hash((self.id, self.modality))


@dataclass(frozen=True)
class RawImageInput:
    """Detector output for one image: per-region features and pixel boxes."""

    region_features: np.ndarray  # (r, d) float32
    boxes: np.ndarray  # (r, 4) float32, (x_min, y_min, x_max, y_max) in pixels
    image_width: float
    image_height: float
    global_feature: np.ndarray  # (d,) float32

    def __post_init__(self):
        f = np.asarray(self.region_features, dtype=np.float32)
        b = np.asarray(self.boxes, dtype=np.float32)
        g = np.asarray(self.global_feature, dtype=np.float32)
        if f.ndim != 2 or b.ndim != 2 or b.shape[1] != 4 or g.ndim != 1:
            raise DataError("raw image input has wrong array shapes")
        if f.shape[0] != b.shape[0]:
            raise DataError("region_features and boxes disagree on region count")
        object.__setattr__(self, "region_features", f)
        object.__setattr__(self, "boxes", b)
        object.__setattr__(self, "global_feature", g)

    def validate(self) -> None:
        r = self.region_features.shape[0]
        if r < 1:
            raise DataError("raw image input needs at least one region")
        if self.global_feature.shape[0] != self.region_features.shape[1]:
            raise DataError("global_feature dim differs from region feature dim")
        w, h = float(self.image_width), float(self.image_height)
        if w <= 0 or h <= 0:
            raise DataError("image width and height must be positive")
        b = self.boxes.astype(np.float64)
        ok = (
            (0 <= b[:, 0]) & (b[:, 0] <= b[:, 2]) & (b[:, 2] <= w)
            & (0 <= b[:, 1]) & (b[:, 1] <= b[:, 3]) & (b[:, 3] <= h)
        )
        if not bool(ok.all()):
            bad = int(np.nonzero(~ok)[0][0])
            raise DataError(f"box {bad} falls outside the {w:g}x{h:g} image frame")


# Violation labels returned by validate_sample. Stable strings, used in tests.
V_N_TOKENS = "n_tokens ≥ 1"
V_GLOBAL_DIM_MIN = "global_dim ≥ 1"
V_TOKEN_DIM_MIN = "token_dim ≥ 1"
V_FINITE = "finite floats"
V_GLOBAL_NONZERO = "nonzero global vector"
V_TOKEN_NONZERO = "nonzero token rows"
V_GLOBAL_DIM_MATCH = "global_dim matches expectation"
V_TOKEN_DIM_MATCH = "token_dim matches expectation"


@dataclass
class ValidationResult:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_sample(
    sample: SampleFeatures,
    expected_global_dim: int | None = None,
    expected_token_dim: int | None = None,
) -> ValidationResult:
    """Check every SampleFeatures invariant; violations are data, not faults."""
    v: list[str] = []
    if sample.n_tokens < 1:
        v.append(V_N_TOKENS)
    if sample.global_dim < 1:
        v.append(V_GLOBAL_DIM_MIN)
    if sample.token_dim < 1:
        v.append(V_TOKEN_DIM_MIN)
    if not (np.isfinite(sample.global_vec).all() and np.isfinite(sample.tokens).all()):
        v.append(V_FINITE)
    else:
        if sample.global_dim >= 1 and not sample.global_vec.any():
            v.append(V_GLOBAL_NONZERO)
        if sample.n_tokens >= 1 and sample.token_dim >= 1:
            if not sample.tokens.any(axis=1).all():
                v.append(V_TOKEN_NONZERO)
    if expected_global_dim is not None and sample.global_dim != expected_global_dim:
        v.append(V_GLOBAL_DIM_MATCH)
    if expected_token_dim is not None and sample.token_dim != expected_token_dim:
        v.append(V_TOKEN_DIM_MATCH)
    return ValidationResult(v)


def _uniform_header(
    samples: Sequence[SampleFeatures],
    modality: Modality | None,
    global_dim: int | None,
    token_dim: int | None,
) -> tuple[Modality, int, int]:
    if samples:
        m = samples[0].modality
        g = samples[0].global_dim
        t = samples[0].token_dim
        for s in samples:
            if s.modality is not m:
                raise FormatError(f"mixed modalities in one file (sample {s.id})")
            if s.global_dim != g or s.token_dim != t:
                raise FormatError(
                    f"sample {s.id} dims ({s.global_dim}, {s.token_dim}) "
                    f"differ from file dims ({g}, {t})"
                )
        if modality is not None and modality is not m:
            raise FormatError("explicit modality disagrees with samples")
        if global_dim is not None and global_dim != g:
            raise FormatError("explicit global_dim disagrees with samples")
        if token_dim is not None and token_dim != t:
            raise FormatError("explicit token_dim disagrees with samples")
        return m, g, t
    return modality or Modality.IMAGE, global_dim or 1, token_dim or 1


def write_feature_file(
    samples: Sequence[SampleFeatures],
    dest: BinaryIO,
    *,
    modality: Modality | None = None,
    global_dim: int | None = None,
    token_dim: int | None = None,
) -> int:
    """Serialize samples; returns the exact number of bytes written.

    All samples must share modality and dims. The optional keyword
    arguments pin the header for an empty sample list.
    """
    m, g, t = _uniform_header(samples, modality, global_dim, token_dim)
    parts = [
        MAGIC,
        bytes([VERSION, m.value, 0, 0, 0]),
        np.array([len(samples), g, t], dtype="<u4").tobytes(),
    ]
    for s in samples:
        parts.append(np.array([s.id], dtype="<u8").tobytes())
        parts.append(np.array([s.n_tokens], dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(s.global_vec, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.tokens, dtype="<f4").tobytes())
    blob = b"".join(parts)
    dest.write(blob)
    return len(blob)


class _Cursor:
    """Sequential reader over an in-memory byte string with truncation checks."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(f"file truncated reading {what}", self.pos, n)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def scalar(self, dtype: str, what: str) -> int:
        raw = self.take(np.dtype(dtype).itemsize, what)
        return int(np.frombuffer(raw, dtype=dtype)[0])

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(np.dtype(dtype).itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype).copy()


def read_feature_file(source: BinaryIO) -> list[SampleFeatures]:
    """Parse a binary feature file; every returned sample is validated."""
    cur = _Cursor(source.read())
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = cur.scalar("<u1", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    modality_code = cur.scalar("<u1", "modality")
    try:
        modality = Modality(modality_code)
    except ValueError:
        raise FormatError(f"unknown modality code {modality_code}") from None
    cur.take(3, "reserved")
    count = cur.scalar("<u4", "sample_count")
    global_dim = cur.scalar("<u4", "global_dim")
    token_dim = cur.scalar("<u4", "token_dim")

    samples: list[SampleFeatures] = []
    for k in range(count):
        sid = cur.scalar("<u8", f"sample {k} id")
        n_tokens = cur.scalar("<u4", f"sample {sid} n_tokens")
        g = cur.array("<f4", global_dim, f"sample {sid} global_vec")
        t = cur.array("<f4", n_tokens * token_dim, f"sample {sid} tokens")
        s = SampleFeatures(sid, modality, g, t.reshape(n_tokens, token_dim))
        res = validate_sample(s, global_dim, token_dim)
        if not res.ok:
            raise DataError(f"sample {sid} violates invariants: {', '.join(res.violations)}")
        samples.append(s)
    if cur.pos != len(cur.data):
        raise FormatError(f"{len(cur.data) - cur.pos} trailing bytes after last record")
    return samples


def read_jsonl(lines: Iterable[str]) -> list[SampleFeatures]:
    """Ingest the JSON-lines mirror format.

    Two line schemas are accepted (uniform within one stream):
      - sample objects: {"id", "modality", "global", "tokens"}
      - raw image objects: {"id", "region_features", "boxes", "width",
        "height", "global_feature"}, converted through the image token
        builder (box concat + normalization).
    """
    from .encoder import build_image_tokens  # local import, avoids a cycle

    samples: list[SampleFeatures] = []
    schema: str | None = None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"line {lineno}: not valid JSON ({e})") from None
        if "region_features" in obj:
            kind = "raw-image"
        elif "global" in obj and "tokens" in obj:
            kind = "sample"
        else:
            raise FormatError(f"line {lineno}: unrecognized object keys {sorted(obj)}")
        if schema is None:
            schema = kind
        elif schema != kind:
            raise FormatError(f"line {lineno}: mixed JSON schemas ({schema} then {kind})")
        try:
            if kind == "sample":
                modality = Modality[str(obj["modality"]).upper()]
                s = SampleFeatures(
                    int(obj["id"]),
                    modality,
                    np.asarray(obj["global"], dtype=np.float32),
                    np.asarray(obj["tokens"], dtype=np.float32),
                )
            else:
                raw = RawImageInput(
                    np.asarray(obj["region_features"], dtype=np.float32),
                    np.asarray(obj["boxes"], dtype=np.float32),
                    float(obj["width"]),
                    float(obj["height"]),
                    np.asarray(obj["global_feature"], dtype=np.float32),
                )
                mat = build_image_tokens(raw)
                s = SampleFeatures(int(obj["id"]), Modality.IMAGE, mat[0], mat[1:])
        except KeyError as e:
            raise FormatError(f"line {lineno}: missing key {e}") from None
        samples.append(s)
    return samples
