"""Dual transformer encoders mapping raw token sets into the shared space.

Each modality has its own homogeneous branch: an input projection into
``model_dim``, a stack of pre-layer-norm transformer layers (explicit
multi-head self-attention + 4x feed-forward, ReLU), a final layer norm,
and an output projection to ``output_dim``. No positional encoding is
added anywhere, so encoding is permutation-equivariant over local rows.

Row 0 of the input matrix is the sample's global token; its encoded row
becomes the global vector and the remaining rows become local tokens.

Checkpoint format (little-endian), extension ``.tgp``:

    magic "TGP1" (4 bytes), version u8 = 1,
    config: num_layers u32, num_heads u32, model_dim u32, output_dim u32,
            image_input_dim u32, text_input_dim u32, seed u64,
    then every parameter tensor as raw float64, image branch first, in
    the exact order of :meth:`TransformerBranch.parameter_tensors`.

All parameters are float64; training runs in float64 end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DomainError, FormatError, NumericError
from .features import Modality, RawImageInput, SampleFeatures
from .features import _Cursor  # shared binary reading helper

CHECKPOINT_MAGIC = b"TGP1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and seed of a dual-encoder pair (desk-scale defaults)."""

    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 64
    output_dim: int = 64
    image_input_dim: int = 36  # detector feature dim + 4 box coordinates
    text_input_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        dims = (
            self.num_layers, self.num_heads, self.model_dim,
            self.output_dim, self.image_input_dim, self.text_input_dim,
        )
        if any(d < 1 for d in dims):
            raise DomainError("all encoder dimensions and counts must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise DomainError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.seed < 0:
            raise DomainError("seed must be a nonnegative integer")


def build_image_tokens(raw: RawImageInput) -> np.ndarray:
    """Concatenate region features with their normalized boxes.

    Row 0 is the global feature joined with the full-frame box; boxes are
    divided by (w, h, w, h) so stored coordinates lie in [0, 1]. Output
    shape is (r + 1, d + 4), float32.
    """
    raw.validate()
    w, h = float(raw.image_width), float(raw.image_height)
    scale = np.array([w, h, w, h], dtype=np.float64)
    boxes = raw.boxes.astype(np.float64) / scale
    global_row = np.concatenate([raw.global_feature.astype(np.float64), [0.0, 0.0, 1.0, 1.0]])
    local_rows = np.concatenate([raw.region_features.astype(np.float64), boxes], axis=1)
    return np.concatenate([global_row[None, :], local_rows], axis=0).astype(np.float32)


class SelfAttention(nn.Module):
    """Multi-head self-attention with explicit Q/K/V/output projections."""

    def __init__(self, model_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.q_proj = nn.Linear(model_dim, model_dim)
        self.k_proj = nn.Linear(model_dim, model_dim)
        self.v_proj = nn.Linear(model_dim, model_dim)
        self.out_proj = nn.Linear(model_dim, model_dim)

    def forward(self, x: torch.Tensor, collect_attn: bool = False):
        b, n, dm = x.shape
        def split(t):
            return t.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)  # (b, heads, n, n)
        out = (attn @ v).transpose(1, 2).reshape(b, n, dm)
        out = self.out_proj(out)
        return (out, attn) if collect_attn else (out, None)


class EncoderLayer(nn.Module):
    """Pre-LN transformer layer: x + attn(ln1(x)), then x + ff(ln2(x))."""

    def __init__(self, model_dim: int, num_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(model_dim)
        self.attn = SelfAttention(model_dim, num_heads)
        self.ln2 = nn.LayerNorm(model_dim)
        self.ff1 = nn.Linear(model_dim, 4 * model_dim)
        self.ff2 = nn.Linear(4 * model_dim, model_dim)

    def forward(self, x: torch.Tensor, collect_attn: bool = False):
        a, attn = self.attn(self.ln1(x), collect_attn)
        x = x + a
        x = x + self.ff2(torch.relu(self.ff1(self.ln2(x))))
        return x, attn


class TransformerBranch(nn.Module):
    """One modality's encoder: projection, layer stack, output head."""

    def __init__(self, input_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.in_proj = nn.Linear(input_dim, cfg.model_dim)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.model_dim, cfg.num_heads) for _ in range(cfg.num_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.model_dim)
        self.out_proj = nn.Linear(cfg.model_dim, cfg.output_dim)

    def forward(self, x: torch.Tensor, collect_attn: bool = False):
        """x: (batch, rows, input_dim) -> (batch, rows, output_dim)."""
        h = self.in_proj(x)
        attns = [] if collect_attn else None
        for layer in self.layers:
            h, attn = layer(h, collect_attn)
            if collect_attn:
                attns.append(attn)
        return self.out_proj(self.final_norm(h)), attns

    def parameter_tensors(self) -> list[tuple[str, torch.Tensor]]:
        """Parameters in the checkpoint's canonical order."""
        out = [("in_proj.weight", self.in_proj.weight), ("in_proj.bias", self.in_proj.bias)]
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            out += [
                (p + "ln1.weight", layer.ln1.weight), (p + "ln1.bias", layer.ln1.bias),
                (p + "attn.q_proj.weight", layer.attn.q_proj.weight),
                (p + "attn.q_proj.bias", layer.attn.q_proj.bias),
                (p + "attn.k_proj.weight", layer.attn.k_proj.weight),
                (p + "attn.k_proj.bias", layer.attn.k_proj.bias),
                (p + "attn.v_proj.weight", layer.attn.v_proj.weight),
                (p + "attn.v_proj.bias", layer.attn.v_proj.bias),
                (p + "attn.out_proj.weight", layer.attn.out_proj.weight),
                (p + "attn.out_proj.bias", layer.attn.out_proj.bias),
                (p + "ln2.weight", layer.ln2.weight), (p + "ln2.bias", layer.ln2.bias),
                (p + "ff1.weight", layer.ff1.weight), (p + "ff1.bias", layer.ff1.bias),
                (p + "ff2.weight", layer.ff2.weight), (p + "ff2.bias", layer.ff2.bias),
            ]
        out += [
            ("final_norm.weight", self.final_norm.weight),
            ("final_norm.bias", self.final_norm.bias),
            ("out_proj.weight", self.out_proj.weight),
            ("out_proj.bias", self.out_proj.bias),
        ]
        return out


class DualEncoder(nn.Module):
    """The full learnable parameter set: one branch per modality."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image_branch = TransformerBranch(cfg.image_input_dim, cfg)
        self.text_branch = TransformerBranch(cfg.text_input_dim, cfg)
        self.double()

    def branch(self, modality: Modality) -> TransformerBranch:
        return self.image_branch if modality is Modality.IMAGE else self.text_branch

    def parameter_tensors(self) -> list[tuple[str, torch.Tensor]]:
        return (
            [("image." + n, t) for n, t in self.image_branch.parameter_tensors()]
            + [("text." + n, t) for n, t in self.text_branch.parameter_tensors()]
        )

    def flat_parameters(self) -> np.ndarray:
        """All parameters concatenated into one float64 vector (canonical order)."""
        return np.concatenate(
            [t.detach().numpy().ravel() for _, t in self.parameter_tensors()]
        )

    def load_flat_parameters(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        with torch.no_grad():
            for _, t in self.parameter_tensors():
                n = t.numel()
                if pos + n > vec.size:
                    raise DomainError("flat parameter vector too short")
                t.copy_(torch.from_numpy(vec[pos : pos + n].reshape(t.shape)))
                pos += n
        if pos != vec.size:
            raise DomainError("flat parameter vector too long")


def init_params(cfg: EncoderConfig) -> DualEncoder:
    """Deterministically initialize a dual encoder from cfg.seed.

    Linear weights are N(0, 1/fan_in) (scale 1/sqrt(fan_in)), all biases
    zero, layer norms identity. Draws come from one PCG64 stream in the
    checkpoint's canonical tensor order, so identical configs give
    identical parameter bytes.
    """
    model = DualEncoder(cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    with torch.no_grad():
        for name, t in model.parameter_tensors():
            if name.endswith("weight") and t.ndim == 2:
                fan_in = t.shape[1]
                w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=tuple(t.shape))
                t.copy_(torch.from_numpy(w))
            elif name.endswith("weight"):  # 1-D: layer norm scale
                t.fill_(1.0)
            else:
                t.zero_()
    return model


def _encode_matrix(tokens: np.ndarray, branch: TransformerBranch, input_dim: int,
                   what: str) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise DomainError(f"{what}: token matrix must be 2-D, got shape {tokens.shape}")
    if tokens.shape[0] < 2:
        raise DomainError(f"{what}: need a global row plus at least one local row")
    if tokens.shape[1] != input_dim:
        raise DomainError(
            f"{what}: token dim {tokens.shape[1]} does not match input dim {input_dim}"
        )
    if not np.isfinite(tokens).all():
        raise DomainError(f"{what}: input contains non-finite values")
    with torch.no_grad():
        out, _ = branch(torch.from_numpy(tokens).unsqueeze(0))
    out = out.squeeze(0).numpy()
    if not np.isfinite(out).all():
        raise NumericError(f"{what}: encoder produced non-finite output")
    return out


def encode_image(tokens: np.ndarray, params: DualEncoder, sample_id: int = 0) -> SampleFeatures:
    """Encode an image token matrix (global row first) into the shared space."""
    out = _encode_matrix(tokens, params.image_branch, params.cfg.image_input_dim, "encode_image")
    return SampleFeatures(sample_id, Modality.IMAGE,
                          out[0].astype(np.float32), out[1:].astype(np.float32))


def encode_text(tokens: np.ndarray, params: DualEncoder, sample_id: int = 0) -> SampleFeatures:
    """Encode a text token matrix (sentence row first) into the shared space."""
    out = _encode_matrix(tokens, params.text_branch, params.cfg.text_input_dim, "encode_text")
    return SampleFeatures(sample_id, Modality.TEXT,
                          out[0].astype(np.float32), out[1:].astype(np.float32))


def encode_samples(samples: list[SampleFeatures], params: DualEncoder) -> list[SampleFeatures]:
    """Encode raw-side samples (global_dim == token_dim) through their branch."""
    out = []
    for s in samples:
        if s.global_dim != s.token_dim:
            raise DomainError(
                f"sample {s.id}: raw global_dim {s.global_dim} != token_dim {s.token_dim}; "
                "cannot stack the encoder input matrix"
            )
        mat = np.concatenate([s.global_vec[None, :], s.tokens], axis=0)
        enc = encode_image(mat, params, s.id) if s.modality is Modality.IMAGE \
            else encode_text(mat, params, s.id)
        out.append(enc)
    return out


def save_checkpoint(params: DualEncoder, dest) -> int:
    """Serialize config + all tensors; returns bytes written. Bit-exact roundtrip."""
    cfg = params.cfg
    parts = [
        CHECKPOINT_MAGIC,
        bytes([CHECKPOINT_VERSION]),
        np.array(
            [cfg.num_layers, cfg.num_heads, cfg.model_dim, cfg.output_dim,
             cfg.image_input_dim, cfg.text_input_dim],
            dtype="<u4",
        ).tobytes(),
        np.array([cfg.seed], dtype="<u8").tobytes(),
    ]
    for _, t in params.parameter_tensors():
        parts.append(np.ascontiguousarray(t.detach().numpy(), dtype="<f8").tobytes())
    blob = b"".join(parts)
    dest.write(blob)
    return len(blob)


def load_checkpoint(source) -> DualEncoder:
    cur = _Cursor(source.read())
    magic = cur.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = cur.scalar("<u1", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fields = cur.array("<u4", 6, "config")
    seed = cur.scalar("<u8", "seed")
    cfg = EncoderConfig(
        num_layers=int(fields[0]), num_heads=int(fields[1]), model_dim=int(fields[2]),
        output_dim=int(fields[3]), image_input_dim=int(fields[4]),
        text_input_dim=int(fields[5]), seed=seed,
    )
    model = DualEncoder(cfg)
    with torch.no_grad():
        for name, t in model.parameter_tensors():
            vals = cur.array("<f8", t.numel(), name)
            t.copy_(torch.from_numpy(vals.reshape(tuple(t.shape))))
    if cur.pos != len(cur.data):
        raise FormatError(f"{len(cur.data) - cur.pos} trailing bytes after last tensor")
    return model
