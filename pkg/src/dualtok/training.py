"""Training loop: seeded batching, hard-negative mining, adaptive-moment
updates, and per-epoch validation recall.

Reproducibility contract: training is a deterministic function of the
dataset bytes and the config. Epoch shuffles come from a counter-based
Philox stream (key = seed, counter = [epoch, 0, 0, 0]) and the held-out
validation split from the same key at counter [0, 1, 0, 0], so no draw
depends on call order. The last batch of an epoch is kept when it still
holds at least two pairs (mining needs a negative) and dropped
otherwise.

Each sample's encoder input is its stored global row stacked on top of
its token rows, which requires raw features with global_dim ==
token_dim (the ingestion and synthetic paths both produce this shape).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .encoder import DualEncoder, TransformerBranch, encode_samples
from .engine import InferenceConfig
from .errors import DataError, DomainError, NumericError
from .evaluation import GroundTruth, evaluate_retrieval
from .features import SampleFeatures
from .index import build_index
from .losses import LossConfig, VALID_TASKS, batch_task_loss

Pair = tuple[SampleFeatures, SampleFeatures]


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = LossConfig()
    task: str = "joint"
    batch_size: int = 40
    epochs: int = 30
    learning_rate: float = 1e-3
    seed: int = 0
    grad_clip_norm: float | None = None  # clip at 5.0 is the conventional choice

    def __post_init__(self):
        if self.task not in VALID_TASKS:
            raise DomainError(f"unknown task {self.task!r}, expected one of {VALID_TASKS}")
        if self.batch_size < 2:
            raise DomainError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise DomainError(f"epochs must be >= 0, got {self.epochs}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise DomainError(f"learning_rate must be finite and > 0, "
                              f"got {self.learning_rate}")
        if self.seed < 0:
            raise DomainError("seed must be a nonnegative integer")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise DomainError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    r1_global: float
    r1_local: float


@dataclass
class TrainResult:
    params: DualEncoder
    history: tuple[EpochStats, ...]
    mode_evaluations: dict[str, int]  # how often each similarity mode fed the loss


def _stack_input(sample: SampleFeatures) -> np.ndarray:
    if sample.global_dim != sample.token_dim:
        raise DataError(
            f"sample {sample.id}: global_dim {sample.global_dim} != token_dim "
            f"{sample.token_dim}; cannot stack the encoder input"
        )
    return np.concatenate(
        [sample.global_vec[None, :].astype(np.float64),
         sample.tokens.astype(np.float64)], axis=0)


def _encode_batch(mats: list[np.ndarray], branch: TransformerBranch,
                  need_tokens: bool):
    """Batch-encode stacked inputs, grouping equal row counts.

    Returns (globals, padded_tokens, mask); the token pieces are None
    when need_tokens is false, so global-only training provably never
    materializes token embeddings for the loss.
    """
    groups: dict[int, list[int]] = {}
    for i, m in enumerate(mats):
        groups.setdefault(m.shape[0], []).append(i)

    order: list[int] = []
    global_parts, token_parts = [], []
    max_local = max(m.shape[0] for m in mats) - 1
    for rows, idxs in groups.items():
        order.extend(idxs)
        x = torch.from_numpy(np.stack([mats[i] for i in idxs]))
        out, _ = branch(x)  # (g, rows, out_dim)
        global_parts.append(out[:, 0, :])
        if need_tokens:
            locals_ = out[:, 1:, :]
            pad = max_local - (rows - 1)
            if pad:
                locals_ = torch.nn.functional.pad(locals_, (0, 0, 0, pad))
            token_parts.append(locals_)

    inv = torch.from_numpy(np.argsort(np.array(order)))
    globals_ = torch.cat(global_parts)[inv]
    if not need_tokens:
        return globals_, None, None
    tokens = torch.cat(token_parts)[inv]
    mask = np.zeros((len(mats), max_local), dtype=bool)
    for i, m in enumerate(mats):
        mask[i, : m.shape[0] - 1] = True
    return globals_, tokens, torch.from_numpy(mask)


def evaluate_batch_loss(batch: list[Pair], params: DualEncoder, cfg: TrainConfig,
                        mined=None, collect_gaps: bool = False):
    """Loss of a batch at the current parameters, without any update."""
    if len(batch) < 2:
        raise DomainError(f"a batch needs at least 2 pairs, got {len(batch)}")
    need_tokens = cfg.task in ("local", "joint")
    img_mats = [_stack_input(img) for img, _ in batch]
    txt_mats = [_stack_input(txt) for _, txt in batch]
    with torch.no_grad():
        ig, it, im = _encode_batch(img_mats, params.image_branch, need_tokens)
        tg, tt, tm = _encode_batch(txt_mats, params.text_branch, need_tokens)
        loss, details = batch_task_loss(cfg.task, ig, tg, it, im, tt, tm,
                                        cfg=cfg.loss, mined=mined,
                                        collect_gaps=collect_gaps)
    return float(loss.item()), details


def train_step(batch: list[Pair], params: DualEncoder, optimizer: torch.optim.Optimizer,
               cfg: TrainConfig, counters: dict[str, int] | None = None):
    """One mining + gradient update on a batch; returns (params, loss)."""
    if len(batch) < 2:
        raise DomainError(f"a batch needs at least 2 pairs, got {len(batch)}")
    need_tokens = cfg.task in ("local", "joint")
    img_mats = [_stack_input(img) for img, _ in batch]
    txt_mats = [_stack_input(txt) for _, txt in batch]
    ig, it, im = _encode_batch(img_mats, params.image_branch, need_tokens)
    tg, tt, tm = _encode_batch(txt_mats, params.text_branch, need_tokens)
    loss, details = batch_task_loss(cfg.task, ig, tg, it, im, tt, tm, cfg=cfg.loss)
    value = float(loss.item())
    if not math.isfinite(value):
        raise NumericError(f"non-finite batch loss {value}")
    optimizer.zero_grad()
    loss.backward()
    for p in params.parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NumericError("non-finite gradient; aborting the step")
    if cfg.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(params.parameters(), cfg.grad_clip_norm)
    optimizer.step()
    if counters is not None:
        for mode_name in details["modes"]:
            counters[mode_name] = counters.get(mode_name, 0) + 1
    return params, value


def make_optimizer(params: DualEncoder, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params.parameters(), lr=cfg.learning_rate,
                            betas=(0.9, 0.999), eps=1e-8)


def _pair_dataset(images: list[SampleFeatures], texts: list[SampleFeatures],
                  pairs: list[tuple[int, int]]) -> list[Pair]:
    img_by_id = {s.id: s for s in images}
    txt_by_id = {s.id: s for s in texts}
    dataset = []
    for img_id, txt_id in pairs:
        img, txt = img_by_id.get(img_id), txt_by_id.get(txt_id)
        if img is None:
            raise DataError(f"pairing references image id {img_id} absent from the image file")
        if txt is None:
            raise DataError(f"pairing references text id {txt_id} absent from the text file")
        dataset.append((img, txt))
    return dataset


def _validation_r1(val_pairs: list[Pair], params: DualEncoder) -> tuple[float, float]:
    enc_img = encode_samples([img for img, _ in val_pairs], params)
    enc_txt = encode_samples([txt for _, txt in val_pairs], params)
    ii, ti = build_index(enc_img), build_index(enc_txt)
    gt = GroundTruth.from_pairs([(img.id, txt.id) for img, txt in val_pairs])
    out = []
    for mode in ("global", "local"):
        rep = evaluate_retrieval(ii, ti, gt, InferenceConfig(), mode)
        out.append(float(rep.text_to_image.r1 + rep.image_to_text.r1) / 2.0)
    return out[0], out[1]


def train(images: list[SampleFeatures], texts: list[SampleFeatures],
          pairs: list[tuple[int, int]], params: DualEncoder,
          cfg: TrainConfig) -> TrainResult:
    """Full training run; see the module docstring for the determinism
    contract. History rows carry the mean batch loss and validation R@1
    (mean of the two directions) under global and token-level scoring.
    """
    dataset = _pair_dataset(images, texts, pairs)
    n = len(dataset)
    if n < 2:
        raise DomainError(f"training needs at least 2 pairs, got {n}")

    n_val = max(1, n // 10)
    if n - n_val < 2:
        n_val = 0
    split_rng = np.random.Generator(np.random.Philox(key=cfg.seed, counter=[0, 1, 0, 0]))
    perm = split_rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    val_pairs = [dataset[int(i)] for i in val_idx]

    optimizer = make_optimizer(params, cfg)
    counters: dict[str, int] = {}
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        epoch_rng = np.random.Generator(
            np.random.Philox(key=cfg.seed, counter=[epoch, 0, 0, 0]))
        order = train_idx[epoch_rng.permutation(len(train_idx))]
        batch_losses = []
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            sel = order[start : start + cfg.batch_size]
            if len(sel) < 2:
                continue
            batch = [dataset[int(j)] for j in sel]
            try:
                _, value = train_step(batch, params, optimizer, cfg, counters)
            except NumericError as err:
                raise NumericError(f"epoch {epoch}, batch {bi}: {err}") from err
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses))
        if val_pairs:
            r1g, r1l = _validation_r1(val_pairs, params)
        else:
            r1g = r1l = math.nan
        history.append(EpochStats(epoch, epoch_loss, r1g, r1l))
    return TrainResult(params=params, history=tuple(history), mode_evaluations=counters)


def history_lines(history: tuple[EpochStats, ...]) -> list[str]:
    lines = ["epoch\tloss\tr1_global\tr1_local"]
    for h in history:
        lines.append(f"{h.epoch}\t{h.loss:.17g}\t{h.r1_global:.6f}\t{h.r1_local:.6f}")
    return lines
