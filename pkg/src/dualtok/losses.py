"""Contrastive training objective over aligned image/text batches.

The per-pair loss has two parts, each applied under one similarity mode
(global cosine or token-level MaxSim):

* a triplet ranking term pushing the true pair above the hardest
  in-batch negatives by a margin ``delta``, once with the hardest text
  substituted and once with the hardest image substituted;
* a consistency term tying the two intra-modal similarity structures
  together: the image-image and text-text similarities toward the same
  mined negatives may differ by at most ``sigma`` before a hinge
  penalty kicks in. ``sigma = math.inf`` disables the term, leaving a
  plain hard-negative triplet loss.

Batch losses are sums over batch items. The joint task applies the full
pair loss under both modes and adds them; "global" and "local" tasks use
exactly one mode and never touch the other mode's inputs (the global
task does not read token matrices at all).

Hard negatives: for pair i, the text-side negative is the non-matching
text most similar to image i (row argmax of the cross matrix with the
diagonal excluded) and the image-side negative is the non-matching image
most similar to text i (column argmax). Ties resolve to the lowest
index. Mining happens independently per similarity mode, on detached
values, so gradients never flow through negative selection.

``gradient_check`` is the independent oracle for any analytic gradient:
central finite differences, coordinate by coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import DomainError, NumericError

VALID_TASKS = ("global", "local", "joint")


@dataclass(frozen=True)
class LossConfig:
    delta: float = 0.2
    sigma: float = 0.3

    def __post_init__(self):
        if not (math.isfinite(self.delta) and self.delta >= 0.0):
            raise DomainError(f"delta must be finite and >= 0, got {self.delta}")
        if math.isnan(self.sigma) or self.sigma < 0.0:
            raise DomainError(f"sigma must be >= 0 (inf allowed), got {self.sigma}")


def _hinge(x):
    if isinstance(x, torch.Tensor):
        return torch.clamp_min(x, 0.0)
    return max(0.0, x)


def _absolute(x):
    if isinstance(x, torch.Tensor):
        return torch.abs(x)
    return abs(x)


def triplet_ranking_loss(s_pos, s_text_neg, s_image_neg, delta: float):
    """Margin hinge against the hardest text and hardest image negative.

    Accepts floats or torch scalars; s_pos is the matched-pair score,
    s_text_neg the image's score against the mined text negative,
    s_image_neg the mined image negative's score against the text.
    """
    return _hinge(delta - s_pos + s_text_neg) + _hinge(delta - s_pos + s_image_neg)


def consistency_loss(s_ii_text_neg, s_tt_text_neg, s_ii_image_neg, s_tt_image_neg,
                     sigma: float):
    """Hinge on the gap between image-image and text-text similarity.

    The first two arguments score pair i against the pair that supplied
    the text negative (image side, then text side); the last two score
    it against the pair that supplied the image negative.
    """
    if math.isinf(sigma):
        zero = s_ii_text_neg * 0.0  # keeps tensor type when inputs are tensors
        return zero
    return (_hinge(_absolute(s_ii_text_neg - s_tt_text_neg) - sigma)
            + _hinge(_absolute(s_ii_image_neg - s_tt_image_neg) - sigma))


def combined_pair_loss(s_pos, s_text_neg, s_image_neg,
                       s_ii_text_neg, s_tt_text_neg, s_ii_image_neg, s_tt_image_neg,
                       cfg: LossConfig):
    """Ranking term plus consistency term for one pair under one mode."""
    return (triplet_ranking_loss(s_pos, s_text_neg, s_image_neg, cfg.delta)
            + consistency_loss(s_ii_text_neg, s_tt_text_neg,
                               s_ii_image_neg, s_tt_image_neg, cfg.sigma))


def mine_hard_negatives(cross: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hardest in-batch negatives from a square image-by-text score matrix.

    Returns (text_neg, image_neg): text_neg[i] is the row argmax of row i
    excluding the diagonal, image_neg[i] the column argmax of column i
    excluding the diagonal. Ties go to the lowest index.
    """
    cross = np.asarray(cross, dtype=np.float64)
    if cross.ndim != 2 or cross.shape[0] != cross.shape[1]:
        raise DomainError(f"expected a square score matrix, got shape {cross.shape}")
    n = cross.shape[0]
    if n < 2:
        raise DomainError("negative mining needs at least two pairs in the batch")
    if not np.isfinite(cross).all():
        raise NumericError("non-finite scores in the mining matrix")
    masked = cross.copy()
    np.fill_diagonal(masked, -np.inf)
    text_neg = np.argmax(masked, axis=1)
    image_neg = np.argmax(masked, axis=0)
    return text_neg.astype(np.int64), image_neg.astype(np.int64)


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.norm(a, dim=1, keepdim=True)
    nb = torch.linalg.norm(b, dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericError("zero vector encountered while building a cosine matrix")
    return (a / na) @ (b / nb).T


def _maxsim_matrix(x_tokens: torch.Tensor, x_mask: torch.Tensor,
                   y_tokens: torch.Tensor, y_mask: torch.Tensor,
                   collect_gap: bool = False):
    """All-pairs token similarity: best-X per Y token, averaged over Y.

    Shapes: x_tokens (B1, nx, d) with bool mask (B1, nx); y_tokens
    (B2, ny, d) with mask (B2, ny). Returns (S, gap) where S[i, j]
    scores X sample i against Y sample j and gap is the smallest
    winner-vs-runner-up margin in any best-X reduction (None unless
    requested; used to detect argmax ties before gradient checks).
    """
    if bool((~x_mask).all(dim=1).any()) or bool((~y_mask).all(dim=1).any()):
        raise DomainError("every sample needs at least one valid token")
    xn_norm = torch.linalg.norm(x_tokens, dim=2, keepdim=True)
    yn_norm = torch.linalg.norm(y_tokens, dim=2, keepdim=True)
    if bool((xn_norm.squeeze(2)[x_mask] == 0).any()) or bool((yn_norm.squeeze(2)[y_mask] == 0).any()):
        raise NumericError("zero token row encountered while building token similarities")
    xn = x_tokens / torch.where(xn_norm > 0, xn_norm, torch.ones_like(xn_norm))
    yn = y_tokens / torch.where(yn_norm > 0, yn_norm, torch.ones_like(yn_norm))
    sim = torch.einsum("imd,jnd->ijmn", xn, yn)  # (B1, B2, nx, ny)
    sim = sim.masked_fill(~x_mask[:, None, :, None], float("-inf"))
    best = sim.max(dim=2).values  # (B1, B2, ny)
    gap = None
    if collect_gap:
        if sim.shape[2] >= 2:
            top2 = sim.topk(2, dim=2).values  # (B1, B2, 2, ny)
            g = top2[:, :, 0, :] - top2[:, :, 1, :]
            g = g.masked_fill(~y_mask[None, :, :], float("inf"))
            g = torch.nan_to_num(g, nan=float("inf"), posinf=float("inf"))
            gap = float(g.min().item())
        else:
            gap = float("inf")
    best = best.masked_fill(~y_mask[None, :, :], 0.0)
    counts = y_mask.sum(dim=1).to(best.dtype)
    return best.sum(dim=2) / counts[None, :], gap


def _mode_loss(cross: torch.Tensor, intra_x: torch.Tensor, intra_t: torch.Tensor,
               cfg: LossConfig, mined: tuple[np.ndarray, np.ndarray] | None):
    n = cross.shape[0]
    if mined is None:
        mined = mine_hard_negatives(cross.detach().numpy())
    text_neg, image_neg = mined
    idx = torch.arange(n)
    t_neg = torch.as_tensor(np.asarray(text_neg, dtype=np.int64))
    i_neg = torch.as_tensor(np.asarray(image_neg, dtype=np.int64))

    s_pos = cross[idx, idx]
    s_text_neg = cross[idx, t_neg]
    s_image_neg = cross[i_neg, idx]
    rank_args = torch.stack([cfg.delta - s_pos + s_text_neg,
                             cfg.delta - s_pos + s_image_neg])
    loss = _hinge(rank_args).sum()
    kink_args = [rank_args.reshape(-1)]

    if not math.isinf(cfg.sigma):
        d_text = intra_x[idx, t_neg] - intra_t[idx, t_neg]
        d_image = intra_x[idx, i_neg] - intra_t[idx, i_neg]
        diffs = torch.stack([d_text, d_image])
        cons_args = torch.abs(diffs) - cfg.sigma
        loss = loss + _hinge(cons_args).sum()
        kink_args += [diffs.reshape(-1), cons_args.reshape(-1)]
    return loss, mined, torch.cat(kink_args).detach().numpy()


def batch_task_loss(
    task: str,
    img_global: torch.Tensor | None,
    txt_global: torch.Tensor | None,
    img_tokens: torch.Tensor | None = None,
    img_mask: torch.Tensor | None = None,
    txt_tokens: torch.Tensor | None = None,
    txt_mask: torch.Tensor | None = None,
    cfg: LossConfig = LossConfig(),
    mined: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
    collect_gaps: bool = False,
) -> tuple[torch.Tensor, dict]:
    """Total batch loss for one training task.

    task "global" uses only the global vectors, "local" only the token
    matrices, "joint" both (summed). Precomputed negatives may be passed
    per mode via ``mined``; otherwise they are mined from this batch.

    Returns (loss, details). details["modes"] maps each evaluated mode
    to its float loss, details["mined"] to the negatives used, and
    details["kink_args"] holds every hinge and absolute-value argument
    (for steering gradient checks away from kinks). When collect_gaps
    is set, details["maxsim_gap"] reports the smallest argmax margin
    seen inside the local mode.
    """
    if task not in VALID_TASKS:
        raise DomainError(f"unknown task {task!r}, expected one of {VALID_TASKS}")
    mined = mined or {}
    total = None
    details: dict = {"modes": {}, "mined": {}, "kink_args": np.empty(0)}
    kinks = []

    if task in ("global", "joint"):
        if img_global is None or txt_global is None:
            raise DomainError("global-mode loss needs both global embedding matrices")
        if img_global.shape[0] != txt_global.shape[0]:
            raise DomainError("image and text batches differ in length")
        cross = _cosine_matrix(img_global, txt_global)
        intra_i = _cosine_matrix(img_global, img_global)
        intra_t = _cosine_matrix(txt_global, txt_global)
        loss, used, args = _mode_loss(cross, intra_i, intra_t, cfg, mined.get("global"))
        total = loss
        details["modes"]["global"] = float(loss.item())
        details["mined"]["global"] = used
        kinks.append(args)

    if task in ("local", "joint"):
        if img_tokens is None or txt_tokens is None:
            raise DomainError("local-mode loss needs both token tensors")
        if img_mask is None:
            img_mask = torch.ones(img_tokens.shape[:2], dtype=torch.bool)
        if txt_mask is None:
            txt_mask = torch.ones(txt_tokens.shape[:2], dtype=torch.bool)
        if img_tokens.shape[0] != txt_tokens.shape[0]:
            raise DomainError("image and text batches differ in length")
        cross, gap_ct = _maxsim_matrix(img_tokens, img_mask, txt_tokens, txt_mask,
                                       collect_gaps)
        intra_i, gap_ii = _maxsim_matrix(img_tokens, img_mask, img_tokens, img_mask,
                                         collect_gaps and not math.isinf(cfg.sigma))
        intra_t, gap_tt = _maxsim_matrix(txt_tokens, txt_mask, txt_tokens, txt_mask,
                                         collect_gaps and not math.isinf(cfg.sigma))
        loss, used, args = _mode_loss(cross, intra_i, intra_t, cfg, mined.get("local"))
        total = loss if total is None else total + loss
        details["modes"]["local"] = float(loss.item())
        details["mined"]["local"] = used
        kinks.append(args)
        if collect_gaps:
            gaps = [g for g in (gap_ct, gap_ii, gap_tt) if g is not None]
            details["maxsim_gap"] = min(gaps) if gaps else float("inf")

    details["kink_args"] = np.concatenate(kinks) if kinks else np.empty(0)
    return total, details


@dataclass(frozen=True)
class GradientCheckReport:
    max_rel_err: float
    worst_coord: int
    analytic: float
    numeric: float
    n_checked: int


def gradient_check(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    epsilon: float = 1e-6,
    coords: Iterable[int] | None = None,
) -> GradientCheckReport:
    """Compare an analytic gradient against central finite differences.

    value_and_grad maps a flat float64 vector to (value, gradient).
    Relative error per coordinate is |a - n| / max(1, |a|, |n|); the
    report carries the worst coordinate. Pass ``coords`` to spot-check a
    subset on large parameter vectors.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.ndim != 1:
        raise DomainError("gradient_check expects a flat parameter vector")
    if not (epsilon > 0 and math.isfinite(epsilon)):
        raise DomainError(f"epsilon must be finite and positive, got {epsilon}")
    _, grad = value_and_grad(point)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise DomainError(
            f"gradient shape {grad.shape} does not match point shape {point.shape}"
        )
    coord_list = list(range(point.size)) if coords is None else list(coords)
    worst = (-1.0, -1, 0.0, 0.0)
    for c in coord_list:
        step = np.zeros_like(point)
        step[c] = epsilon
        f_plus, _ = value_and_grad(point + step)
        f_minus, _ = value_and_grad(point - step)
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        err = abs(grad[c] - numeric) / max(1.0, abs(grad[c]), abs(numeric))
        if err > worst[0]:
            worst = (err, c, float(grad[c]), float(numeric))
    return GradientCheckReport(
        max_rel_err=worst[0], worst_coord=worst[1],
        analytic=worst[2], numeric=worst[3], n_checked=len(coord_list),
    )


def torch_value_and_grad(fn: Callable[[torch.Tensor], torch.Tensor]):
    """Wrap a torch scalar function into gradient_check's expected shape."""
    def vag(x: np.ndarray) -> tuple[float, np.ndarray]:
        xt = torch.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        y = fn(xt)
        (grad,) = torch.autograd.grad(y, xt, allow_unused=True)
        g = np.zeros(xt.shape) if grad is None else grad.detach().numpy().copy()
        return float(y.item()), g
    return vag
