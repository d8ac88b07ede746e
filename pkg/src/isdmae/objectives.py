"""Training losses (differentiable, on Tensors) and evaluation metrics (on arrays)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import DegenerateInputError, ShapeError, UndefinedMetricError
from .numcore import Tensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEFAULT_LOGIT_SCALE = math.log(1 / 0.07)


@dataclass(frozen=True)
class SsimStats:
    mu_g: float
    mu_o: float
    var_g: float
    var_o: float
    cov: float
    c1: float = SSIM_C1
    c2: float = SSIM_C2

    @property
    def value(self) -> float:
        num = (2 * self.mu_g * self.mu_o + self.c1) * (2 * self.cov + self.c2)
        den = (self.mu_g ** 2 + self.mu_o ** 2 + self.c1) * (self.var_g + self.var_o + self.c2)
        return num / den


@dataclass(frozen=True)
class LossReport:
    ssim_loss: np.floating
    contrastive_loss: np.floating
    total: np.floating
    ssim_t: np.floating
    ssim_p: np.floating


def ssim_stats(a: np.ndarray, b: np.ndarray) -> SsimStats:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b = a.mean(), b.mean()
    return SsimStats(
        mu_g=mu_a, mu_o=mu_b,
        var_g=((a - mu_a) ** 2).mean(), var_o=((b - mu_b) ** 2).mean(),
        cov=((a - mu_a) * (b - mu_b)).mean(),
    )


def _per_sample_mean(x: Tensor) -> Tensor:
    n = x.shape[0]
    return nc.mean(nc.reshape(x, (n, -1)), axis=1)


def _expand(v: Tensor, shape) -> Tensor:
    return nc.broadcast_to(nc.reshape(v, (shape[0],) + (1,) * (len(shape) - 1)), shape)


def ssim(a: Tensor, b: Tensor, batched: bool = False) -> Tensor:
    """Whole-image SSIM with statistics over all channels and pixels jointly.

    With ``batched=True`` the leading axis indexes samples and the result is a
    vector of per-sample SSIM values; otherwise a scalar.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if not batched:
        return nc.reshape(ssim(nc.reshape(a, (1,) + a.shape), nc.reshape(b, (1,) + b.shape), True), ())
    mu_a, mu_b = _per_sample_mean(a), _per_sample_mean(b)
    da = a - _expand(mu_a, a.shape)
    db = b - _expand(mu_b, b.shape)
    var_a = _per_sample_mean(da * da)
    var_b = _per_sample_mean(db * db)
    cov = _per_sample_mean(da * db)
    num = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim_loss(originals: Tensor, recon_t: Tensor, recon_p: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Batch mean of (1 - SSIM) for each branch, summed.

    Returns ``(loss, ssim_t, ssim_p)`` where the last two are per-sample vectors.
    """
    if not (originals.shape == recon_t.shape == recon_p.shape):
        raise ShapeError(
            f"ssim_loss: shapes {originals.shape}, {recon_t.shape}, {recon_p.shape} differ"
        )
    s_t = ssim(originals, recon_t, batched=True)
    s_p = ssim(originals, recon_p, batched=True)
    loss = nc.mean(1.0 - s_t) + nc.mean(1.0 - s_p)
    return loss, s_t, s_p


def l2_normalize_rows(f: Tensor) -> Tensor:
    sq = nc.tsum(f * f, axis=1)
    if np.any(sq.data == 0):
        raise DegenerateInputError("zero-norm embedding row")
    norm = nc.sqrt(sq)
    return f / _expand(norm, f.shape)


def similarity_logits(f_t: Tensor, f_p: Tensor, logit_scale: float = DEFAULT_LOGIT_SCALE) -> Tensor:
    return nc.matmul(l2_normalize_rows(f_t), nc.transpose(l2_normalize_rows(f_p))) * logit_scale


def contrastive_loss(f_t: Tensor, f_p: Tensor, logit_scale: float = DEFAULT_LOGIT_SCALE) -> Tensor:
    """Symmetric InfoNCE over a batch: positives are the matching row indices."""
    if f_t.ndim != 2 or f_t.shape != f_p.shape:
        raise ShapeError(f"contrastive_loss: expected equal B×D inputs, got {f_t.shape}, {f_p.shape}")
    logits = similarity_logits(f_t, f_p, logit_scale)
    labels = list(range(f_t.shape[0]))
    l1 = nc.softmax_cross_entropy(logits, labels)
    l2 = nc.softmax_cross_entropy(nc.transpose(logits), labels)
    return (l1 + l2) * 0.5


def total_loss(originals: Tensor, recon_t: Tensor, recon_p: Tensor, emb_t: Tensor, emb_p: Tensor,
               logit_scale: float = DEFAULT_LOGIT_SCALE) -> tuple[Tensor, LossReport]:
    """Unweighted sum of the SSIM and contrastive terms, plus a float report."""
    l_ssim, s_t, s_p = ssim_loss(originals, recon_t, recon_p)
    l_cons = contrastive_loss(emb_t, emb_p, logit_scale)
    total = l_ssim + l_cons
    report = LossReport(
        ssim_loss=l_ssim.data[()], contrastive_loss=l_cons.data[()], total=total.data[()],
        ssim_t=s_t.data.mean(), ssim_p=s_p.data.mean(),
    )
    return total, report


def bce_loss(logits: Tensor, targets) -> Tensor:
    t = np.asarray(targets)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_loss: logits {logits.shape} vs targets {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss: targets must be 0 or 1")
    return nc.bce_with_logits(logits, t)


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def dice(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between foreground pixel sets (Euclidean)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"hausdorff: shape mismatch {pred.shape} vs {gt.shape}")
    a = np.argwhere(pred).astype(np.float64)
    b = np.argwhere(gt).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("hausdorff distance is undefined for an empty mask")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(math.sqrt(max(d2.min(axis=1).max(), d2.min(axis=0).max())))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with average ranks, so ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError("roc_auc: scores and labels must be equal-length 1-D sequences")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("roc_auc: labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))
