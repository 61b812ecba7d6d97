"""Training objectives: SoftDice, key-point margin loss, their convex
blend, symmetric Chamfer distance and diagonal-Gaussian KL divergence.

Every loss accepts either a plain ndarray (returning a float) or an
autodiff :class:`~advseg.autodiff.Tensor` (returning a scalar Tensor),
so the same formulas serve metrics and gradient-based training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import ClassStats

DICE_EPS = 1e-7


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _as_result(value, want_tensor: bool):
    if want_tensor:
        return value
    return float(value.data)


def soft_dice(probs, labels) -> "float | Tensor":
    """SoftDice loss over softmax rows: 1 - mean per-present-class dice.

    dice_y = (2 * sum_j p_jy * g_jy + eps) / (sum_j p_jy^2 + sum_j g_jy^2 + eps)
    with one-hot ground truth g; classes absent from the labels are
    excluded from the mean. Always in [0, 1].
    """
    want_tensor = isinstance(probs, Tensor)
    p = probs if want_tensor else Tensor(probs)
    y = np.asarray(labels, dtype=np.int64)
    c = p.data.shape[1]
    g = one_hot(y, c)
    counts = g.sum(axis=0)
    present = counts > 0

    inter = ad.tsum(ad.mul(p, g), axis=0)
    psum = ad.tsum(ad.mul(p, p), axis=0)
    dice = ad.div(ad.add(ad.mul(inter, 2.0), DICE_EPS),
                  ad.add(ad.add(psum, counts), DICE_EPS))
    mean_dice = ad.mul(ad.tsum(ad.mul(dice, present.astype(float))), 1.0 / present.sum())
    return _as_result(ad.add(ad.mul(mean_dice, -1.0), 1.0), want_tensor)


@dataclass
class MarginTable:
    """Per-class margins plus the softmax scale and generation knobs."""

    margins: np.ndarray
    scale: float
    exponent: float
    max_margin: float


def dynamic_margins(stats: ClassStats, exponent: float = 0.25,
                    max_margin: float = 0.5, scale: float = 10.0) -> MarginTable:
    """Count-driven class margins: rarer classes get wider margins.

    m_y = max_margin * (n_y / n_min)^(-exponent) with n_min the smallest
    nonzero count; classes absent from the data get the full max_margin.
    """
    counts = np.asarray(stats.counts, dtype=np.float64)
    if not (counts > 0).any():
        raise ValueError("all class counts are zero")
    n_min = counts[counts > 0].min()
    margins = np.full(stats.num_classes, max_margin)
    nz = counts > 0
    margins[nz] = max_margin * (counts[nz] / n_min) ** (-exponent)
    return MarginTable(margins=margins, scale=scale, exponent=exponent,
                       max_margin=max_margin)


@dataclass
class KeyPointMask:
    """Boolean key flags plus the per-class importance cut that produced them."""

    flags: np.ndarray
    thresholds: np.ndarray
    top_fraction: float


def key_point_mask(importance: np.ndarray, labels: np.ndarray,
                   top_fraction: float, num_classes: int | None = None) -> KeyPointMask:
    """Flag the ceil(top_fraction * class count) most important points per class.

    Importance ties are broken toward the lower ordinal.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    imp = np.asarray(importance, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else (int(y.max()) + 1 if y.size else 0)
    flags = np.zeros(imp.shape[0], dtype=bool)
    thresholds = np.zeros(c)
    for cls in range(c):
        members = np.flatnonzero(y == cls)
        if members.size == 0:
            continue
        take = int(np.ceil(top_fraction * members.size))
        order = np.argsort(-imp[members], kind="stable")
        chosen = members[order[:take]]
        flags[chosen] = True
        thresholds[cls] = imp[chosen].min()
    return KeyPointMask(flags=flags, thresholds=thresholds, top_fraction=top_fraction)


def kps_loss(logits, labels, mask: KeyPointMask, margins: MarginTable,
             scale: float | None = None) -> "float | Tensor":
    """Margin cross-entropy applied at key points only.

    For key points the true-class logit becomes s * (z_y - m_y) and every
    other logit s * z_k before the softmax; non-key points use the plain
    logits. Reduction is the mean over all points.
    """
    want_tensor = isinstance(logits, Tensor)
    z = logits if want_tensor else Tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    s = margins.scale if scale is None else float(scale)
    c = z.data.shape[1]
    key_col = mask.flags.astype(float)[:, None]
    margin_mat = one_hot(y, c) * margins.margins[y][:, None]

    adjusted = ad.add(
        ad.mul(ad.mul(ad.add(z, -margin_mat), s), key_col),
        ad.mul(z, 1.0 - key_col),
    )
    return _as_result(ad.softmax_cross_entropy(adjusted, y), want_tensor)


def cross_entropy(logits, labels, weights: np.ndarray | None = None) -> "float | Tensor":
    """Weighted-mean softmax cross-entropy (plain baseline objective)."""
    want_tensor = isinstance(logits, Tensor)
    z = logits if want_tensor else Tensor(logits)
    return _as_result(ad.softmax_cross_entropy(z, labels, weights), want_tensor)


def rlt_loss(lam: float, kps, sd):
    """Convex blend lam * L_KPS + (1 - lam) * L_SD; lam must lie in [0, 1]."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if isinstance(kps, Tensor) or isinstance(sd, Tensor):
        return ad.add(ad.mul(kps, lam), ad.mul(sd, 1.0 - lam))
    return lam * kps + (1.0 - lam) * sd


def chamfer(x: np.ndarray, y: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    a = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance requires two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float((d_ab ** 2).mean() + (d_ba ** 2).mean())


def chamfer_to_target(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable chamfer between a predicted set and a fixed target.

    Nearest-neighbor matches are held fixed during backward (valid almost
    everywhere), which is the standard completion-loss gradient.
    """
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    pts = pred.data
    if pts.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("chamfer distance requires two non-empty point sets")
    d_pt, j_pt = cKDTree(tgt).query(pts)
    d_tp, j_tp = cKDTree(pts).query(tgt)
    value = (d_pt ** 2).mean() + (d_tp ** 2).mean()

    def _bw(out: Tensor):
        g = float(out.grad)
        grad = 2.0 * (pts - tgt[j_pt]) / pts.shape[0]
        np.add.at(grad, j_tp, 2.0 * (pts[j_tp] - tgt) / tgt.shape[0])
        pred._accumulate(grad * g)

    return ad.make_op(np.array(value), (pred,), "chamfer", _bw)


def kl_diag_gaussian(post, prior) -> float:
    """Closed-form KL(post || prior) between diagonal Gaussians, summed over dims.

    Arguments are anything with ``mean`` and ``deviation`` array attributes.
    """
    mu_q = np.asarray(post.mean, dtype=np.float64)
    sd_q = np.asarray(post.deviation, dtype=np.float64)
    mu_p = np.asarray(prior.mean, dtype=np.float64)
    sd_p = np.asarray(prior.deviation, dtype=np.float64)
    if (sd_q <= 0).any() or (sd_p <= 0).any():
        raise ValueError("deviations must be strictly positive")
    term = np.log(sd_p / sd_q) + (sd_q ** 2 + (mu_q - mu_p) ** 2) / (2.0 * sd_p ** 2) - 0.5
    return float(term.sum())


def kl_gaussian_tensors(mu_q: Tensor, sd_q: Tensor, mu_p: Tensor, sd_p: Tensor) -> Tensor:
    """Autodiff version of :func:`kl_diag_gaussian` for decoder training."""
    log_ratio = ad.add(ad.log(sd_p), ad.mul(ad.log(sd_q), -1.0))
    num = ad.add(ad.power(sd_q, 2.0), ad.power(ad.add(mu_q, ad.mul(mu_p, -1.0)), 2.0))
    frac = ad.div(num, ad.mul(ad.power(sd_p, 2.0), 2.0))
    return ad.tsum(ad.add(ad.add(log_ratio, frac), -0.5))
