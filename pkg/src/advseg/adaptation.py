"""Teacher-student cross-domain adaptation with pseudo-label refinement.

A slowly EMA-updated teacher labels unlabeled scenes; labels are refined
by quorum votes of high-confidence spatial neighbors (HNPU); training
scenes are built by splicing points across domains in both directions;
and the student minimizes the long-tail objective over both mixed scenes.
A small clean-data fine-tuning routine with early stopping completes the
defense.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import LabeledCloud, class_histogram
from .errors import AdaptationError
from .losses import MarginTable, key_point_mask, kps_loss, rlt_loss, soft_dice
from .metrics import confusion, miou
from .network import (AdamHyper, AdamState, SegModel, adam_step, forward,
                      forward_graph, collect_gradients, logits_from_features,
                      point_features)
from .spatial import SpatialIndex, geometric_importance, neighbor_table
from .util import named_rng, round_half_up, softmax


@dataclass
class PseudoLabels:
    """Per-point teacher output: label, max-softmax confidence, validity."""

    labels: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if not (len(self.labels) == len(self.confidence) == len(self.valid)):
            raise ValueError("pseudo-label arrays must have equal length")

    def copy(self) -> "PseudoLabels":
        return PseudoLabels(self.labels.copy(), self.confidence.copy(), self.valid.copy())


@dataclass
class HnpuConfig:
    """Neighborhood size, confidence thresholds and the vote quorum."""

    k: int = 8
    tau_high: float = 0.9
    tau_low: float = 0.6
    quorum: Optional[int] = None

    def __post_init__(self):
        if self.quorum is None:
            self.quorum = int(np.ceil(self.k / 2))
        if not 0.0 <= self.tau_low < self.tau_high <= 1.0:
            raise ValueError(f"need 0 <= tau_low < tau_high <= 1, got "
                             f"({self.tau_low}, {self.tau_high})")
        if not 1 <= self.quorum <= self.k:
            raise ValueError(f"quorum must be in [1, k], got {self.quorum}")


_CONF_CAP = 0.999


@dataclass
class AdaptState:
    """Student/teacher pair plus optimizer and bookkeeping."""

    student: SegModel
    teacher: SegModel
    ema_decay: float = 0.99
    iteration: int = 0
    mixing_ratio: float = 0.5
    adam: Optional[AdamState] = None
    lr: float = 2e-3

    def __post_init__(self):
        if not 0.0 < self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must be in (0, 1], got {self.ema_decay}")
        if self.adam is None:
            self.adam = AdamState.for_model(self.student)

    @classmethod
    def from_model(cls, model: SegModel, **kwargs) -> "AdaptState":
        return cls(student=model.copy(), teacher=model.copy(), **kwargs)


def ema_update(teacher: SegModel, student: SegModel, decay: float) -> SegModel:
    """teacher <- decay * teacher + (1 - decay) * student, per parameter."""
    new = [decay * t + (1.0 - decay) * s
           for t, s in zip(teacher.parameters(), student.parameters())]
    return teacher.replace_parameters(new)


def teacher_predict(state: AdaptState, cloud: LabeledCloud,
                    cfg: Optional[HnpuConfig] = None,
                    features: Optional[np.ndarray] = None) -> PseudoLabels:
    """Raw pseudo-labels: argmax class (ties to the lower id), max softmax
    confidence, valid where confidence >= tau_low."""
    cfg = cfg or HnpuConfig()
    probs = softmax(forward(state.teacher, cloud, features))
    labels = np.argmax(probs, axis=1)
    confidence = probs[np.arange(probs.shape[0]), labels]
    return PseudoLabels(labels=labels, confidence=confidence,
                        valid=confidence >= cfg.tau_low)


def hnpu_update(pseudo: PseudoLabels, index: SpatialIndex,
                cfg: Optional[HnpuConfig] = None) -> PseudoLabels:
    """Quorum-vote refinement from high-confidence neighborhoods.

    Points below tau_high adopt the majority class among their k nearest
    neighbors with confidence >= tau_high when that class musters at
    least ``quorum`` votes; their confidence becomes the mean of the
    agreeing neighbors (capped just below 1) and they become valid.
    Unrescued points below tau_low are invalidated. High-confidence
    points are never modified. The vote is iterated to a fixed point, so
    a second call changes nothing.
    """
    cfg = cfg or HnpuConfig()
    out = pseudo.copy()
    n = len(out.labels)
    if n == 0:
        return out
    k = min(cfg.k, max(len(index) - 1, 0))
    if k == 0:
        out.valid[(out.confidence < cfg.tau_high) & (out.confidence < cfg.tau_low)] = False
        return out
    nbr_idx, _ = neighbor_table(index, k, exclude_self=True)
    num_classes = int(out.labels.max()) + 1 if n else 1
    rescued = np.zeros(n, dtype=bool)

    for _ in range(n + 2):              # promotions are monotone; +2 covers the
                                        # final no-change pass
        high = out.confidence >= cfg.tau_high
        rows = np.flatnonzero(~high)
        if rows.size == 0:
            break
        nb_labels = out.labels[nbr_idx[rows]]
        nb_high = high[nbr_idx[rows]]
        nb_conf = out.confidence[nbr_idx[rows]]
        num_classes = max(num_classes, int(nb_labels.max()) + 1 if nb_labels.size else 1)
        votes = np.zeros((rows.size, num_classes), dtype=np.int64)
        conf_sum = np.zeros((rows.size, num_classes))
        for cls in range(num_classes):
            agree = (nb_labels == cls) & nb_high
            votes[:, cls] = agree.sum(axis=1)
            conf_sum[:, cls] = (nb_conf * agree).sum(axis=1)
        best = np.argmax(votes, axis=1)            # ties toward the lower class id
        best_votes = votes[np.arange(rows.size), best]
        ok = best_votes >= cfg.quorum
        if not ok.any():
            break
        upd = rows[ok]
        new_labels = best[ok]
        new_conf = np.minimum(conf_sum[ok, new_labels] / best_votes[ok], _CONF_CAP)
        changed = ((out.labels[upd] != new_labels)
                   | (out.confidence[upd] != new_conf)
                   | (~out.valid[upd]))
        if not changed.any():
            break
        out.labels[upd] = new_labels
        out.confidence[upd] = new_conf
        out.valid[upd] = True
        rescued[upd] = True

    final_low = (out.confidence < cfg.tau_high) & ~rescued
    out.valid[final_low & (out.confidence < cfg.tau_low)] = False
    return out


@dataclass
class MixedScene:
    """A base scene with donor points spliced in.

    ``provenance`` is True on spliced points and partitions the scene;
    ``donor_indices`` are the donor-cloud ordinals of the spliced points,
    so callers can carry any per-point side data through the splice.
    ``priority`` marks rows that training batches must always include
    (e.g. the few restored points, which a uniform subsample would dilute
    to nothing).
    """

    points: np.ndarray
    labels: np.ndarray
    valid: np.ndarray
    provenance: np.ndarray
    donor_indices: np.ndarray
    direction: str                      # "s2t" or "t2s"
    degenerate: bool = False
    priority: Optional[np.ndarray] = None


def mix_domains(source: LabeledCloud, target: LabeledCloud, pseudo: PseudoLabels,
                ratio: float, seed: int) -> tuple[MixedScene, MixedScene]:
    """Two training scenes: source points into the target scene (with true
    labels) and HNPU-valid target points into the source scene (with
    pseudo-labels). Spliced counts are round(ratio * donor pool size).

    With no valid pseudo points the t->s scene degenerates to pure source
    and is flagged, not failed.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = named_rng(seed, "mix-domains")

    n_src = round_half_up(ratio * len(source))
    src_donors = (rng.choice(len(source), size=n_src, replace=False)
                  if n_src else np.empty(0, dtype=np.int64))
    s2t = MixedScene(
        points=np.concatenate([target.points, source.points[src_donors]]),
        labels=np.concatenate([pseudo.labels, source.labels[src_donors]]),
        valid=np.concatenate([pseudo.valid, np.ones(len(src_donors), dtype=bool)]),
        provenance=np.concatenate([np.zeros(len(target), dtype=bool),
                                   np.ones(len(src_donors), dtype=bool)]),
        donor_indices=np.asarray(src_donors, dtype=np.int64),
        direction="s2t",
    )

    valid_pool = np.flatnonzero(pseudo.valid)
    n_tgt = round_half_up(ratio * valid_pool.size)
    tgt_donors = (valid_pool[rng.choice(valid_pool.size, size=n_tgt, replace=False)]
                  if n_tgt else np.empty(0, dtype=np.int64))
    t2s = MixedScene(
        points=np.concatenate([source.points, target.points[tgt_donors]]),
        labels=np.concatenate([source.labels, pseudo.labels[tgt_donors]]),
        valid=np.concatenate([np.ones(len(source), dtype=bool),
                              pseudo.valid[tgt_donors]]),
        provenance=np.concatenate([np.zeros(len(source), dtype=bool),
                                   np.ones(len(tgt_donors), dtype=bool)]),
        donor_indices=np.asarray(tgt_donors, dtype=np.int64),
        direction="t2s",
        degenerate=valid_pool.size == 0,
    )
    return s2t, t2s


def append_points(scene: MixedScene, points: np.ndarray, labels: np.ndarray,
                  valid: np.ndarray, priority: bool = True) -> MixedScene:
    """Splice extra labeled points (e.g. restored ones) into a mixed scene.

    Appended points are priority-marked by default so batch subsampling
    keeps them.
    """
    base_priority = (scene.priority if scene.priority is not None
                     else np.zeros(len(scene.points), dtype=bool))
    return MixedScene(
        points=np.concatenate([scene.points, points]),
        labels=np.concatenate([scene.labels, labels]),
        valid=np.concatenate([scene.valid, valid]),
        provenance=np.concatenate([scene.provenance, np.ones(len(points), dtype=bool)]),
        donor_indices=scene.donor_indices,
        direction=scene.direction,
        degenerate=scene.degenerate,
        priority=np.concatenate([base_priority, np.full(len(points), priority)]),
    )


def _scene_rlt_loss(student: SegModel, scene: MixedScene, lambda_rlt: float,
                    margins: MarginTable, key_fraction: float,
                    features: Optional[np.ndarray] = None,
                    importance: Optional[np.ndarray] = None,
                    max_points: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None
                    ) -> tuple[Tensor, list[Tensor]]:
    """RLT loss over the valid points of a mixed scene.

    Invalid points are removed before any reduction. ``features`` and
    ``importance`` may be precomputed and row-aligned with the scene.
    """
    rows = np.flatnonzero(scene.valid)
    if max_points is not None and rows.size > max_points:
        rng = rng or np.random.default_rng(0)
        if scene.priority is not None and scene.priority.any():
            keep = np.flatnonzero(scene.valid & scene.priority)
            pool = np.flatnonzero(scene.valid & ~scene.priority)
            budget = max(max_points - keep.size, 0)
            picked = pool[rng.choice(pool.size, size=min(budget, pool.size),
                                     replace=False)]
            rows = np.sort(np.concatenate([keep, picked]))
        else:
            rows = rows[rng.choice(rows.size, size=max_points, replace=False)]
    cloud = LabeledCloud(points=scene.points[rows], labels=scene.labels[rows])
    if features is None:
        feats = point_features(cloud, k=student.feature_k)
    else:
        feats = features[rows]
    if importance is None:
        imp = (geometric_importance(cloud, k=max(3, min(8, len(cloud) - 1)))
               if len(cloud) > 8 else np.zeros(len(cloud)))
    else:
        imp = importance[rows]
    labels = scene.labels[rows]
    logits, params, _ = forward_graph(student, feats)
    mask = key_point_mask(imp, labels, key_fraction, num_classes=student.num_classes)
    kps = kps_loss(logits, labels, mask, margins)
    sd = soft_dice(ad.softmax_rows(logits), labels)
    return rlt_loss(lambda_rlt, kps, sd), params


@dataclass
class StepRecord:
    loss_s2t: float
    loss_t2s: float


def adaptation_step(state: AdaptState, scenes: tuple[MixedScene, MixedScene],
                    lambda_rlt: float, margins: MarginTable,
                    key_fraction: float = 0.3,
                    scene_features: Optional[Sequence[np.ndarray]] = None,
                    scene_importance: Optional[Sequence[np.ndarray]] = None,
                    max_points: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None
                    ) -> tuple[AdaptState, StepRecord]:
    """One student update on L_tot = L_{s->t} + L_{t->s}, then an EMA
    refresh of the teacher."""
    losses = []
    grand: Optional[list[np.ndarray]] = None
    for i, scene in enumerate(scenes):
        feats = scene_features[i] if scene_features is not None else None
        imp = scene_importance[i] if scene_importance is not None else None
        loss, params = _scene_rlt_loss(state.student, scene, lambda_rlt, margins,
                                       key_fraction, feats, imp, max_points, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise AdaptationError(f"non-finite adaptation loss at iteration "
                                  f"{state.iteration}")
        loss.backward()
        grads = collect_gradients(state.student, params)
        grand = grads if grand is None else [a + b for a, b in zip(grand, grads)]
        losses.append(value)

    student, adam = adam_step(state.student, grand, state.adam, AdamHyper(lr=state.lr))
    teacher = ema_update(state.teacher, student, state.ema_decay)
    new_state = AdaptState(student=student, teacher=teacher, ema_decay=state.ema_decay,
                           iteration=state.iteration + 1,
                           mixing_ratio=state.mixing_ratio, adam=adam, lr=state.lr)
    return new_state, StepRecord(loss_s2t=losses[0], loss_t2s=losses[1])


# -- clean-data fine-tuning ----------------------------------------------------


@dataclass
class FineTuneData:
    """Feature/label arrays for the clean subset, split train/validation."""

    train_features: np.ndarray
    train_labels: np.ndarray
    val_features: np.ndarray
    val_labels: np.ndarray


def make_finetune_split(clouds: Sequence[LabeledCloud], fraction: float = 0.05,
                        val_share: float = 0.25, seed: int = 0,
                        feature_k: int = 8,
                        features: Optional[Sequence[np.ndarray]] = None) -> FineTuneData:
    """Seeded sample of ``fraction`` of all clean points, split train/val."""
    if not clouds:
        raise ValueError("need at least one clean cloud")
    feats = [point_features(c, k=feature_k) if features is None else features[i]
             for i, c in enumerate(clouds)]
    all_feats = np.concatenate(feats)
    all_labels = np.concatenate([c.labels for c in clouds])
    rng = named_rng(seed, "finetune-split")
    take = max(round_half_up(fraction * all_feats.shape[0]), 8)
    chosen = rng.choice(all_feats.shape[0], size=min(take, all_feats.shape[0]),
                        replace=False)
    n_val = max(round_half_up(val_share * chosen.size), 1)
    val, train = chosen[:n_val], chosen[n_val:]
    return FineTuneData(train_features=all_feats[train], train_labels=all_labels[train],
                        val_features=all_feats[val], val_labels=all_labels[val])


def fine_tune(model: SegModel, data: FineTuneData, patience: int = 3,
              max_epochs: int = 30, lr: float = 2e-3, batch_points: int = 2048,
              seed: int = 0, trainable_layers: int = 2,
              val_scorer: Optional[Callable[[SegModel], float]] = None) -> SegModel:
    """Update only the last ``trainable_layers`` layers on the clean subset.

    Stops when validation mIoU fails to improve for ``patience``
    consecutive epochs and returns the best-validation checkpoint, with
    the caller's frozen mask restored.
    """
    if data.train_features.shape[0] == 0:
        raise ValueError("fine-tuning subset is empty")
    ft = model.freeze_all_but_last(trainable_layers)
    adam = AdamState.for_model(ft)
    hyper = AdamHyper(lr=lr)
    rng = named_rng(seed, "finetune")

    def score(m: SegModel) -> float:
        if val_scorer is not None:
            return val_scorer(m)
        pred = np.argmax(logits_from_features(m, data.val_features), axis=1)
        value = miou(confusion(pred, data.val_labels, m.num_classes))
        return -1.0 if np.isnan(value) else float(value)

    best_score = -np.inf
    best = ft.copy()
    stale = 0
    n = data.train_features.shape[0]
    steps = max(n // batch_points, 1)
    for _ in range(max_epochs):
        for _ in range(steps):
            rows = rng.choice(n, size=min(batch_points, n), replace=False)
            logits, params, _ = forward_graph(ft, data.train_features[rows])
            loss = ad.softmax_cross_entropy(logits, data.train_labels[rows])
            loss.backward()
            ft, adam = adam_step(ft, collect_gradients(ft, params), adam, hyper)
        current = score(ft)
        if current > best_score:
            best_score = current
            best = ft.copy()
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    best.frozen = model.frozen.copy()
    return best
