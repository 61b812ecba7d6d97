"""Pre-training and evaluation plumbing shared by the experiment grid,
the lambda tuner and the estimator layer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .cloud import ClassStats, LabeledCloud, class_histogram
from .errors import TrainingError
from .losses import (MarginTable, dynamic_margins, key_point_mask, kps_loss,
                     rlt_loss, soft_dice)
from .metrics import confusion, iou_per_class, miou
from .network import (AdamHyper, AdamState, SegModel, adam_step, forward_graph,
                      collect_gradients, init_model, logits_from_features,
                      point_features)
from .spatial import SpatialIndex, geometric_importance
from .util import named_rng


@dataclass
class Scene:
    """A scan with its cached per-point features and geometric importance."""

    cloud: LabeledCloud
    features: np.ndarray
    importance: np.ndarray
    scan_id: str = "scene"

    def __len__(self) -> int:
        return len(self.cloud)


def prepare_scene(cloud: LabeledCloud, feature_k: int = 8,
                  scan_id: str = "scene") -> Scene:
    """Compute and cache the expensive per-point geometry for a scan."""
    index = SpatialIndex(cloud.points)
    features = point_features(cloud, k=feature_k, index=index)
    n = len(cloud)
    if n > feature_k:
        importance = geometric_importance(cloud, k=feature_k)
    else:
        importance = np.zeros(n)
    return Scene(cloud=cloud, features=features, importance=importance, scan_id=scan_id)


def pooled_stats(scenes: Sequence[Scene], num_classes: int) -> ClassStats:
    labels = np.concatenate([s.cloud.labels for s in scenes])
    return class_histogram(labels, num_classes)


@dataclass
class PretrainResult:
    model: SegModel
    loss_trace: list[float] = field(default_factory=list)


def pretrain(model: SegModel, scenes: Sequence[Scene], loss: str = "ce",
             lambda_rlt: float = 0.5, key_fraction: float = 0.3,
             margins: Optional[MarginTable] = None, steps: int = 260,
             batch_points: int = 4096, lr: float = 2e-3,
             seed: int = 0, defer_fraction: float = 0.5) -> PretrainResult:
    """Minibatch Adam over pooled scene points with a plain or long-tail loss.

    ``loss`` is "ce" (cross-entropy) or "rlt" (margin key-point loss
    blended with SoftDice by ``lambda_rlt``). Margins are deferred: the
    first ``defer_fraction`` of RLT steps run plain cross-entropy so the
    trunk forms ordinary features before boundaries are reshaped
    (margin losses from random initialization compress the representation
    and measurably hurt later last-layers fine-tuning).
    """
    if loss not in ("ce", "rlt"):
        raise ValueError(f"loss must be 'ce' or 'rlt', got {loss!r}")
    if not scenes:
        raise ValueError("need at least one training scene")
    feats = np.concatenate([s.features for s in scenes])
    labels = np.concatenate([s.cloud.labels for s in scenes])
    importance = np.concatenate([s.importance for s in scenes])
    if loss == "rlt" and margins is None:
        margins = dynamic_margins(class_histogram(labels, model.num_classes))

    rng = named_rng(seed, "pretrain")
    state = AdamState.for_model(model)
    hyper = AdamHyper(lr=lr)
    model = model.copy()
    trace: list[float] = []
    n = feats.shape[0]
    defer_steps = int(defer_fraction * steps) if loss == "rlt" else 0

    for step in range(steps):
        rows = rng.choice(n, size=min(batch_points, n), replace=False)
        logits, params, _ = forward_graph(model, feats[rows])
        if loss == "ce" or step < defer_steps:
            objective = ad.softmax_cross_entropy(logits, labels[rows])
        else:
            mask = key_point_mask(importance[rows], labels[rows], key_fraction,
                                  num_classes=model.num_classes)
            kps = kps_loss(logits, labels[rows], mask, margins)
            sd = soft_dice(ad.softmax_rows(logits), labels[rows])
            objective = rlt_loss(lambda_rlt, kps, sd)
        value = float(objective.data)
        if not np.isfinite(value):
            raise TrainingError(f"pre-training loss diverged at step {step}")
        objective.backward()
        model, state = adam_step(model, collect_gradients(model, params), state, hyper)
        trace.append(value)
    return PretrainResult(model=model, loss_trace=trace)


def pretrain_fresh(scenes: Sequence[Scene], num_classes: int, seed: int = 0,
                   **kwargs) -> PretrainResult:
    """Initialize a model (seeded) and pre-train it on the scenes."""
    model = init_model(num_classes, seed=seed)
    return pretrain(model, scenes, seed=seed, **kwargs)


def evaluate_scenes(model: SegModel, scenes: Sequence[Scene]
                    ) -> tuple[np.ndarray, np.ndarray, float]:
    """Pooled confusion matrix, per-class IoU and mIoU over scans."""
    cm = np.zeros((model.num_classes, model.num_classes), dtype=np.int64)
    for scene in scenes:
        pred = np.argmax(logits_from_features(model, scene.features), axis=1)
        cm += confusion(pred, scene.cloud.labels, model.num_classes)
    return cm, iou_per_class(cm), miou(cm)
