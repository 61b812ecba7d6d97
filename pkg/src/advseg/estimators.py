"""Scikit-learn style estimators wrapping the pipeline stages.

Each estimator follows the fit/transform/predict conventions (plain
``__init__`` parameters, ``get_params``/``set_params`` via
``BaseEstimator``, fitted attributes with trailing underscores), so the
toolkit composes with the wider ecosystem. ``X`` is a
:class:`~advseg.cloud.LabeledCloud` or a sequence of them.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attack import AttackConfig, contaminate_scan
from .adaptation import fine_tune, make_finetune_split
from .cloud import LabeledCloud
from .decoder import init_decoder, restore, train_decoder
from .experiment import (PipelineParams, adapt_segmenter, make_margins,
                         train_cell_decoder)
from .metrics import confusion, miou
from .network import forward, init_model, point_features, predict_labels
from .spatial import statistical_outlier_removal
from .training import prepare_scene, pretrain
from .util import softmax


def as_cloud_list(X) -> list[LabeledCloud]:
    """Normalize input to a list of validated clouds."""
    if isinstance(X, LabeledCloud):
        clouds = [X]
    else:
        try:
            clouds = list(X)
        except TypeError:
            raise TypeError("expected a LabeledCloud or an iterable of them")
    for c in clouds:
        if not isinstance(c, LabeledCloud):
            raise TypeError(f"expected LabeledCloud elements, got {type(c).__name__}")
        c.validate()
    return clouds


def _single(X) -> bool:
    return isinstance(X, LabeledCloud)


class PointCloudSegmenter(BaseEstimator):
    """Per-point semantic classifier with a long-tail-aware objective.

    fit(X) pre-trains on labeled clouds; predict(X) returns per-point
    class ids; score(X) is mIoU against the clouds' own labels.
    """

    def __init__(self, num_classes=8, hidden=(64, 64), loss="rlt",
                 lambda_rlt=0.5, key_fraction=0.3, steps=260,
                 batch_points=4096, lr=2e-3, feature_k=8, seed=0):
        self.num_classes = num_classes
        self.hidden = hidden
        self.loss = loss
        self.lambda_rlt = lambda_rlt
        self.key_fraction = key_fraction
        self.steps = steps
        self.batch_points = batch_points
        self.lr = lr
        self.feature_k = feature_k
        self.seed = seed

    def fit(self, X, y=None):
        clouds = as_cloud_list(X)
        scenes = [prepare_scene(c, feature_k=self.feature_k) for c in clouds]
        model = init_model(self.num_classes, hidden=tuple(self.hidden),
                           seed=self.seed, feature_k=self.feature_k)
        result = pretrain(model, scenes, loss=self.loss,
                          lambda_rlt=self.lambda_rlt,
                          key_fraction=self.key_fraction, steps=self.steps,
                          batch_points=self.batch_points, lr=self.lr,
                          seed=self.seed)
        self.model_ = result.model
        self.loss_trace_ = result.loss_trace
        self.classes_ = np.arange(self.num_classes)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        clouds = as_cloud_list(X)
        preds = [predict_labels(self.model_, c) for c in clouds]
        return preds[0] if _single(X) else preds

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        clouds = as_cloud_list(X)
        probs = [softmax(forward(self.model_, c)) for c in clouds]
        return probs[0] if _single(X) else probs

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        clouds = as_cloud_list(X)
        cm = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        for c in clouds:
            cm += confusion(predict_labels(self.model_, c), c.labels,
                            self.num_classes)
        return miou(cm)


class OutlierRemover(TransformerMixin, BaseEstimator):
    """Stateless statistical outlier removal, one cloud at a time."""

    def __init__(self, k=8, std_mult=1.0):
        self.k = k
        self.std_mult = std_mult

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        clouds = as_cloud_list(X)
        out = [statistical_outlier_removal(c, k=self.k, std_mult=self.std_mult)[0]
               for c in clouds]
        return out[0] if _single(X) else out


class DistanceWeightedPGD(TransformerMixin, BaseEstimator):
    """Corruption transform: distance-scaled PGD plus confident label noise.

    Needs a fitted :class:`PointCloudSegmenter` (or a raw model) as the
    gradient/confidence reference.
    """

    def __init__(self, segmenter=None, base_epsilon=0.2, steps=10,
                 step_size=None, gamma_min=0.2, gamma_max=1.0, d_near=5.0,
                 d_far=45.0, selection_perc=0.5, flip_fraction=0.5, seed=0):
        self.segmenter = segmenter
        self.base_epsilon = base_epsilon
        self.steps = steps
        self.step_size = step_size
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.d_near = d_near
        self.d_far = d_far
        self.selection_perc = selection_perc
        self.flip_fraction = flip_fraction
        self.seed = seed

    def _config(self) -> AttackConfig:
        return AttackConfig(base_epsilon=self.base_epsilon, steps=self.steps,
                            step_size=self.step_size, gamma_min=self.gamma_min,
                            gamma_max=self.gamma_max, d_near=self.d_near,
                            d_far=self.d_far, selection_perc=self.selection_perc,
                            flip_fraction=self.flip_fraction, seed=self.seed)

    def _model(self):
        if self.segmenter is None:
            raise ValueError("DistanceWeightedPGD requires a segmenter")
        if isinstance(self.segmenter, PointCloudSegmenter):
            check_is_fitted(self.segmenter, "model_")
            return self.segmenter.model_
        return self.segmenter

    def fit(self, X, y=None):
        self._model()
        self.config_ = self._config()
        return self

    def transform(self, X):
        model = self._model()
        cfg = self._config()
        clouds = as_cloud_list(X)
        out = [contaminate_scan(model, c, cfg, scan_id=f"{i:04d}")[0]
               for i, c in enumerate(clouds)]
        return out[0] if _single(X) else out


class CloudRestorer(TransformerMixin, BaseEstimator):
    """Learned restoration: fit on clean clouds, transform perturbed ones."""

    def __init__(self, latent_dim=32, coarse_points=256, upsample=4,
                 enhance_k=8, epochs=200, kl_weight=0.01, noise_sigma=0.05,
                 lr=2e-3, seed=0):
        self.latent_dim = latent_dim
        self.coarse_points = coarse_points
        self.upsample = upsample
        self.enhance_k = enhance_k
        self.epochs = epochs
        self.kl_weight = kl_weight
        self.noise_sigma = noise_sigma
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        clouds = as_cloud_list(X)
        model = init_decoder(latent_dim=self.latent_dim,
                             coarse_points=self.coarse_points,
                             upsample=self.upsample, enhance_k=self.enhance_k,
                             seed=self.seed)
        result = train_decoder(model, clouds, epochs=self.epochs,
                               kl_weight=self.kl_weight,
                               noise_sigma=self.noise_sigma, lr=self.lr,
                               seed=self.seed)
        self.decoder_ = result.model
        self.loss_trace_ = result.loss_trace
        return self

    def transform(self, X):
        check_is_fitted(self, "decoder_")
        clouds = as_cloud_list(X)
        out = [restore(self.decoder_, c) for c in clouds]
        return out[0] if _single(X) else out


class DomainAdapter(BaseEstimator):
    """Full defense pipeline as one estimator.

    fit(X, y): pre-train on labeled source clouds X, adapt toward the
    unlabeled target clouds y with the selected AAF components, then
    optionally fine-tune on a clean fraction of X. predict works on any
    cloud afterwards.
    """

    def __init__(self, num_classes=8, use_rlt=True, use_decoder=True,
                 fine_tuning=True, params=None, seed=0):
        self.num_classes = num_classes
        self.use_rlt = use_rlt
        self.use_decoder = use_decoder
        self.fine_tuning = fine_tuning
        self.params = params
        self.seed = seed

    def fit(self, X, y):
        source = as_cloud_list(X)
        target = as_cloud_list(y)
        p = self.params if self.params is not None else PipelineParams()
        src_scenes = [prepare_scene(c) for c in source]
        tgt_scenes = [prepare_scene(c) for c in target]

        # plain pre-training; the long-tail objective acts during adaptation
        model = init_model(self.num_classes, seed=self.seed)
        pre = pretrain(model, src_scenes, loss="ce", steps=p.pretrain_steps,
                       batch_points=p.batch_points, lr=p.pretrain_lr,
                       seed=self.seed)
        lam, margins = make_margins(src_scenes, self.num_classes, self.use_rlt, p)
        decoder = (train_cell_decoder(src_scenes, p, self.seed)
                   if self.use_decoder else None)
        adapted = adapt_segmenter(pre.model, src_scenes, tgt_scenes, p, lam,
                                  margins, self.seed, decoder=decoder)
        if self.fine_tuning:
            data = make_finetune_split(source, fraction=p.ft_fraction,
                                       seed=self.seed,
                                       features=[s.features for s in src_scenes])
            adapted = fine_tune(adapted, data, patience=p.ft_patience,
                                max_epochs=p.ft_max_epochs, lr=p.ft_lr,
                                seed=self.seed)
        self.model_ = adapted
        self.decoder_ = decoder
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        clouds = as_cloud_list(X)
        preds = [predict_labels(self.model_, c) for c in clouds]
        return preds[0] if _single(X) else preds

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        clouds = as_cloud_list(X)
        cm = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        for c in clouds:
            cm += confusion(predict_labels(self.model_, c), c.labels,
                            self.num_classes)
        return miou(cm)
