"""Compact differentiable per-point segmentation network.

The classifier is a per-point MLP over local geometric features: scaled
sensor-relative coordinates, range, eigenvalue ratios of the k-NN
covariance, verticality of the local normal, and mean neighbor distance.
Coordinate gradients (needed by the perturbation attack) flow only
through the raw xyz feature columns; the neighborhood-derived columns
are treated as constants and recomputed between attack iterations.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import LabeledCloud
from .errors import FormatError, NumericError
from .spatial import SpatialIndex, local_covariance_eigenvalues
from .util import softmax

FEATURE_NAMES = ("x", "y", "z", "range", "eig1", "eig2", "eig3",
                 "verticality", "nn_dist")
NUM_FEATURES = len(FEATURE_NAMES)
FEATURE_K = 8

# feature scaling keeps activations O(1); xyz gradients divide these back out
_POS_SCALE = 25.0
_Z_SCALE = 2.5
_RANGE_SCALE = 25.0
_NN_SCALE = 0.5
COORD_SCALES = np.array([_POS_SCALE, _POS_SCALE, _Z_SCALE])


def point_features(cloud: LabeledCloud, k: int = FEATURE_K,
                   subset: Optional[np.ndarray] = None,
                   index: Optional[SpatialIndex] = None) -> np.ndarray:
    """(N, 9) feature matrix; pass ``subset`` ordinals to compute only those rows.

    Neighborhoods are the k nearest points including the point itself.
    """
    pts = cloud.points
    n = pts.shape[0]
    rows = np.arange(n) if subset is None else np.asarray(subset, dtype=np.int64)
    if rows.size == 0:
        return np.zeros((0, NUM_FEATURES))
    rel = pts[rows] - cloud.viewpoint
    feats = np.zeros((rows.size, NUM_FEATURES))
    feats[:, 0] = rel[:, 0] / _POS_SCALE
    feats[:, 1] = rel[:, 1] / _POS_SCALE
    feats[:, 2] = rel[:, 2] / _Z_SCALE
    feats[:, 3] = np.linalg.norm(rel, axis=1) / _RANGE_SCALE

    k_eff = min(k, n)
    if k_eff >= 2:
        if index is None:
            index = SpatialIndex(pts)
        idx, dist = index.query_many(pts[rows], k_eff)
        nbrs = pts[idx]
        centered = nbrs - nbrs.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / k_eff
        vals, vecs = np.linalg.eigh(cov)            # ascending
        vals = np.clip(vals, 0.0, None)
        total = vals.sum(axis=1)
        safe = np.where(total > 0, total, 1.0)
        feats[:, 4] = np.where(total > 0, vals[:, 2] / safe, 0.0)
        feats[:, 5] = np.where(total > 0, vals[:, 1] / safe, 0.0)
        feats[:, 6] = np.where(total > 0, vals[:, 0] / safe, 0.0)
        feats[:, 7] = np.abs(vecs[:, 2, 0])         # normal = smallest-eig vector
        feats[:, 8] = dist[:, 1:].mean(axis=1) / _NN_SCALE
    return feats


@dataclass
class SegModel:
    """Per-point MLP classifier: weights, biases, frozen-layer mask."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    num_classes: int
    feature_k: int = FEATURE_K
    frozen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        if self.frozen.size != len(self.weights):
            self.frozen = np.zeros(len(self.weights), dtype=bool)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.num_features,) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "SegModel":
        return SegModel(weights=[w.copy() for w in self.weights],
                        biases=[b.copy() for b in self.biases],
                        num_classes=self.num_classes,
                        feature_k=self.feature_k,
                        frozen=self.frozen.copy())

    # flat parameter protocol shared with the decoder, used by the optimizers
    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def frozen_parameter_mask(self) -> np.ndarray:
        return np.repeat(self.frozen, 2)

    def replace_parameters(self, params: Sequence[np.ndarray]) -> "SegModel":
        new = self.copy()
        for i in range(self.num_layers):
            new.weights[i] = np.asarray(params[2 * i], dtype=np.float64)
            new.biases[i] = np.asarray(params[2 * i + 1], dtype=np.float64)
        return new

    def freeze_all_but_last(self, trainable_layers: int = 2) -> "SegModel":
        """Copy with every layer frozen except the final ``trainable_layers``."""
        new = self.copy()
        new.frozen = np.ones(self.num_layers, dtype=bool)
        new.frozen[-trainable_layers:] = False
        return new


def init_model(num_classes: int, hidden: tuple[int, ...] = (64, 64),
               num_features: int = NUM_FEATURES, seed: int = 0,
               feature_k: int = FEATURE_K) -> SegModel:
    """He-initialized MLP with the given hidden widths."""
    rng = np.random.default_rng(seed)
    sizes = (num_features,) + tuple(hidden) + (num_classes,)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return SegModel(weights=weights, biases=biases, num_classes=num_classes,
                    feature_k=feature_k)


def logits_from_features(model: SegModel, features: np.ndarray) -> np.ndarray:
    """Fast inference path; raises :class:`NumericError` naming a bad layer."""
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.num_features:
        raise ValueError(f"features must be (N, {model.num_features}), got {h.shape}")
    last = model.num_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activation in layer {i}")
    return h


def forward(model: SegModel, cloud: LabeledCloud,
            features: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-point logits (N, c) for a cloud; deterministic."""
    if features is None:
        features = point_features(cloud, k=model.feature_k)
    return logits_from_features(model, features)


def predict_proba(model: SegModel, cloud: LabeledCloud,
                  features: Optional[np.ndarray] = None) -> np.ndarray:
    return softmax(forward(model, cloud, features))


def predict_labels(model: SegModel, cloud: LabeledCloud,
                   features: Optional[np.ndarray] = None) -> np.ndarray:
    """Argmax class per point; ties resolved toward the lower class id."""
    return np.argmax(forward(model, cloud, features), axis=1)


def forward_graph(model: SegModel, features: np.ndarray,
                  train_params: bool = True,
                  feature_grad: bool = False) -> tuple[Tensor, list[Tensor], Tensor]:
    """Differentiable forward pass.

    Returns (logits node, parameter leaves [W0, b0, W1, ...], feature leaf).
    Frozen layers get non-differentiable leaves regardless of ``train_params``.
    """
    feat = Tensor(features, requires_grad=feature_grad)
    params: list[Tensor] = []
    h: Tensor = feat
    last = model.num_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        needs = train_params and not model.frozen[i]
        tw = Tensor(w, requires_grad=needs)
        tb = Tensor(b, requires_grad=needs)
        params.extend([tw, tb])
        h = ad.add(ad.matmul(h, tw), tb)
        if i < last:
            h = ad.relu(h)
    return h, params, feat


def collect_gradients(model: SegModel, params: list[Tensor]) -> list[np.ndarray]:
    """Per-parameter gradients after backward; frozen layers yield exact zeros."""
    out = []
    for i, p in enumerate(params):
        if p.grad is None:
            out.append(np.zeros_like(model.parameters()[i]))
        else:
            out.append(p.grad)
    return out


def loss_gradients(model: SegModel, features: np.ndarray, labels: np.ndarray,
                   loss_fn: Callable[[Tensor, np.ndarray], Tensor]
                   ) -> tuple[float, list[np.ndarray]]:
    """Evaluate a loss on one feature batch and return (value, gradients)."""
    logits, params, _ = forward_graph(model, features)
    loss = loss_fn(logits, labels)
    loss.backward()
    return float(loss.data), collect_gradients(model, params)


def coordinate_gradient(model: SegModel, cloud: LabeledCloud,
                        labels: Optional[np.ndarray] = None,
                        subset: Optional[np.ndarray] = None,
                        features: Optional[np.ndarray] = None,
                        index: Optional[SpatialIndex] = None) -> np.ndarray:
    """d(mean cross-entropy)/d(xyz) for the given points.

    Gradient flows only through the raw coordinate feature columns; the
    neighborhood summary columns are constants of the current geometry.
    """
    y = cloud.labels if labels is None else np.asarray(labels, dtype=np.int64)
    if subset is not None:
        y = y[subset]
    if features is None:
        features = point_features(cloud, k=model.feature_k, subset=subset, index=index)
    logits, _, feat = forward_graph(model, features, train_params=False,
                                    feature_grad=True)
    loss = ad.softmax_cross_entropy(logits, y)
    loss.backward()
    return feat.grad[:, :3] / COORD_SCALES


# -- optimizers (operate on any model exposing the flat-parameter protocol) --


def sgd_step(model, gradients: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, velocity: Optional[list[np.ndarray]] = None):
    """One SGD(+momentum) update; frozen parameters are left untouched.

    Returns (updated model, velocity list).
    """
    params = model.parameters()
    frozen = model.frozen_parameter_mask()
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_params, new_velocity = [], []
    for p, g, v, fz in zip(params, gradients, velocity, frozen):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if fz:
            new_params.append(p)
            new_velocity.append(v)
            continue
        v_new = momentum * v + g
        new_params.append(p - lr * v_new)
        new_velocity.append(v_new)
    return model.replace_parameters(new_params), new_velocity


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_model(cls, model) -> "AdamState":
        params = model.parameters()
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], t=0)


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(model, gradients: Sequence[np.ndarray], state: AdamState,
              hyper: Optional[AdamHyper] = None,
              lr_scale: Optional[Sequence[float]] = None):
    """Standard bias-corrected Adam update; returns (model, state).

    ``lr_scale`` optionally multiplies the learning rate per parameter
    array (e.g. to train a delicate stage more gently).
    """
    hyper = hyper or AdamHyper()
    params = model.parameters()
    frozen = model.frozen_parameter_mask()
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for i, (p, g, m, v, fz) in enumerate(zip(params, gradients, state.m,
                                             state.v, frozen)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if fz:
            new_params.append(p)
            new_m.append(m)
            new_v.append(v)
            continue
        lr = hyper.lr * (lr_scale[i] if lr_scale is not None else 1.0)
        m_new = hyper.beta1 * m + (1 - hyper.beta1) * g
        v_new = hyper.beta2 * v + (1 - hyper.beta2) * g * g
        m_hat = m_new / (1 - hyper.beta1 ** t)
        v_hat = v_new / (1 - hyper.beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + hyper.eps))
        new_m.append(m_new)
        new_v.append(v_new)
    return model.replace_parameters(new_params), AdamState(m=new_m, v=new_v, t=t)


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    entries_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(model: SegModel, cloud: LabeledCloud,
                      loss_fn: Optional[Callable[[Tensor, np.ndarray], Tensor]] = None,
                      tolerance: float = 1e-4, num_entries: int = 64,
                      seed: int = 0, h: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Checks ``num_entries`` randomly chosen parameter entries and feature
    entries (the network inputs). A tolerance of 0 always fails.
    """
    if loss_fn is None:
        loss_fn = lambda logits, y: ad.softmax_cross_entropy(logits, y)
    rng = np.random.default_rng(seed)
    features = point_features(cloud, k=model.feature_k)
    y = cloud.labels

    logits, params, feat = forward_graph(model, features, train_params=True,
                                         feature_grad=True)
    loss = loss_fn(logits, y)
    loss.backward()
    grads = collect_gradients(model, params)
    analytic_arrays = grads + [feat.grad]
    value_arrays = model.parameters() + [features]

    def loss_at(arrays) -> float:
        probe = model.replace_parameters(arrays[:-1])
        lg, _, _ = forward_graph(probe, arrays[-1], train_params=False)
        return float(loss_fn(lg, y).data)

    sizes = np.array([a.size for a in value_arrays])
    total = sizes.sum()
    picks = rng.choice(total, size=min(num_entries, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in picks:
        ai = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[ai])
        base = [a.copy() for a in value_arrays]
        orig = base[ai].flat[local]
        base[ai].flat[local] = orig + h
        f_plus = loss_at(base)
        base[ai].flat[local] = orig - h
        f_minus = loss_at(base)
        fd = (f_plus - f_minus) / (2.0 * h)
        an = analytic_arrays[ai].flat[local]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        worst = max(worst, rel)
    return GradCheckReport(max_rel_error=worst, entries_checked=len(picks),
                           tolerance=tolerance)


# -- checkpoint container ------------------------------------------------------

_MAGIC = b"ASEG"
_VERSION = 1


def save_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Versioned binary container: header JSON + named little-endian float32 arrays.

    Exact layout is documented in the repository README.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    kind_b = kind.encode("utf-8")
    blob += struct.pack("<H", len(kind_b)) + kind_b
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta_b)) + meta_b
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        name_b = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        blob += struct.pack("<H", len(name_b)) + name_b
        blob += struct.pack("<B", a.ndim)
        blob += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
        blob += a.tobytes()
    path.write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (klen,) = struct.unpack_from("<H", raw, off)
    off += 2
    kind = raw[off:off + klen].decode("utf-8")
    off += klen
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        arrays[name] = arr.astype(np.float64)
    return kind, meta, arrays


def save_model(model: SegModel, path) -> None:
    meta = {
        "num_classes": model.num_classes,
        "feature_k": model.feature_k,
        "layer_sizes": list(model.layer_sizes),
        "frozen": model.frozen.astype(int).tolist(),
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    save_checkpoint(path, "segmodel", meta, arrays)


def load_model(path) -> SegModel:
    kind, meta, arrays = load_checkpoint(path)
    if kind != "segmodel":
        raise FormatError(f"{path}: expected a segmodel checkpoint, got {kind!r}")
    n_layers = len(meta["layer_sizes"]) - 1
    weights = [arrays[f"w{i}"] for i in range(n_layers)]
    biases = [arrays[f"b{i}"] for i in range(n_layers)]
    return SegModel(weights=weights, biases=biases,
                    num_classes=int(meta["num_classes"]),
                    feature_k=int(meta["feature_k"]),
                    frozen=np.asarray(meta["frozen"], dtype=bool))
