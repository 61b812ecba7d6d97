"""Probabilistic restoration decoder.

A pooled per-point encoder maps a cloud to a global feature and a
diagonal-Gaussian latent (a prior head sees the perturbed cloud, a
posterior head the clean one). A coarse decoder expands latent + global
feature into a small canonical point set, and an enhancement stage emits
four bounded offset points per coarse point using k-NN context from the
input. Training minimizes chamfer-to-clean plus a weighted KL that pulls
the posterior toward the prior; inference runs the prior path with the
prior mean (no sampling).

Clouds are canonicalized (centroid + principal horizontal axis with a
third-moment sign rule) before encoding and mapped back afterwards, so
restoration is equivariant under vertical rotation of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import LabeledCloud
from .errors import FormatError, StateError, TrainingError
from .losses import chamfer_to_target, kl_gaussian_tensors
from .network import AdamHyper, AdamState, adam_step, load_checkpoint, save_checkpoint
from .spatial import SpatialIndex
from .util import named_rng


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over the latent space: mean and deviation vectors."""

    mean: np.ndarray
    deviation: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.deviation = np.asarray(self.deviation, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.deviation.shape:
            raise ValueError("mean and deviation must have the same dimension")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.deviation).all()):
            raise ValueError("latent parameters must be finite")
        if (self.deviation <= 0).any():
            raise ValueError("deviations must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class CanonicalFrame:
    """Rigid transform into a cloud's canonical pose (centroid at origin,
    principal horizontal axis along +x, sign fixed by the third moment)."""

    centroid: np.ndarray
    rotation: np.ndarray                # 3x3, world -> canonical

    @classmethod
    def from_points(cls, points: np.ndarray) -> "CanonicalFrame":
        pts = np.asarray(points, dtype=np.float64)
        centroid = pts.mean(axis=0)
        q = pts[:, :2] - centroid[:2]
        cov = q.T @ q / max(len(pts), 1)
        _, vecs = np.linalg.eigh(cov)
        v = vecs[:, 1]                  # dominant horizontal direction
        proj = q @ v
        skew = (proj ** 3).sum()
        if abs(skew) > 1e-9 * max(1.0, float((proj ** 2).sum())):
            if skew < 0:
                v = -v
        elif v[0] < 0 or (v[0] == 0 and v[1] < 0):
            v = -v
        c, s = v
        rotation = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(centroid=centroid, rotation=rotation)

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        return (points - self.centroid) @ self.rotation.T

    def from_canonical(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation + self.centroid


_PARAM_ORDER = (
    "trunk_w1", "trunk_b1", "trunk_w2", "trunk_b2",
    "prior_w1", "prior_b1", "prior_wm", "prior_bm", "prior_wd", "prior_bd",
    "post_w1", "post_b1", "post_wm", "post_bm", "post_wd", "post_bd",
    "dec_w1", "dec_b1", "dec_w2", "dec_b2", "dec_w3", "dec_b3", "dec_affine",
    "enh_lin", "enh_bias", "enh_scale",
)

_DEV_FLOOR = 1e-12
_OFFSET_LIMIT = 0.5                     # meters; learned scale is clamped here


@dataclass
class DecoderModel:
    """Encoder/decoder parameters plus the pipeline's shape constants."""

    params: dict[str, np.ndarray]
    latent_dim: int = 32
    coarse_points: int = 256
    upsample: int = 4
    enhance_k: int = 8
    trained: bool = False

    @property
    def output_points(self) -> int:
        return self.coarse_points * self.upsample

    def copy(self) -> "DecoderModel":
        return DecoderModel(params={k: v.copy() for k, v in self.params.items()},
                            latent_dim=self.latent_dim,
                            coarse_points=self.coarse_points,
                            upsample=self.upsample,
                            enhance_k=self.enhance_k,
                            trained=self.trained)

    def parameters(self) -> list[np.ndarray]:
        return [self.params[k] for k in _PARAM_ORDER]

    def frozen_parameter_mask(self) -> np.ndarray:
        return np.zeros(len(_PARAM_ORDER), dtype=bool)

    def replace_parameters(self, new: Sequence[np.ndarray]) -> "DecoderModel":
        out = self.copy()
        out.params = {k: np.asarray(v, dtype=np.float64)
                      for k, v in zip(_PARAM_ORDER, new)}
        return out


def _anchor_blend_init(upsample: int) -> np.ndarray:
    """Linear aggregation seeded at 'land on the j-th anchor's denoised
    position'; training refines from there instead of rediscovering it.

    Feature layout per coarse point: position (3), vector to the local
    input mean (3), then per anchor j the vector to the anchor (3) and
    the anchor's plane-projection correction (3)."""
    lin = np.zeros((6 + 6 * upsample, upsample * 3))
    eye = np.eye(3)
    for j in range(upsample):
        lin[6 + 6 * j:9 + 6 * j, 3 * j:3 * j + 3] = eye
        lin[9 + 6 * j:12 + 6 * j, 3 * j:3 * j + 3] = eye
    return lin


def init_decoder(latent_dim: int = 32, coarse_points: int = 256, upsample: int = 4,
                 enhance_k: int = 8, trunk_width: int = 64, global_dim: int = 128,
                 decode_width: int = 256, seed: int = 0) -> DecoderModel:
    """He-initialized decoder; enhancement offsets start at exactly zero.

    Deviation-head biases start strongly negative so early latent samples
    stay close to the posterior mean and the decoder can rely on them.
    """
    rng = np.random.default_rng(seed)

    def he(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))

    d, g = latent_dim, global_dim
    params = {
        "trunk_w1": he(3, trunk_width), "trunk_b1": np.zeros(trunk_width),
        "trunk_w2": he(trunk_width, g), "trunk_b2": np.zeros(g),
        "prior_w1": he(g, 64), "prior_b1": np.zeros(64),
        "prior_wm": he(64, d) * 0.1, "prior_bm": np.zeros(d),
        "prior_wd": he(64, d) * 0.1, "prior_bd": np.full(d, -3.0),
        "post_w1": he(g, 64), "post_b1": np.zeros(64),
        "post_wm": he(64, d) * 0.1, "post_bm": np.zeros(d),
        "post_wd": he(64, d) * 0.1, "post_bd": np.full(d, -3.0),
        "dec_w1": he(d + g + 3, decode_width), "dec_b1": np.zeros(decode_width),
        "dec_w2": he(decode_width, decode_width), "dec_b2": np.zeros(decode_width),
        "dec_w3": he(decode_width, 3) * 0.1, "dec_b3": np.zeros(3),
        "dec_affine": 0.7 * np.eye(3),
        "enh_lin": _anchor_blend_init(upsample),
        "enh_bias": np.zeros(upsample * 3),
        "enh_scale": np.array([_OFFSET_LIMIT]),
    }
    return DecoderModel(params=params, latent_dim=latent_dim,
                        coarse_points=coarse_points, upsample=upsample,
                        enhance_k=enhance_k)


def perturb_and_augment(cloud: LabeledCloud, noise_sigma: float = 0.05, seed: int = 0,
                        max_rotation: float = 2.0 * np.pi,
                        scale_range: tuple[float, float] = (0.95, 1.05)) -> LabeledCloud:
    """Simulated corruption: i.i.d. Gaussian offsets, then a random vertical
    rotation and uniform scale about the origin. Labels are preserved.
    """
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    pts = cloud.points + (rng.normal(0.0, noise_sigma, cloud.points.shape)
                          if noise_sigma > 0 else 0.0)
    angle = rng.uniform(0.0, max_rotation) if max_rotation > 0 else 0.0
    scale = rng.uniform(*scale_range) if scale_range != (1.0, 1.0) else 1.0
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = cloud.copy()
    out.points = (pts @ rot.T) * scale
    return out


# -- graph builders (single implementation serves training and inference) ----


def _tensors(model: DecoderModel, train: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=train) for k, v in model.params.items()}


def _trunk_global(p: dict[str, Tensor], canonical_pts: np.ndarray) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(Tensor(canonical_pts), p["trunk_w1"]), p["trunk_b1"]))
    h = ad.relu(ad.add(ad.matmul(h, p["trunk_w2"]), p["trunk_b2"]))
    return ad.reshape(ad.tmax(h, axis=0), (1, -1))


def _head(p: dict[str, Tensor], prefix: str, global_feat: Tensor) -> tuple[Tensor, Tensor]:
    h = ad.relu(ad.add(ad.matmul(global_feat, p[f"{prefix}_w1"]), p[f"{prefix}_b1"]))
    mean = ad.add(ad.matmul(h, p[f"{prefix}_wm"]), p[f"{prefix}_bm"])
    dev = ad.add(ad.softplus(ad.add(ad.matmul(h, p[f"{prefix}_wd"]), p[f"{prefix}_bd"])),
                 _DEV_FLOOR)
    return mean, dev


def sphere_template(m: int) -> np.ndarray:
    """Deterministic Fibonacci unit sphere with m points."""
    i = np.arange(m)
    phi = np.pi * (3.0 - np.sqrt(5.0))
    y = 1.0 - 2.0 * i / max(m - 1, 1)
    r = np.sqrt(np.clip(1.0 - y * y, 0.0, None))
    theta = phi * i
    return np.column_stack([r * np.cos(theta), y, r * np.sin(theta)])


def _decode_coarse(p: dict[str, Tensor], z: Tensor, global_feat: Tensor,
                   coarse_points: int) -> Tensor:
    """Per-template-point MLP deforming a unit sphere.

    The affine shortcut keeps the output a sensibly sized sphere from the
    first step; shared MLP weights keep the deformation smooth and the
    points spread over a surface.
    """
    template = sphere_template(coarse_points)
    x = ad.concat([ad.repeat_rows(z, coarse_points),
                   ad.repeat_rows(global_feat, coarse_points),
                   Tensor(template)], axis=1)
    h = ad.relu(ad.add(ad.matmul(x, p["dec_w1"]), p["dec_b1"]))
    h = ad.relu(ad.add(ad.matmul(h, p["dec_w2"]), p["dec_b2"]))
    deform = ad.add(ad.matmul(h, p["dec_w3"]), p["dec_b3"])
    return ad.add(ad.matmul(Tensor(template), p["dec_affine"]), deform)


def _plane_corrections(points: np.ndarray, index: SpatialIndex, k: int) -> np.ndarray:
    """Per-point vector projecting each point onto its local fitted plane.

    The correction is the normal component of the offset to the k-NN
    mean; adding it removes surface-normal noise without tangential
    smearing (edges and corners keep their extent).
    """
    idx, _ = index.query_many(points, k)
    nbrs = points[idx]
    mean = nbrs.mean(axis=1)
    centered = nbrs - mean[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, :, 0]
    depth = ((mean - points) * normal).sum(axis=1, keepdims=True)
    return depth * normal


def _assign_anchors(base: np.ndarray, canonical_input: np.ndarray,
                    index: SpatialIndex, upsample: int) -> np.ndarray:
    """(M, upsample) input anchors per coarse point.

    Each input point claims a slot on its nearest coarse point (closest
    first), so the anchor multiset covers nearly every input point; any
    unclaimed slots fall back to the coarse point's own nearest inputs.
    """
    m = base.shape[0]
    anchor_idx, _ = index.query_many(base, min(upsample, canonical_input.shape[0]))
    if anchor_idx.shape[1] < upsample:                    # tiny input clouds
        pad = np.repeat(anchor_idx[:, -1:], upsample - anchor_idx.shape[1], axis=1)
        anchor_idx = np.concatenate([anchor_idx, pad], axis=1)

    owner, dist = SpatialIndex(base).query_many(canonical_input, 1)
    owner, dist = owner[:, 0], dist[:, 0]
    order = np.lexsort((dist, owner))
    owner_sorted = owner[order]
    start = np.searchsorted(owner_sorted, np.arange(m))
    slot = np.arange(len(owner)) - start[owner_sorted]
    keep = slot < upsample
    anchor_idx[owner_sorted[keep], slot[keep]] = order[keep]
    return anchor_idx


def _enhance(p: dict[str, Tensor], model: DecoderModel, coarse: Tensor,
             canonical_input: np.ndarray) -> Tensor:
    """Each coarse point emits ``upsample`` bounded offset points.

    Features per coarse point: its position, the vector to the local
    input mean, and per assigned input anchor the vector to it plus its
    plane-projection correction. Offsets are a learned linear
    aggregation of those neighborhood vectors, clamped into the learned
    scale, so each offset head starts out landing exactly on a denoised
    input anchor. Anchors are constants with respect to the coarse
    positions.
    """
    n_in = canonical_input.shape[0]
    k = min(model.enhance_k, n_in)
    index = SpatialIndex(canonical_input)
    base = coarse.data                 # stop-gradient: offsets see positions as
    idx, _ = index.query_many(base, k)  # constants so the coarse stage keeps
    ctx_mean = canonical_input[idx].mean(axis=1)  # its full chamfer gradient
    anchor_idx = _assign_anchors(base, canonical_input, index, model.upsample)
    anchors = canonical_input[anchor_idx]                 # (M, upsample, 3)
    correction = _plane_corrections(canonical_input, index, k)[anchor_idx]

    blocks = [base, ctx_mean - base]
    for j in range(model.upsample):
        blocks.extend([anchors[:, j] - base, correction[:, j]])
    features = np.concatenate(blocks, axis=1)
    raw = ad.add(ad.matmul(Tensor(features), p["enh_lin"]), p["enh_bias"])
    scale = ad.clamp(p["enh_scale"], 0.0, _OFFSET_LIMIT)
    # clamp raw offsets into [-scale, scale] per component; exact inside
    over = ad.relu(ad.add(raw, ad.mul(scale, -1.0)))
    under = ad.relu(ad.add(ad.mul(raw, -1.0), ad.mul(scale, -1.0)))
    offsets = ad.reshape(ad.add(ad.add(raw, ad.mul(over, -1.0)), under), (-1, 3))
    return ad.add(ad.repeat_rows(coarse, model.upsample), offsets)


# -- public operations --------------------------------------------------------


def encode(model: DecoderModel, cloud: LabeledCloud,
           path: str = "prior") -> tuple[np.ndarray, LatentGaussian]:
    """Permutation-invariant global feature and latent Gaussian for a cloud.

    ``path`` selects the head: "prior" (perturbed input) or "posterior"
    (clean input).
    """
    if path not in ("prior", "posterior"):
        raise ValueError(f"path must be 'prior' or 'posterior', got {path!r}")
    if len(cloud) == 0:
        raise ValueError("cannot encode an empty cloud")
    frame = CanonicalFrame.from_points(cloud.points)
    p = _tensors(model, train=False)
    g = _trunk_global(p, frame.to_canonical(cloud.points))
    mean, dev = _head(p, "prior" if path == "prior" else "post", g)
    return g.data[0].copy(), LatentGaussian(mean=mean.data[0], deviation=dev.data[0])


def decode_coarse(model: DecoderModel, latent_sample: np.ndarray,
                  global_feature: np.ndarray) -> np.ndarray:
    """Coarse canonical point set (M, 3) from a latent draw and global feature."""
    z = np.asarray(latent_sample, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != model.latent_dim:
        raise ValueError(f"latent dimension {z.shape[1]} != {model.latent_dim}")
    g = np.asarray(global_feature, dtype=np.float64).reshape(1, -1)
    p = _tensors(model, train=False)
    return _decode_coarse(p, Tensor(z), Tensor(g), model.coarse_points).data.copy()


def enhance(model: DecoderModel, coarse: np.ndarray, cloud: LabeledCloud) -> np.ndarray:
    """Four bounded offset points per coarse point, guided by input neighborhoods.

    ``coarse`` is interpreted in the canonical frame of ``cloud``; the
    result is canonical as well and has exactly upsample * M points.
    """
    coarse = np.asarray(coarse, dtype=np.float64).reshape(-1, 3)
    if coarse.shape[0] == 0:
        raise ValueError("coarse point set is empty")
    frame = CanonicalFrame.from_points(cloud.points)
    p = _tensors(model, train=False)
    return _enhance(p, model, Tensor(coarse), frame.to_canonical(cloud.points)).data.copy()


def restore(model: DecoderModel, cloud: LabeledCloud) -> LabeledCloud:
    """Deterministic restoration: prior path, prior mean as the latent.

    Returns an unlabeled cloud of upsample * M points in world coordinates.
    """
    if not model.trained:
        raise StateError("decoder has not been trained; call train_decoder first")
    if len(cloud) == 0:
        raise ValueError("cannot restore an empty cloud")
    frame = CanonicalFrame.from_points(cloud.points)
    canonical = frame.to_canonical(cloud.points)
    p = _tensors(model, train=False)
    g = _trunk_global(p, canonical)
    mean, _ = _head(p, "prior", g)
    coarse = _decode_coarse(p, mean, g, model.coarse_points)
    fine = _enhance(p, model, coarse, canonical)
    return LabeledCloud(points=frame.from_canonical(fine.data),
                        labels=np.zeros(fine.data.shape[0], dtype=np.int64),
                        viewpoint=cloud.viewpoint.copy(), unlabeled=True)


@dataclass
class DecoderTrainResult:
    model: DecoderModel
    loss_trace: list[float] = field(default_factory=list)


def train_decoder(model: DecoderModel, clouds: Sequence[LabeledCloud], epochs: int,
                  kl_weight: float = 0.01, noise_sigma: float = 0.05,
                  lr: float = 2e-3, seed: int = 0,
                  max_rotation: float = 2.0 * np.pi,
                  scale_range: tuple[float, float] = (0.95, 1.05),
                  warmup_fraction: float = 0.0,
                  enhance_lr_scale: float = 0.0) -> DecoderTrainResult:
    """Fit the decoder on clean clouds against self-generated perturbations.

    Per cloud and epoch: perturb + augment, encode both paths, sample the
    posterior via the reparameterization identity, decode, enhance, and
    minimize chamfer(fine, clean) + kl_weight * KL(posterior || prior).
    The loss trace holds one mean value per epoch.

    The anchor-aggregation stage starts at a principled geometric
    initialization (land on each anchor's plane-projected position). By
    default it stays there (``enhance_lr_scale`` = 0): measured end to
    end, any learning rate on that stage drifts it off the denoising
    optimum because the augmented training task rewards offsets that
    partially compensate scale jitter. Raise ``enhance_lr_scale`` (and
    optionally delay with ``warmup_fraction``) to train it anyway.
    """
    if not clouds:
        raise ValueError("need at least one training cloud")
    model = model.copy()
    state = AdamState.for_model(model)
    hyper = AdamHyper(lr=lr)
    rng = named_rng(seed, "decoder-train")
    trace: list[float] = []
    warmup_epochs = int(warmup_fraction * epochs)
    enhance_params = {k for k in _PARAM_ORDER if k.startswith("enh_")}
    lr_scale = [enhance_lr_scale if k in enhance_params else 1.0
                for k in _PARAM_ORDER]

    for epoch in range(epochs):
        epoch_loss = 0.0
        for ci, clean in enumerate(clouds):
            aug_seed = int(rng.integers(2 ** 62))
            x_g = perturb_and_augment(clean, noise_sigma, seed=aug_seed,
                                      max_rotation=max_rotation, scale_range=scale_range)
            frame_g = CanonicalFrame.from_points(x_g.points)
            canonical_g = frame_g.to_canonical(x_g.points)
            frame_c = CanonicalFrame.from_points(clean.points)

            p = _tensors(model, train=True)
            g_g = _trunk_global(p, canonical_g)
            mu_p, dev_p = _head(p, "prior", g_g)
            g_c = _trunk_global(p, frame_c.to_canonical(clean.points))
            mu_q, dev_q = _head(p, "post", g_c)

            epsilon = rng.standard_normal((1, model.latent_dim))
            z = ad.add(mu_q, ad.mul(dev_q, epsilon))
            coarse = _decode_coarse(p, z, g_g, model.coarse_points)
            fine = _enhance(p, model, coarse, canonical_g)
            fine_world = ad.add(ad.matmul(fine, frame_g.rotation), frame_g.centroid)

            loss = chamfer_to_target(fine_world, clean.points)
            if kl_weight != 0.0:
                loss = ad.add(loss, ad.mul(
                    kl_gaussian_tensors(mu_q, dev_q, mu_p, dev_p), kl_weight))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"decoder loss diverged at epoch {epoch}")
            loss.backward()
            grads = []
            for k in _PARAM_ORDER:
                t = p[k]
                g = t.grad if t.grad is not None else np.zeros_like(t.data)
                if epoch < warmup_epochs and k in enhance_params:
                    g = np.zeros_like(g)
                grads.append(g)
            model, state = adam_step(model, grads, state, hyper, lr_scale=lr_scale)
            epoch_loss += value
        trace.append(epoch_loss / len(clouds))
    model.trained = True
    return DecoderTrainResult(model=model, loss_trace=trace)


def transfer_labels(restored: LabeledCloud, reference: LabeledCloud,
                    reference_valid: np.ndarray, reference_labels: np.ndarray,
                    max_distance: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Label restored points from validated reference points within range.

    Each restored point inherits the label of its nearest reference point
    whose ``reference_valid`` flag is set and which lies within
    ``max_distance`` meters; everything else is marked invalid. Returns
    (labels, valid mask) for the restored cloud.
    """
    labels = np.zeros(len(restored), dtype=np.int64)
    valid = np.zeros(len(restored), dtype=bool)
    keep = np.flatnonzero(reference_valid)
    if keep.size == 0 or len(restored) == 0:
        return labels, valid
    idx, dist = SpatialIndex(reference.points[keep]).query_many(restored.points, 1)
    near = dist[:, 0] <= max_distance
    labels[near] = reference_labels[keep][idx[near, 0]]
    valid[near] = True
    return labels, valid


def save_decoder(model: DecoderModel, path) -> None:
    meta = {
        "latent_dim": model.latent_dim,
        "coarse_points": model.coarse_points,
        "upsample": model.upsample,
        "enhance_k": model.enhance_k,
        "trained": int(model.trained),
    }
    save_checkpoint(path, "decoder", meta, dict(model.params))


def load_decoder(path) -> DecoderModel:
    kind, meta, arrays = load_checkpoint(path)
    if kind != "decoder":
        raise FormatError(f"{path}: expected a decoder checkpoint, got {kind!r}")
    return DecoderModel(params={k: arrays[k] for k in _PARAM_ORDER},
                        latent_dim=int(meta["latent_dim"]),
                        coarse_points=int(meta["coarse_points"]),
                        upsample=int(meta["upsample"]),
                        enhance_k=int(meta["enhance_k"]),
                        trained=bool(meta["trained"]))
