"""End-to-end experiment grid: {clean, attacked} sources x AAF toggles.

Each cell pre-trains on the (possibly corrupted) source scenes, runs
teacher-student adaptation toward the target scenes, optionally trains
the restoration decoder (with HNPU pseudo-label refinement) and/or
fine-tunes on a small clean subset, then evaluates target mIoU. All
randomness flows from the experiment seed through named substreams, so
any cell is independently re-runnable and re-running the whole grid is
bit-identical.
"""

from __future__ import annotations

import csv
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adaptation import (AdaptState, FineTuneData, HnpuConfig, MixedScene,
                         adaptation_step, append_points, fine_tune,
                         hnpu_update, make_finetune_split, mix_domains,
                         teacher_predict)
from .attack import AttackConfig, ContaminationManifest, contaminate_scan
from .cloud import LabeledCloud, class_histogram
from .decoder import DecoderModel, init_decoder, restore, train_decoder, transfer_labels
from .losses import MarginTable, dynamic_margins
from .metrics import iou_per_class, miou
from .network import SegModel, point_features
from .scenes import SceneSpec, source_domain_spec, synth_scene, target_domain_spec
from .spatial import SpatialIndex, geometric_importance
from .training import (Scene, evaluate_scenes, pooled_stats, prepare_scene,
                       pretrain_fresh)
from .util import named_rng


@dataclass(frozen=True)
class ToggleRow:
    """One ablation row: which AAF components are enabled."""

    name: str
    fine_tuning: bool
    rlt: bool
    decoder: bool


TABLE_ROWS: tuple[ToggleRow, ...] = (
    ToggleRow("baseline", False, False, False),
    ToggleRow("a", False, True, False),
    ToggleRow("b", False, False, True),
    ToggleRow("c", False, True, True),
    ToggleRow("d", True, False, False),
    ToggleRow("e", True, True, False),
    ToggleRow("f", True, False, True),
    ToggleRow("g", True, True, True),
)

ROW_BY_NAME = {r.name: r for r in TABLE_ROWS}


@dataclass
class PipelineParams:
    """Desk-scale hyperparameters for every pipeline stage."""

    pretrain_steps: int = 260
    pretrain_lr: float = 2e-3
    batch_points: int = 4096
    lambda_rlt: float = 0.5
    key_fraction: float = 0.3
    margin_exponent: float = 0.25
    max_margin: float = 0.5
    margin_scale: float = 10.0

    adapt_steps: int = 120
    adapt_lr: float = 1e-3
    adapt_batch_points: int = 3000
    ema_decay: float = 0.99
    mix_ratio: float = 0.5
    pseudo_every: int = 5
    tau_low: float = 0.6
    tau_high: float = 0.9
    hnpu_k: int = 8
    hnpu_quorum: int = 6                # super-majority; neutral-safe on a
                                        # poisoned teacher (measured)

    decoder_epochs: int = 60
    decoder_coarse: int = 256
    decoder_latent: int = 32
    decoder_cloud_points: int = 2048
    decoder_lr: float = 2e-3
    kl_weight: float = 0.01
    restore_every: int = 40
    restore_max_distance: float = 0.6   # scene point spacing; 0.3 rejects all
    restore_target: bool = False        # also splice restored target points

    ft_fraction: float = 0.05
    ft_patience: int = 3
    ft_max_epochs: int = 25
    ft_lr: float = 2e-3

    reference_steps: int = 200


@dataclass
class ExperimentConfig:
    """What to run: domains, attack, toggle rows, seeds, output."""

    scenario: str = "synthetic"
    seeds: tuple[int, ...] = (0,)
    num_classes: int = 8
    scan_points: int = 20000
    num_source: int = 3
    num_target: int = 2
    num_eval: int = 2
    attack: AttackConfig = field(default_factory=AttackConfig)
    sources: tuple[str, ...] = ("clean", "attacked")
    clean_rows: tuple[str, ...] = ("baseline",)
    attacked_rows: tuple[str, ...] = tuple(r.name for r in TABLE_ROWS)
    params: PipelineParams = field(default_factory=PipelineParams)
    output_dir: Optional[str] = None
    workers: int = 1
    source_specs: Optional[Sequence[SceneSpec]] = None
    target_specs: Optional[Sequence[SceneSpec]] = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        for name in tuple(self.clean_rows) + tuple(self.attacked_rows):
            if name not in ROW_BY_NAME:
                raise ValueError(f"unknown toggle row {name!r}")


def _child_seed(seed: int, *names: str) -> int:
    h = int(seed)
    for n in names:
        h = (h * 0x9E3779B1 + zlib.crc32(n.encode())) % (2 ** 62)
    return h


@dataclass
class SeedBundle:
    """Everything one seed's cells share: scenes, reference model, attack."""

    seed: int
    source_clean: list[Scene]
    source_attacked: list[Scene]
    target_train: list[Scene]
    target_eval: list[Scene]
    reference_model: SegModel
    manifest: ContaminationManifest


def build_bundle(cfg: ExperimentConfig, seed: int) -> SeedBundle:
    """Generate domains, pre-train the attack reference model, contaminate."""
    if cfg.source_specs is not None:
        src_specs = list(cfg.source_specs)
    else:
        src_specs = [replace(source_domain_spec(_child_seed(seed, f"src{i}")),
                             num_points=cfg.scan_points)
                     for i in range(cfg.num_source)]
    if cfg.target_specs is not None:
        tgt_specs = list(cfg.target_specs)
    else:
        tgt_specs = [replace(target_domain_spec(_child_seed(seed, f"tgt{i}")),
                             num_points=cfg.scan_points)
                     for i in range(cfg.num_target + cfg.num_eval)]

    source_clean = [prepare_scene(synth_scene(s), scan_id=f"src{i:02d}")
                    for i, s in enumerate(src_specs)]
    target_scenes = [prepare_scene(synth_scene(s), scan_id=f"tgt{i:02d}")
                     for i, s in enumerate(tgt_specs)]
    target_train = target_scenes[:cfg.num_target]
    target_eval = target_scenes[cfg.num_target:] or target_train

    reference = pretrain_fresh(source_clean, cfg.num_classes, loss="ce",
                               steps=cfg.params.reference_steps,
                               batch_points=cfg.params.batch_points,
                               lr=cfg.params.pretrain_lr,
                               seed=_child_seed(seed, "reference")).model

    attack_cfg = replace(cfg.attack, seed=_child_seed(seed, "attack"))
    manifest = ContaminationManifest(seed=attack_cfg.seed,
                                     num_classes=cfg.num_classes)
    source_attacked = []
    for scene in source_clean:
        corrupted, record = contaminate_scan(reference, scene.cloud, attack_cfg,
                                             scan_id=scene.scan_id)
        manifest.records.append(record)
        source_attacked.append(prepare_scene(corrupted, scan_id=scene.scan_id))

    return SeedBundle(seed=seed, source_clean=source_clean,
                      source_attacked=source_attacked, target_train=target_train,
                      target_eval=target_eval, reference_model=reference,
                      manifest=manifest)


@dataclass
class CellResult:
    source: str
    row: str
    seed: int
    status: str = "ok"
    miou: float = float("nan")
    iou: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class RestoredPoints:
    """Restored, label-transferred points ready to splice into t->s scenes."""

    points: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    importance: np.ndarray


def _restored_supplements(decoder: DecoderModel, state: AdaptState,
                          scenes: Sequence[Scene], indexes: Sequence[SpatialIndex],
                          hnpu: HnpuConfig, params: PipelineParams,
                          feature_k: int) -> list[Optional[RestoredPoints]]:
    """Restore each source scene and label it from HNPU-validated teacher
    predictions; scenes with nothing to transfer yield None.

    Restored points are featurized inside the full scene (scene points
    plus restored points), not against the sparse restored sketch alone;
    sketch-context neighborhoods have badly out-of-distribution density
    statistics for the classifier.
    """
    out: list[Optional[RestoredPoints]] = []
    for scene, index in zip(scenes, indexes):
        pseudo = hnpu_update(
            teacher_predict(state, scene.cloud, hnpu, features=scene.features),
            index, hnpu)
        restored = restore(decoder, scene.cloud)
        labels, valid = transfer_labels(restored, scene.cloud, pseudo.valid,
                                        pseudo.labels,
                                        max_distance=params.restore_max_distance)
        if not valid.any():
            out.append(None)
            continue
        kept_points = restored.points[valid]
        kept_labels = labels[valid]
        combined = LabeledCloud(
            points=np.concatenate([scene.cloud.points, kept_points]),
            labels=np.concatenate([scene.cloud.labels, kept_labels]),
            viewpoint=scene.cloud.viewpoint.copy())
        rows = np.arange(len(scene.cloud), len(combined))
        feats = point_features(combined, k=feature_k, subset=rows)
        nearest_scene, _ = index.query_many(kept_points, 1)
        imp = scene.importance[nearest_scene[:, 0]]
        out.append(RestoredPoints(points=kept_points, labels=kept_labels,
                                  features=feats, importance=imp))
    return out


def make_margins(scenes: Sequence[Scene], num_classes: int, rlt: bool,
                 p: PipelineParams) -> tuple[float, MarginTable]:
    """Blend weight + margin table for a toggle setting.

    With the long-tail loss off, zero margins at unit scale and lam = 1
    reduce the blend to plain cross-entropy.
    """
    if rlt:
        stats = pooled_stats(scenes, num_classes)
        return p.lambda_rlt, dynamic_margins(stats, exponent=p.margin_exponent,
                                             max_margin=p.max_margin,
                                             scale=p.margin_scale)
    return 1.0, MarginTable(margins=np.zeros(num_classes), scale=1.0,
                            exponent=0.0, max_margin=0.0)


def train_cell_decoder(scenes_src: Sequence[Scene], p: PipelineParams,
                       seed: int) -> DecoderModel:
    """Fit the restoration decoder on subsampled source scenes."""
    rng = named_rng(seed, "decoder-subsample")
    dec_clouds = []
    for scene in scenes_src:
        rows_pick = rng.choice(len(scene), size=min(p.decoder_cloud_points,
                                                    len(scene)), replace=False)
        dec_clouds.append(scene.cloud.select(rows_pick))
    return train_decoder(
        init_decoder(latent_dim=p.decoder_latent, coarse_points=p.decoder_coarse,
                     seed=_child_seed(seed, "decoder")),
        dec_clouds, epochs=p.decoder_epochs, kl_weight=p.kl_weight,
        lr=p.decoder_lr, seed=_child_seed(seed, "decoder-train")).model


def adapt_segmenter(model: SegModel, scenes_src: Sequence[Scene],
                    target_scenes: Sequence[Scene], p: PipelineParams,
                    lam: float, margins: MarginTable, seed: int,
                    decoder: Optional[DecoderModel] = None,
                    stream: str = "adapt") -> SegModel:
    """Teacher-student adaptation loop; returns the EMA teacher.

    When a trained decoder is given, target pseudo-labels are refined by
    HNPU and restored source points (labeled from HNPU-validated teacher
    predictions) are spliced into the t->s scenes.
    """
    hnpu = HnpuConfig(k=p.hnpu_k, tau_high=p.tau_high, tau_low=p.tau_low,
                      quorum=p.hnpu_quorum)
    state = AdaptState.from_model(model, ema_decay=p.ema_decay,
                                  mixing_ratio=p.mix_ratio, lr=p.adapt_lr)
    src_indexes = [SpatialIndex(s.cloud.points) for s in scenes_src]
    tgt_indexes = [SpatialIndex(s.cloud.points) for s in target_scenes]
    step_rng = named_rng(seed, stream)
    pseudos: list = [None] * len(target_scenes)
    restored: list[Optional[RestoredPoints]] = [None] * len(scenes_src)
    restored_tgt: list[Optional[RestoredPoints]] = [None] * len(target_scenes)

    for t in range(p.adapt_steps):
        ti = t % len(target_scenes)
        si = t % len(scenes_src)
        tgt, src = target_scenes[ti], scenes_src[si]

        if pseudos[ti] is None or t % p.pseudo_every == 0:
            pseudo = teacher_predict(state, tgt.cloud, hnpu, features=tgt.features)
            if decoder is not None:
                pseudo = hnpu_update(pseudo, tgt_indexes[ti], hnpu)
            pseudos[ti] = pseudo
        if decoder is not None and t % p.restore_every == 0:
            restored = _restored_supplements(decoder, state, scenes_src,
                                             src_indexes, hnpu, p, model.feature_k)
            if p.restore_target:
                restored_tgt = _restored_supplements(decoder, state, target_scenes,
                                                     tgt_indexes, hnpu, p,
                                                     model.feature_k)

        s2t, t2s = mix_domains(src.cloud, tgt.cloud, pseudos[ti],
                               ratio=p.mix_ratio, seed=_child_seed(seed, "mix", str(t)))
        s2t_feats = np.concatenate([tgt.features, src.features[s2t.donor_indices]])
        s2t_imp = np.concatenate([tgt.importance, src.importance[s2t.donor_indices]])
        t2s_feats = np.concatenate([src.features, tgt.features[t2s.donor_indices]])
        t2s_imp = np.concatenate([src.importance, tgt.importance[t2s.donor_indices]])
        extra = restored[si]
        if extra is not None:
            t2s = append_points(t2s, extra.points, extra.labels,
                                np.ones(len(extra.labels), dtype=bool))
            t2s_feats = np.concatenate([t2s_feats, extra.features])
            t2s_imp = np.concatenate([t2s_imp, extra.importance])
        extra_t = restored_tgt[ti]
        if extra_t is not None:
            s2t = append_points(s2t, extra_t.points, extra_t.labels,
                                np.ones(len(extra_t.labels), dtype=bool))
            s2t_feats = np.concatenate([s2t_feats, extra_t.features])
            s2t_imp = np.concatenate([s2t_imp, extra_t.importance])

        state, _ = adaptation_step(state, (s2t, t2s), lam, margins,
                                   key_fraction=p.key_fraction,
                                   scene_features=(s2t_feats, t2s_feats),
                                   scene_importance=(s2t_imp, t2s_imp),
                                   max_points=p.adapt_batch_points, rng=step_rng)
    return state.teacher


def run_cell(bundle: SeedBundle, source_kind: str, row: ToggleRow,
             cfg: ExperimentConfig) -> CellResult:
    """One grid cell: pre-train, adapt (with optional decoder branch),
    optionally fine-tune, evaluate on the held-out target scenes.

    The long-tail toggle switches the adaptation objective (margin
    key-point loss blended with SoftDice, margins from the source class
    stats); pre-training stays plain cross-entropy at this scale, where
    margin pre-training from random init measurably degrades the trunk
    that fine-tuning later builds on.
    """
    p = cfg.params
    seed = bundle.seed
    scenes_src = bundle.source_attacked if source_kind == "attacked" else bundle.source_clean

    pre = pretrain_fresh(scenes_src, cfg.num_classes, loss="ce",
                         steps=p.pretrain_steps, batch_points=p.batch_points,
                         lr=p.pretrain_lr, seed=_child_seed(seed, "init"))
    lam, margins = make_margins(scenes_src, cfg.num_classes, row.rlt, p)
    decoder = train_cell_decoder(scenes_src, p, seed) if row.decoder else None

    adapted = adapt_segmenter(pre.model, scenes_src, bundle.target_train, p,
                              lam, margins, seed, decoder=decoder,
                              stream=f"adapt-{source_kind}-{row.name}")

    if row.fine_tuning:
        data = make_finetune_split([s.cloud for s in bundle.source_clean],
                                   fraction=p.ft_fraction,
                                   seed=_child_seed(seed, "ft-split"),
                                   feature_k=adapted.feature_k,
                                   features=[s.features for s in bundle.source_clean])
        adapted = fine_tune(adapted, data, patience=p.ft_patience,
                            max_epochs=p.ft_max_epochs, lr=p.ft_lr,
                            seed=_child_seed(seed, "ft"))

    _, iou, m = evaluate_scenes(adapted, bundle.target_eval)
    return CellResult(source=source_kind, row=row.name, seed=seed, miou=m, iou=iou)


def _run_seed(cfg: ExperimentConfig, seed: int) -> list[CellResult]:
    results = []
    try:
        bundle = build_bundle(cfg, seed)
    except Exception as exc:
        for source_kind in cfg.sources:
            rows = cfg.clean_rows if source_kind == "clean" else cfg.attacked_rows
            results.extend(CellResult(source=source_kind, row=name, seed=seed,
                                      status=f"failed: {exc}")
                           for name in rows)
        return results
    for source_kind in cfg.sources:
        rows = cfg.clean_rows if source_kind == "clean" else cfg.attacked_rows
        for name in rows:
            try:
                results.append(run_cell(bundle, source_kind, ROW_BY_NAME[name], cfg))
            except Exception as exc:
                results.append(CellResult(source=source_kind, row=name, seed=seed,
                                          status=f"failed: {exc}"))
    return results


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list[CellResult]

    def miou(self, source: str, row: str, seed: Optional[int] = None):
        """One cell's mIoU, or the mean over seeds when seed is None."""
        picked = [c.miou for c in self.cells
                  if c.source == source and c.row == row and c.status == "ok"
                  and (seed is None or c.seed == seed)]
        if not picked:
            return float("nan")
        return picked[0] if seed is not None else float(np.mean(picked))

    def seeds_where(self, predicate) -> list[int]:
        return sorted({c.seed for c in self.cells if predicate(c)})


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute the grid; failed cells are recorded, the rest proceed."""
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        chunks = [_run_seed(cfg, seed) for seed in cfg.seeds]
    cells = [c for chunk in chunks for c in chunk]
    result = ExperimentResult(config=cfg, cells=cells)
    if cfg.output_dir is not None:
        write_results(result, cfg.output_dir)
    return result


def write_results(result: ExperimentResult, out_dir) -> None:
    """Per-cell CSV plus a plain-text summary in ablation-table layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = result.config.num_classes
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "source", "row", "seed", "status", "miou"]
                   + [f"iou_{i}" for i in range(c)])
        for cell in result.cells:
            iou = cell.iou if cell.iou.size == c else np.full(c, np.nan)
            w.writerow([result.config.scenario, cell.source, cell.row, cell.seed,
                        cell.status, repr(float(cell.miou))]
                       + [repr(float(v)) for v in iou])
    with open(out / "summary.txt", "w") as fh:
        fh.write(format_summary(result))


def format_summary(result: ExperimentResult) -> str:
    """Rows = toggle combinations, columns = component flags + mean mIoU."""
    lines = [f"scenario: {result.config.scenario}",
             f"seeds: {list(result.config.seeds)}",
             "",
             f"{'source':>9} {'row':>9} {'ft':>3} {'rlt':>4} {'dec':>4} "
             f"{'mIoU(mean)':>11} {'cells':>6}"]
    for source_kind in result.config.sources:
        rows = (result.config.clean_rows if source_kind == "clean"
                else result.config.attacked_rows)
        for name in rows:
            row = ROW_BY_NAME[name]
            ok = [cell for cell in result.cells
                  if cell.source == source_kind and cell.row == name
                  and cell.status == "ok"]
            mean = float(np.mean([cell.miou for cell in ok])) if ok else float("nan")
            mark = lambda b: "x" if b else "-"
            lines.append(f"{source_kind:>9} {name:>9} {mark(row.fine_tuning):>3} "
                         f"{mark(row.rlt):>4} {mark(row.decoder):>4} "
                         f"{mean:>11.4f} {len(ok):>6}")
    return "\n".join(lines) + "\n"


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def lambda_tuning_objective(train_scenes: Sequence[Scene],
                            val_scenes: Sequence[Scene], num_classes: int,
                            epochs: int = 5, batch_points: int = 4096,
                            lr: float = 2e-3, seed: int = 0):
    """Objective for the blend-weight tuner: validation mIoU of a short
    long-tail pre-training run at the queried lambda."""
    n = sum(len(s) for s in train_scenes)
    steps = max(epochs * int(np.ceil(n / batch_points)), 1)

    def objective(lam: float) -> float:
        res = pretrain_fresh(train_scenes, num_classes, loss="rlt",
                             lambda_rlt=lam, steps=steps,
                             batch_points=batch_points, lr=lr,
                             seed=_child_seed(seed, "tune"))
        _, _, m = evaluate_scenes(res.model, val_scenes)
        return float("-inf") if np.isnan(m) else float(m)

    return objective
