"""Adversarial corruption and defense toolkit for cross-domain 3D
point-cloud semantic segmentation.

Offense: distance-weighted PGD coordinate perturbation plus confident
label noise over randomly selected classes. Defense: a long-tail margin
objective, a probabilistic restoration decoder with quorum-vote
pseudo-label refinement, teacher-student adaptation, and clean-data
fine-tuning. Everything runs at desk scale on synthetic scenes or real
KITTI-format scans.
"""

from .adaptation import (AdaptState, FineTuneData, HnpuConfig, MixedScene,
                         PseudoLabels, adaptation_step, ema_update, fine_tune,
                         hnpu_update, make_finetune_split, mix_domains,
                         teacher_predict)
from .attack import (AttackConfig, ContaminationManifest, contaminate_dataset,
                     contaminate_scan, corrupt_labels, distance_gamma,
                     pgd_attack, select_classes, write_manifest)
from .bayesopt import (BoState, expected_improvement, gp_posterior,
                       optimize_lambda)
from .cloud import ClassStats, LabeledCloud, class_histogram, viewpoint_distances
from .decoder import (DecoderModel, LatentGaussian, decode_coarse, encode,
                      enhance, init_decoder, load_decoder, perturb_and_augment,
                      restore, save_decoder, train_decoder, transfer_labels)
from .errors import (AdaptationError, AdvSegError, DataError, FormatError,
                     GraphError, NumericError, StateError, TrainingError)
from .estimators import (CloudRestorer, DistanceWeightedPGD, DomainAdapter,
                         OutlierRemover, PointCloudSegmenter)
from .experiment import (ExperimentConfig, ExperimentResult, PipelineParams,
                         TABLE_ROWS, ToggleRow, run_experiment)
from .kitti import load_kitti_scan, save_kitti_scan, scan_paths
from .losses import (KeyPointMask, MarginTable, chamfer, chamfer_to_target,
                     cross_entropy, dynamic_margins, key_point_mask,
                     kl_diag_gaussian, kps_loss, rlt_loss, soft_dice)
from .metrics import (confusion, distribution_shift_report, iou_per_class,
                      miou)
from .network import (SegModel, adam_step, finite_diff_check, forward,
                      init_model, load_model, point_features, predict_labels,
                      save_model, sgd_step)
from .scenes import (SceneSpec, shape_family_cloud, source_domain_spec,
                     synth_scene, target_domain_spec)
from .spatial import (SpatialIndex, build_index, geometric_importance, knn,
                      statistical_outlier_removal)
from .training import Scene, evaluate_scenes, prepare_scene, pretrain

__version__ = "0.1.0"
