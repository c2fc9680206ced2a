"""Spatial supervision for scene-grounded language models: BEV ground truth
from depth and pose, Gaussian-NLL and orientation losses with closed-form
gradients, the localization metrics, and synthetic oracles for all of it."""

from .bev import BevGroundTruth, MaskPolicy, build_bev_ground_truth, gravity_rotation, load_bev, save_bev
from .evaluation import (AgentPoseGT, LocalizationRecord, MetricsReport, gt_to_bev, position_metrics,
                         uncertainty_partition)
from .losses import (GaussPrediction, LossReport, LossWeights, gnll, layout_loss, orientation_loss,
                     situation_loss, total_loss)
from .orientation import DegenerateOrientationError, OrientationCodec, decode, decode_logits, encode_target, wrap
from .scene import (DepthMap, Intrinsics, PatchGridSpec, Pose, SceneError, SceneSequence, load_scene,
                    patch_grid, sample_frames, save_scene)

__version__ = "0.1.0"
