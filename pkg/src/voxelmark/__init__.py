"""voxelmark: hide recoverable payloads inside voxel radiance field renderings.

The pipeline: fit an explicit voxel field to posed images, freeze it,
then jointly optimize a perturbed copy of the field and a convolutional
detector so the detector recovers a hidden payload from any rendering of
the perturbed field (and nothing from the original), while an
importance-derived gradient mask keeps the perturbation away from the
weights that matter for image quality.
"""

from .cameras import Camera, InvalidCamera, camera_rays, look_at
from .detector import (ClassifierOutput, DetectorConfig, DetectorParams,
                       HiddenPayload, classify, decode, detector_vjp,
                       forward_detector, init_detector, load_detector,
                       save_detector)
from .field import (RenderSettings, VoxelRadianceField, flatten_params,
                    load_field, render, render_vjp, sample_field, save_field,
                    unflatten_params)
from .lsb import lsb_embed, lsb_extract
from .metrics import psnr, ssim
from .ops import (ShapeMismatch, activation, activation_vjp, conv2d,
                  conv2d_vjp, finite_diff_check, resample2d, resample2d_vjp)
from .robustness import (DegradeSpec, ablation_run, degrade, gaussian_blur,
                         jpeg_like, lsb_through_nerf_experiment,
                         robustness_sweep)
from .scenes import (Box, SceneDataset, Sphere, SyntheticSceneSpec,
                     bilinear_resize, generate_synthetic_scene, load_dataset,
                     load_payload_image, make_test_payload, save_dataset)
from .training import (MaskVector, StegaState, StegaTrainingError,
                       TrainConfig, assign_clusters, compute_mask,
                       prepare_state, stage1_fit, stage2_step, stega_grads,
                       stega_losses, train_stega)
from .verification import (StegaEvaluation, VerificationReport,
                           evaluate_stega, verify)

__version__ = "0.1.0"
