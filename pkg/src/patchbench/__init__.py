"""patchbench: universal adversarial patch attacks and a two-stage
saliency-guided detect / mask-and-inpaint defense, at desk scale."""

__version__ = "0.1.0"

from .model_zoo import (Classifier, Dataset, GradientRequest, TrainConfig,
                        input_gradient, make_shapes_dataset, predict,
                        train_classifier)
from .patch_forge import (AdaptiveSaliencyConfig, AdversarialPatch, EotConfig,
                          PatchSpec, PatchTrainConfig, Placement, apply_patch,
                          attack_success_rate, sample_placement, train_patch,
                          train_patch_adaptive_masking,
                          train_patch_adaptive_saliency)
from .saliency import (Box, SaliencyMap, SmoothGradConfig, average_filter,
                       locate_max_box, locate_min_box, smoothgrad)
from .detector import (DetectionConfig, DetectionOutcome, HoldoutSet,
                       build_holdout, detect, transplant)
from .mitigator import (InpaintBackend, MaskSpec, MitigationResult, inpaint,
                        mitigate, random_mask)
from .pipeline import PipelineConfig, Verdict, process, process_batch
from .harness import MetricsReport, compute_metrics, emit_plots, run_experiment
from .harness_config import ExperimentConfig

__all__ = [
    "AdaptiveSaliencyConfig", "AdversarialPatch", "Box", "Classifier",
    "Dataset", "DetectionConfig", "DetectionOutcome", "EotConfig",
    "ExperimentConfig", "GradientRequest", "HoldoutSet", "InpaintBackend",
    "MaskSpec", "MetricsReport", "MitigationResult", "PatchSpec",
    "PatchTrainConfig", "PipelineConfig", "Placement", "SaliencyMap",
    "SmoothGradConfig", "TrainConfig", "Verdict", "apply_patch",
    "attack_success_rate", "average_filter", "build_holdout", "compute_metrics",
    "detect", "emit_plots", "inpaint", "input_gradient", "locate_max_box",
    "locate_min_box", "make_shapes_dataset", "mitigate", "predict", "process",
    "process_batch", "random_mask", "run_experiment", "sample_placement",
    "smoothgrad", "train_classifier", "train_patch",
    "train_patch_adaptive_masking", "train_patch_adaptive_saliency",
    "transplant",
]
