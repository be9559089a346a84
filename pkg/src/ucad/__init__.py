"""Continual unsupervised anomaly detection with a key/prompt/knowledge memory."""

from .encoder import Encoder, EncoderConfig, PatchFeatureMap, PromptSet, init_encoder, patchify
from .estimator import ContinualAnomalyDetector, check_images, check_label_maps
from .inference import (
    AnomalyResult,
    anomaly_map,
    image_score,
    infer,
    patch_scores,
    reweight_factor,
    select_task,
    task_distance,
)
from .memory import (
    MemoryFormatError,
    MemorySpace,
    TaskEntry,
    build_task_entry,
    coreset_select,
    coverage_radius,
    fps_select,
    load,
    persist,
)
from .metrics import aupr, auroc, avg_fm
from .scl import SclConfig, region_cosine_stats, scl_loss, train_prompts
from .segmenter import downsample_labels, segment_flood, segment_synthetic

__version__ = "0.1.0"
