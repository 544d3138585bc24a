"""perturb: attention-guided occlusion training for facial-expression CNNs.

Pipeline: train a small CNN with spatial attention gates, k-means the
pixels of its mean attention map in a weighted (row, col, intensity)
space, then train the deployed predictor with stochastic single-cluster
occlusion so it stops over-relying on any one facial region.
"""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import (
    ClusterConfig,
    ClusterModel,
    PixelPoint,
    cluster_to_masks,
    epoch_update,
    kmeans_fit,
    pixel_distance,
)
from .config import RunConfig, default_config, load_config, save_config
from .data import (
    AugmentConfig,
    Dataset,
    EMOTIONS,
    MaskSpec,
    apply_mask,
    augment,
    class_distribution,
    mask_dataset,
    parse_fer_csv,
    serialize_fer_csv,
)
from .metrics import (
    ChangeTable,
    MetricsReport,
    evaluate,
    percent_change,
    sweep_clusters,
)
from .models import (
    Model,
    ModelSpec,
    build_model,
    default_attention_spec,
    default_predictor_spec,
    ensemble_predict,
    extract_attention,
    saliency,
)
from .synthetic import glyph_benchmark, make_glyph_dataset, occlude_regions
from .tensor import GradTape, Tensor, finite_difference_check, no_grad
from .training import (
    RlrpConfig,
    TrainConfig,
    run_perturb_scheme,
    sgd_nesterov_step,
    train_attention,
    train_baseline,
    train_masked_predictor,
)
