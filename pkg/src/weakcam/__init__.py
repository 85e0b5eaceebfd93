"""weakcam: weakly-supervised segmentation benchmark.

Class-activation-map training with clustered sub-class labels, point-prompt
affinity mining, random-walk CAM refinement, pseudo-label generation, and the
metrics/ablation harness around them.
"""

from .config import RunConfig, default_config, load_config, parse_config, save_config
from .fields import (
    SparseMatrix,
    downsample_avg,
    hadamard_power,
    make_rng,
    minmax_normalize,
    sparse_from_entries,
    sparse_identity,
    sparse_matvec,
)
from .metrics import aggregate, assd, dice, hd95, jaccard, score_pair
from .pipeline import export_prompt_masks, run_ablation, run_pipeline, run_sweep
from .prompts import OracleConfig, PointPrompt, external_mask, grid_prompts, synthetic_mask
from .refine import (
    RefinementConfig,
    aggregate_affinity,
    intensity_affinity_baseline,
    pairwise_affinity,
    pseudo_label,
    random_walk,
    transition_matrix,
)
from .subclass import (
    build_subclass_labels,
    cluster_subclasses,
    compute_cam,
    extract_frozen_features,
    kmeans,
    run_probe,
    train_classifier,
)
from .synth import Dataset, Sample, SynthConfig, export_dataset, generate_dataset, import_dataset, split_dataset

__version__ = "0.1.0"
