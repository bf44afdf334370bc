"""Synthetic BEV detection with cross-modal knowledge distillation.

The heavy lifting lives in the C++ core; this package re-exports the bound
operations: scene simulation, BEV grid utilities, distillation losses,
nuScenes-style metrics, and the staged training pipeline.
"""

from ._core import (  # noqa: F401
    BevGridSpec,
    BevkdError,
    BoxLabel,
    ExperimentConfig,
    Scene,
    WorldSpec,
    box_footprint,
    evaluate,
    foreground_mask,
    gt_heatmap,
    load_dataset,
    make_dataset,
    map_to_bev,
    masked_feature_loss,
    response_loss,
    run_ablation_matrix,
    run_stage_labelenc,
    run_stage_student,
    run_stage_teacher,
    serialize_dataset,
    total_loss,
)

__version__ = "0.1.0"
