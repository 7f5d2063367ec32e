from .synth import (GroundTruth, SceneSpec, build_ground_truth, generate_scene,
                    gt_states, make_marks, render_target_mask)
from .metrics import MetricsReport, estimate_cost, evaluate, format_report

__all__ = [
    "GroundTruth", "SceneSpec", "build_ground_truth", "generate_scene",
    "gt_states", "make_marks", "render_target_mask",
    "MetricsReport", "estimate_cost", "evaluate", "format_report",
]
