"""Engine configuration: every tuned constant lives in this one table.

Values that the marking phase derives per video (area gates, landing
distance, join thresholds, ...) are in ``marks.DerivedParams``; this module
holds the fixed knobs those derivations and the downstream stages use.
Tests and the CLI ``--config`` flag override fields here rather than
patching magic numbers scattered through the code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class EngineConfig:
    # -- marking ----------------------------------------------------------
    min_total_marks: int = 30          # keep requesting frames until this many marks
    area_slack_low: float = 0.5        # area_min = low * smallest mark area
    area_slack_high: float = 2.0       # area_max = high * largest mark area
    ratio_slack_low: float = 0.5
    ratio_slack_high: float = 2.0
    land_dist_factor: float = 0.5      # landing threshold = factor * median body length
    join_dist_factor: float = 0.5      # join distance gate, same derivation
    join_overlap_min: int = 2          # keyframes overlapping the join candidate must exceed this
    motion_sigma_factor: float = 0.25  # pre-tracklet estimate of per-frame displacement std

    # -- foreground -------------------------------------------------------
    background_samples: int = 21
    loss_w_correct: float = 1.0
    loss_w_over: float = 0.5
    loss_w_under: float = 1.0
    loss_w_incorrect: float = 1.0
    pso_particles: int = 30
    pso_iterations: int = 50
    pso_inertia: float = 0.72
    pso_cognitive: float = 1.49
    pso_social: float = 1.49
    refine_area_box_factor: float = 4.0  # search box upper bound = factor * area_max
    refine_majority_max: int = 5

    # -- detection --------------------------------------------------------
    small_target_area: float = 50.0    # below this mean mark area the classifier is bypassed
    patch_width: int = 32              # classifier patch, across the body axis
    patch_height: int = 64             # classifier patch, along the body axis
    hog_cell: int = 8
    hog_bins: int = 9
    svm_c: float = 1.0
    min_train_examples: int = 8

    # -- tracklet building ------------------------------------------------
    lane_majority: float = 0.5         # strictly-greater fraction of mapped blobs required
    forest_trees: int = 100
    forest_depth: int = 12
    confidence_min_states: int = 50
    confidence_keep: float = 0.5       # tracklets below this mean confidence are dropped
    negative_offset_low: float = 0.5   # negatives displaced by U[low, high] * body length
    negative_offset_high: float = 1.5
    negative_angle_low: float = 30.0   # degrees, random sign
    negative_angle_high: float = 90.0

    # -- tracklet matching --------------------------------------------------
    ga_population: int = 50
    ga_cycles: int = 20
    ga_crossover: float = 0.7
    ga_elitism: int = 1
    ga_literal_blend: bool = True      # complement-weighted population mean (see matching)
    ga_orient_sigma: float = 0.2       # radians, mutation noise on orientation
    match_iterations: int = 3
    prune_slack: int = 2               # allowed actives beyond the scene capacity
    delta_samples_per_tracklet: int = 10
    delta_sigma_floor: float = 1.0     # intensity levels; keeps the fitness CDF non-degenerate
    template_count: int = 3
    appearance_patch_width: int = 12   # patch used for template differencing
    appearance_patch_height: int = 24

    # -- chunking -----------------------------------------------------------
    chunk_trigger: int = 7000
    chunk_ideal: int = 5000
    chunk_min: int = 300

    # -- correction ---------------------------------------------------------
    review_lookback: int = 45          # review may start this many frames before the error
    keyframe_step: int = 15
    lookahead_keyframes: int = 3
    requeue_keyframes: int = 3
    connection_window: int = 15        # confidence averaged over +/- this around a join
    review_threshold_start: float = 0.6
    review_threshold_step: float = 0.1
    engulf_factor: float = 2.0         # engulfed-track distance gate = factor * join distance
    pf_base_particles: int = 200
    pf_attempts: int = 4
    annotation_confidence: float = 1.0  # confidence assigned to user-annotated states

    # -- evaluation harness ---------------------------------------------------
    ids_window: int = 30               # frames allowed for an identity to revert
    mostly_tracked: float = 0.8
    mostly_lost: float = 0.2
    annotation_seconds: float = 1.5
    switch_seconds: float = 2.0

    def override(self, **kwargs) -> "EngineConfig":
        return replace(self, **kwargs)

    @classmethod
    def from_json(cls, path: str | Path) -> "EngineConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


DEFAULT_CONFIG = EngineConfig()
