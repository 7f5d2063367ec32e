"""Foreground estimation: background subtraction plus tuned refinement.

The camera is static, so the background is a per-pixel temporal median.
The subtraction threshold is picked to best reproduce the user marks, and
the four refinement parameters (pre-filter area, majority repetitions,
closing radius, post-filter area) are tuned by particle swarm optimization
against a segmentation loss computed on the marked frames only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import DEFAULT_CONFIG, EngineConfig
from .errors import MarkTrackError
from .marks import MarkedFrame, rasterize_mark
from .media import FrameSequence
from .rng import stream

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class BackgroundModel:
    image: np.ndarray          # float64 gray, same dims as frames
    fg_threshold: int = 0      # intensity difference in [1, 255]


@dataclass
class RefineParams:
    area_pre: int = 0
    majority_reps: int = 0
    close_size: int = 0
    area_post: int = 0

    def __post_init__(self):
        if min(self.area_pre, self.majority_reps, self.close_size, self.area_post) < 0:
            raise MarkTrackError("refine parameters must be >= 0")


@dataclass
class FgLossBreakdown:
    correct: int
    over_seg: int
    under_seg: int
    incorrect: int
    loss: float


def build_background(seq: FrameSequence, sample_count: int = DEFAULT_CONFIG.background_samples) -> np.ndarray:
    """Per-pixel temporal median over evenly spaced frames."""
    if sample_count < 3:
        raise MarkTrackError("sample_count must be >= 3")
    idx = np.unique(np.linspace(1, seq.frame_count, sample_count).round().astype(int))
    stack = np.stack([seq.gray_frame(int(t)) for t in idx])
    return np.median(stack, axis=0)


def subtract(frame_gray: np.ndarray, model: BackgroundModel) -> np.ndarray:
    """Foreground = pixels whose luma differs from the background by more than the threshold."""
    if frame_gray.shape != model.image.shape:
        raise MarkTrackError("frame/background dimension mismatch")
    return np.abs(frame_gray - model.image) > model.fg_threshold


def mark_masks(mf: MarkedFrame, width: int, height: int) -> list[np.ndarray]:
    return [rasterize_mark(m, width, height)[0] for m in mf.marks]


def tune_threshold(marked_frames: list[MarkedFrame], background: np.ndarray,
                   seq: FrameSequence) -> int:
    """Threshold in [1, 255] maximizing F1 against the mark union; ties go high.

    Exhaustive over all 255 candidates via sorted difference values, so the
    scan itself is the specification.
    """
    frames = [mf for mf in marked_frames if mf.marks]
    if not frames:
        raise MarkTrackError("need at least one marked frame with marks")
    h, w = background.shape
    diffs_in, diffs_out = [], []
    for mf in frames:
        union = np.zeros((h, w), dtype=bool)
        for mm in mark_masks(mf, w, h):
            union |= mm
        diff = np.abs(seq.gray_frame(mf.frame) - background)
        diffs_in.append(diff[union])
        diffs_out.append(diff[~union])
    d_in = np.sort(np.concatenate(diffs_in))
    d_out = np.sort(np.concatenate(diffs_out))
    n_in = len(d_in)
    best_t, best_f1 = 1, -1.0
    for t in range(1, 256):
        tp = n_in - np.searchsorted(d_in, t, side="right")
        fp = len(d_out) - np.searchsorted(d_out, t, side="right")
        fn = n_in - tp
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        if f1 >= best_f1:
            best_f1, best_t = f1, t
    return best_t


def _drop_small(mask: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 0 or not mask.any():
        return mask
    labels, n = ndimage.label(mask, structure=FOUR_CONN)
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def _majority(mask: np.ndarray, reps: int) -> np.ndarray:
    for _ in range(reps):
        counts = ndimage.convolve(mask.astype(np.uint8), np.ones((3, 3), dtype=np.uint8),
                                  mode="constant", cval=0)
        mask = counts >= 5
    return mask


def _disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def _closing(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask
    # pad so the closing is evaluated on the infinite plane, not the window
    pad = int(radius)
    canvas = np.pad(mask, pad, mode="constant", constant_values=False)
    disc = _disc(radius)
    out = ndimage.binary_erosion(ndimage.binary_dilation(canvas, structure=disc),
                                 structure=disc, border_value=0)
    return out[pad:-pad, pad:-pad]


def refine(mask: np.ndarray, p: RefineParams) -> np.ndarray:
    """Area filter, repeated majority vote, disc closing, final area filter."""
    out = _drop_small(mask.astype(bool), p.area_pre)
    out = _majority(out, p.majority_reps)
    out = _closing(out, p.close_size)
    return _drop_small(out, p.area_post)


def fg_loss(refined: np.ndarray, mf: MarkedFrame,
            cfg: EngineConfig = DEFAULT_CONFIG,
            _masks: list[np.ndarray] | None = None) -> FgLossBreakdown:
    """Segmentation quality of a refined mask against one marked frame.

    Each refined component is classified by how many marks it touches:
    exactly one (its overlapping pixels are correct, the rest spill-over),
    two or more (the whole component merges targets), none (noise).  Mark
    pixels nothing covers count as missed foreground.
    """
    h, w = refined.shape
    masks = _masks if _masks is not None else mark_masks(mf, w, h)
    if _masks is None and not masks:
        raise MarkTrackError("marked frame has no marks")
    union = np.zeros((h, w), dtype=bool)
    for mm in masks:
        union |= mm
    labels, n = ndimage.label(refined, structure=FOUR_CONN)
    correct = over = under = incorrect = 0
    for comp_id in range(1, n + 1):
        comp = labels == comp_id
        area = int(comp.sum())
        touched = sum(1 for mm in masks if (comp & mm).any())
        if touched == 0:
            incorrect += area
        elif touched == 1:
            inside = int((comp & union).sum())
            correct += inside
            over += area - inside
        else:
            under += area
    missed = int((union & ~refined.astype(bool)).sum())
    under += missed
    total = int(union.sum())
    loss = (cfg.loss_w_over * over + cfg.loss_w_under * under
            + cfg.loss_w_incorrect * incorrect - cfg.loss_w_correct * correct)
    loss /= max(total, 1)
    return FgLossBreakdown(correct, over, under, incorrect, loss)


@dataclass
class PsoResult:
    params: RefineParams
    loss: float
    best_history: list[float] = field(default_factory=list)


def _to_refine_params(vec: np.ndarray) -> RefineParams:
    return RefineParams(area_pre=int(round(vec[0])), majority_reps=int(round(vec[1])),
                        close_size=int(round(vec[2])), area_post=int(round(vec[3])))


def pso_tune(marked_frames: list[MarkedFrame], model: BackgroundModel, seq: FrameSequence,
             area_max: float, body_length: float, seed: int = 0,
             cfg: EngineConfig = DEFAULT_CONFIG) -> PsoResult:
    """Swarm-search the four refinement parameters against the mark loss.

    The identity setting (0,0,0,0) is force-included in the initial swarm,
    so tuning can never end up worse than no refinement.  Deterministic for
    a fixed seed; the per-iteration global best is recorded and must be
    non-increasing.
    """
    frames = [mf for mf in marked_frames if mf.marks]
    if not frames:
        raise MarkTrackError("need at least one marked frame with marks")
    h, w = model.image.shape
    raw = [subtract(seq.gray_frame(mf.frame), model) for mf in frames]
    per_frame_masks = [mark_masks(mf, w, h) for mf in frames]

    def objective(vec: np.ndarray) -> float:
        p = _to_refine_params(vec)
        losses = [fg_loss(refine(raw[i], p), frames[i], cfg, _masks=per_frame_masks[i]).loss
                  for i in range(len(frames))]
        return float(np.mean(losses))

    lo = np.zeros(4)
    hi = np.array([cfg.refine_area_box_factor * area_max, cfg.refine_majority_max,
                   max(1.0, body_length / 2.0), cfg.refine_area_box_factor * area_max])
    rng = stream(seed, "pso")
    n = cfg.pso_particles
    pos = lo + rng.random((n, 4)) * (hi - lo)
    pos[0] = 0.0  # identity seed
    vel = (rng.random((n, 4)) - 0.5) * (hi - lo) * 0.2
    pbest = pos.copy()
    pbest_loss = np.array([objective(p) for p in pos])
    g_idx = int(np.argmin(pbest_loss))
    gbest, gbest_loss = pbest[g_idx].copy(), float(pbest_loss[g_idx])
    history = [gbest_loss]

    for _ in range(cfg.pso_iterations):
        r1 = rng.random((n, 4))
        r2 = rng.random((n, 4))
        vel = (cfg.pso_inertia * vel
               + cfg.pso_cognitive * r1 * (pbest - pos)
               + cfg.pso_social * r2 * (gbest - pos))
        vmax = (hi - lo) * 0.5
        vel = np.clip(vel, -vmax, vmax)
        pos = np.clip(pos + vel, lo, hi)
        losses = np.array([objective(p) for p in pos])
        improved = losses < pbest_loss
        pbest[improved] = pos[improved]
        pbest_loss[improved] = losses[improved]
        g_idx = int(np.argmin(pbest_loss))
        if pbest_loss[g_idx] < gbest_loss:
            gbest, gbest_loss = pbest[g_idx].copy(), float(pbest_loss[g_idx])
        history.append(gbest_loss)

    return PsoResult(_to_refine_params(gbest), gbest_loss, history)
