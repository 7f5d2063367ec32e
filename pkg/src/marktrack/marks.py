"""User marks: the sole source of every tuned tracking parameter.

A mark is three clicks (head, middle, tail or the reverse) plus a brush
size; a quadratic Bezier is fit through the clicks with the middle click as
the on-curve midpoint, and the brush sweeps that spline into a pixel
region.  ``derive_params`` turns a handful of marked frames into all gates
and thresholds the tracking and correction stages consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .config import DEFAULT_CONFIG, EngineConfig
from .errors import DegenerateMarkError, MarkTrackError

RASTER_EPS = 1e-9  # membership slack: pixel is inside at distance <= r + eps


@dataclass(frozen=True)
class UserMark:
    frame: int
    p1: tuple[float, float]
    p2: tuple[float, float]
    p3: tuple[float, float]
    brush_size: float

    def points(self) -> np.ndarray:
        return np.array([self.p1, self.p2, self.p3], dtype=np.float64)


@dataclass
class MarkedFrame:
    frame: int
    marks: list[UserMark]

    def __post_init__(self):
        for m in self.marks:
            if m.frame != self.frame:
                raise MarkTrackError(f"mark for frame {m.frame} in MarkedFrame {self.frame}")


@dataclass
class MarkPose:
    center: tuple[float, float]
    orientation: float  # radians, direction p1 -> p3
    length: float       # spline arc length
    width: float        # brush size


@dataclass
class DerivedParams:
    """Everything downstream stages need, derived from the marks.

    ``fg_threshold`` is filled in by the foreground stage after tuning;
    ``motion_sigma`` starts as a mark-based estimate and is replaced by
    tracklet statistics once an initial tracklet set exists.
    """

    area_min: float
    area_max: float
    ratio_min: float
    ratio_max: float
    max_targets: int            # upper bound on simultaneous targets in the scene
    land_dist: float            # tracker-landing distance threshold
    join_dist: float            # review join: max mean annotation distance
    join_margin: float          # review join: required margin over the runner-up
    join_overlap_min: int       # review join: overlapping keyframes must exceed this
    motion_sigma: float         # per-frame displacement std, pixels
    body_length: float          # median mark spline length
    mark_area_mean: float       # mean rasterized mark area, drives the small-target bypass
    fg_threshold: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "DerivedParams":
        return cls(**doc)


# ---------------------------------------------------------------------------
# mark-frame scheduling


def schedule_mark_frames(frame_count: int, chunk_bounds: list[int] | tuple[int, ...] = (),
                         targets_per_frame_estimate: int = 1,
                         cfg: EngineConfig = DEFAULT_CONFIG) -> list[int]:
    """Frames the user must mark.

    Always the first and last frame plus every chunk-overlap frame; interior
    frames are appended, evenly spaced, until the expected mark count
    (frames scheduled times targets per frame) reaches ``min_total_marks``.
    """
    if frame_count < 2:
        raise MarkTrackError("need at least 2 frames")
    estimate = max(1, int(targets_per_frame_estimate))
    base = {1, frame_count} | {int(b) for b in chunk_bounds}
    base = {f for f in base if 1 <= f <= frame_count}
    schedule = sorted(base)
    k = 0
    while len(schedule) * estimate < cfg.min_total_marks and len(schedule) < frame_count:
        k += 1
        interior = [round(1 + i * (frame_count - 1) / (k + 1)) for i in range(1, k + 1)]
        schedule = sorted(base | set(interior))
    return schedule


def estimate_targets_per_frame(marked_frames: list[MarkedFrame], fallback: int = 1) -> int:
    """Scheduling estimate: mark count of the earliest marked frame.

    The schedule is recomputed as marks arrive, so before any exist the
    caller-provided fallback is used.
    """
    with_marks = [mf for mf in marked_frames if mf.marks]
    if not with_marks:
        return fallback
    return len(min(with_marks, key=lambda mf: mf.frame).marks)


# ---------------------------------------------------------------------------
# spline rasterization


def _bezier_coeffs(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coefficients of B(t) = a t^2 + b t + p0 through the three clicks.

    The middle click is the on-curve midpoint, so the control point is
    2*p2 - (p1 + p3)/2.
    """
    p0, pm, p2 = points
    ctrl = 2.0 * pm - 0.5 * (p0 + p2)
    a = p0 - 2.0 * ctrl + p2
    b = 2.0 * (ctrl - p0)
    return a, b, p0


def spline_points(mark: UserMark, n: int = 257) -> np.ndarray:
    a, b, p0 = _bezier_coeffs(mark.points())
    t = np.linspace(0.0, 1.0, n)[:, None]
    return a * t * t + b * t + p0


def spline_length(mark: UserMark) -> float:
    """Arc length of the mark spline via Gauss-Legendre quadrature."""
    a, b, _ = _bezier_coeffs(mark.points())
    nodes, weights = np.polynomial.legendre.leggauss(64)
    t = 0.5 * (nodes + 1.0)
    speed = np.linalg.norm(2.0 * a[None, :] * t[:, None] + b[None, :], axis=1)
    return float(0.5 * np.sum(weights * speed))


def _min_dist_to_spline(qx: np.ndarray, qy: np.ndarray, mark: UserMark) -> np.ndarray:
    """Exact distance from each query point to the mark spline.

    Seeds Newton's method on the quartic |B(t)-q|^2 from the nearest of a
    dense parameter sample, then compares against both endpoints.
    """
    a, b, p0 = _bezier_coeffs(mark.points())
    q = np.stack([qx, qy], axis=-1).reshape(-1, 2)
    ts = np.linspace(0.0, 1.0, 65)
    curve = a * ts[:, None] ** 2 + b * ts[:, None] + p0
    d2 = ((q[:, None, :] - curve[None, :, :]) ** 2).sum(axis=2)
    t = ts[np.argmin(d2, axis=1)]

    # f(t) = 0.5 d/dt |B(t)-q|^2 ; Newton with clamping to [0, 1]
    aa = float(a @ a)
    ab = float(a @ b)
    bb = float(b @ b)
    for _ in range(25):
        c = p0 - q
        ac = c @ a
        bc = c @ b
        f = 2.0 * aa * t ** 3 + 3.0 * ab * t ** 2 + (bb + 2.0 * ac) * t + bc
        fp = 6.0 * aa * t ** 2 + 6.0 * ab * t + (bb + 2.0 * ac)
        step = np.where(np.abs(fp) > 1e-12, f / np.where(np.abs(fp) > 1e-12, fp, 1.0), 0.0)
        t = np.clip(t - step, 0.0, 1.0)

    best = a * t[:, None] ** 2 + b * t[:, None] + p0
    dist = np.linalg.norm(q - best, axis=1)
    for tc in (0.0, 1.0):
        pt = a * tc * tc + b * tc + p0
        dist = np.minimum(dist, np.linalg.norm(q - pt, axis=1))
    return dist.reshape(qx.shape)


def rasterize_mark(mark: UserMark, width: int, height: int) -> tuple[np.ndarray, MarkPose]:
    """Pixel region swept by the brush along the mark spline, plus its pose.

    A pixel belongs to the mask when its center lies within brush_size/2 of
    the spline.  Pose: centroid of the mask, orientation of p1 -> p3, arc
    length, and the brush width.
    """
    pts = mark.points()
    if np.allclose(pts[0], pts[1]) and np.allclose(pts[1], pts[2]):
        raise DegenerateMarkError(f"mark on frame {mark.frame} has coincident points")
    if mark.brush_size < 1:
        raise MarkTrackError("brush_size must be >= 1")
    r = mark.brush_size / 2.0
    # restrict work to the spline bounding box padded by the brush radius
    sample = spline_points(mark, 65)
    x0 = max(0, int(np.floor(sample[:, 0].min() - r - 1)))
    x1 = min(width - 1, int(np.ceil(sample[:, 0].max() + r + 1)))
    y0 = max(0, int(np.floor(sample[:, 1].min() - r - 1)))
    y1 = min(height - 1, int(np.ceil(sample[:, 1].max() + r + 1)))
    mask = np.zeros((height, width), dtype=bool)
    if x1 >= x0 and y1 >= y0:
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dist = _min_dist_to_spline(xs.astype(np.float64), ys.astype(np.float64), mark)
        mask[y0:y1 + 1, x0:x1 + 1] = dist <= r + RASTER_EPS

    if mask.any():
        yy, xx = np.nonzero(mask)
        center = (float(xx.mean()), float(yy.mean()))
    else:  # brush so thin no pixel center is covered; fall back to the curve midpoint
        mid = spline_points(mark, 3)[1]
        center = (float(mid[0]), float(mid[1]))
    d = pts[2] - pts[0]
    if np.allclose(d, 0.0):
        d = pts[1] - pts[0]
    pose = MarkPose(center=center,
                    orientation=float(np.arctan2(d[1], d[0])),
                    length=spline_length(mark),
                    width=float(mark.brush_size))
    return mask, pose


# ---------------------------------------------------------------------------
# parameter derivation


def derive_params(marked_frames: list[MarkedFrame], width: int, height: int,
                  cfg: EngineConfig = DEFAULT_CONFIG) -> DerivedParams:
    """All tuned parameters from the marks; permutation-invariant."""
    frames = [mf for mf in marked_frames if mf.marks]
    all_marks = [m for mf in frames for m in mf.marks]
    if len(frames) < 2 or not all_marks:
        raise MarkTrackError("need at least 2 marked frames and 1 mark")

    areas, ratios, lengths = [], [], []
    for m in all_marks:
        mask, pose = rasterize_mark(m, width, height)
        areas.append(float(mask.sum()))
        lengths.append(pose.length)
        ratios.append(pose.length / pose.width)
    body_length = float(np.median(lengths))
    land_dist = cfg.land_dist_factor * body_length
    join_dist = cfg.join_dist_factor * body_length
    return DerivedParams(
        area_min=cfg.area_slack_low * min(areas),
        area_max=cfg.area_slack_high * max(areas),
        ratio_min=cfg.ratio_slack_low * min(ratios),
        ratio_max=cfg.ratio_slack_high * max(ratios),
        max_targets=max(len(mf.marks) for mf in frames),
        land_dist=land_dist,
        join_dist=join_dist,
        join_margin=join_dist,
        join_overlap_min=cfg.join_overlap_min,
        motion_sigma=cfg.motion_sigma_factor * body_length,
        body_length=body_length,
        mark_area_mean=float(np.mean(areas)),
    )


# ---------------------------------------------------------------------------
# persistence

MARKS_VERSION = 1


def save_marks(path: str | Path, marks: list[UserMark]) -> None:
    doc = {
        "version": MARKS_VERSION,
        "marks": [
            {"frame": m.frame, "p1": list(m.p1), "p2": list(m.p2),
             "p3": list(m.p3), "brush_size": m.brush_size}
            for m in marks
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_marks(path: str | Path) -> list[UserMark]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MARKS_VERSION:
        raise MarkTrackError(f"unsupported marks version {doc.get('version')}")
    return [
        UserMark(frame=int(m["frame"]), p1=tuple(m["p1"]), p2=tuple(m["p2"]),
                 p3=tuple(m["p3"]), brush_size=float(m["brush_size"]))
        for m in doc["marks"]
    ]


def group_marks(marks: list[UserMark]) -> list[MarkedFrame]:
    """Marks grouped into MarkedFrames, ordered by frame."""
    by_frame: dict[int, list[UserMark]] = {}
    for m in marks:
        by_frame.setdefault(m.frame, []).append(m)
    return [MarkedFrame(f, by_frame[f]) for f in sorted(by_frame)]
