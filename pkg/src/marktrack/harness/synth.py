"""Synthetic scene generation with exact ground truth.

Renders oriented capsules over a mildly textured static background and
writes the result as a frame directory, so the full pipeline can be
exercised end to end with known trajectories.  Everything is a pure
function of the seed: identical seeds give byte-identical frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..marks import UserMark
from ..media import write_manifest
from ..rng import stream
from ..trackdoc import TrackState


@dataclass
class GroundTruth:
    width: int
    height: int
    frame_count: int
    # target id -> frame -> (x, y, orientation, length, width)
    targets: dict[int, dict[int, tuple[float, float, float, float, float]]]

    def pose(self, target_id: int, frame: int):
        return self.targets[target_id].get(frame)

    def entry_exit(self, target_id: int) -> tuple[int, int]:
        frames = self.targets[target_id]
        return min(frames), max(frames)

    def total_positions(self) -> int:
        return sum(len(f) for f in self.targets.values())

    def body_length(self) -> float:
        lengths = [st[3] for frames in self.targets.values() for st in frames.values()]
        return float(np.median(lengths))

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "frame_count": self.frame_count,
            "targets": {
                str(tid): {str(f): list(pose) for f, pose in sorted(frames.items())}
                for tid, frames in sorted(self.targets.items())
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GroundTruth":
        return cls(
            width=int(doc["width"]), height=int(doc["height"]),
            frame_count=int(doc["frame_count"]),
            targets={int(tid): {int(f): tuple(p) for f, p in frames.items()}
                     for tid, frames in doc["targets"].items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class SceneSpec:
    targets: int = 5
    motion: str = "linear"        # linear | random-walk | crossing
    frames: int = 100
    width: int = 320
    height: int = 240
    body_length: float = 21.0
    body_width: float = 7.0
    intensity: float = 190.0
    noise: float = 2.0            # per-frame gaussian noise sigma
    speed: float = 0.6            # px/frame for linear motion
    seed: int = 0

    @classmethod
    def from_json(cls, doc: dict) -> "SceneSpec":
        return cls(**doc)


def _background(width: int, height: int, seed: int) -> np.ndarray:
    rng = stream(seed, "background")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=4)
    img = (40.0
           + 6.0 * np.sin(2 * np.pi * xx / 37.0 + phase[0])
           + 6.0 * np.sin(2 * np.pi * yy / 29.0 + phase[1])
           + 3.0 * np.sin(2 * np.pi * (xx + yy) / 53.0 + phase[2]))
    return img


def render_target_mask(width: int, height: int, pose) -> np.ndarray:
    """Pixels covered by a capsule pose (x, y, orientation, length, width)."""
    x, y, theta, length, body_w = pose
    half = max((length - body_w) / 2.0, 0.0)
    dx, dy = np.cos(theta) * half, np.sin(theta) * half
    ax, ay = x - dx, y - dy
    bx, by = x + dx, y + dy
    r = body_w / 2.0
    x0 = max(0, int(np.floor(min(ax, bx) - r - 1)))
    x1 = min(width - 1, int(np.ceil(max(ax, bx) + r + 1)))
    y0 = max(0, int(np.floor(min(ay, by) - r - 1)))
    y1 = min(height - 1, int(np.ceil(max(ay, by) + r + 1)))
    mask = np.zeros((height, width), dtype=bool)
    if x1 < x0 or y1 < y0:
        return mask
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom < 1e-12:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - ax) * abx + (ys - ay) * aby) / denom, 0.0, 1.0)
    d2 = (xs - (ax + t * abx)) ** 2 + (ys - (ay + t * aby)) ** 2
    mask[y0:y1 + 1, x0:x1 + 1] = d2 <= r * r
    return mask


def _render_frame(bg: np.ndarray, poses, intensity: float, noise: float,
                  rng: np.random.Generator) -> np.ndarray:
    h, w = bg.shape
    img = bg.copy()
    for pose in poses:
        img[render_target_mask(w, h, pose)] = intensity
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _linear_paths(spec: SceneSpec, rng: np.random.Generator):
    """Disjoint horizontal lanes; direction alternates, speed jitters per target."""
    n = spec.targets
    margin = spec.body_length
    lane_gap = (spec.height - 2 * margin) / max(n - 1, 1) if n > 1 else 0.0
    paths = {}
    for i in range(n):
        y = margin + i * lane_gap if n > 1 else spec.height / 2.0
        speed = spec.speed * float(rng.uniform(0.8, 1.2))
        direction = 1 if i % 2 == 0 else -1
        travel = speed * (spec.frames - 1)
        x0 = margin + float(rng.uniform(0, max(spec.width - 2 * margin - travel, 1)))
        if direction < 0:
            x0 = spec.width - x0
        theta = 0.0 if direction > 0 else np.pi
        frames = {}
        for t in range(1, spec.frames + 1):
            x = x0 + direction * speed * (t - 1)
            frames[t] = (x, y, theta, spec.body_length, spec.body_width)
        paths[i + 1] = frames
    return paths


def _random_walk_paths(spec: SceneSpec, rng: np.random.Generator):
    margin = spec.body_length
    paths = {}
    for i in range(spec.targets):
        x = float(rng.uniform(margin, spec.width - margin))
        y = float(rng.uniform(margin, spec.height - margin))
        heading = float(rng.uniform(0, 2 * np.pi))
        speed = spec.speed
        frames = {}
        for t in range(1, spec.frames + 1):
            frames[t] = (x, y, heading % np.pi, spec.body_length, spec.body_width)
            heading += float(rng.normal(0.0, 0.25))
            x += speed * np.cos(heading)
            y += speed * np.sin(heading)
            if not margin <= x <= spec.width - margin:
                heading = np.pi - heading
                x = float(np.clip(x, margin, spec.width - margin))
            if not margin <= y <= spec.height - margin:
                heading = -heading
                y = float(np.clip(y, margin, spec.height - margin))
        paths[i + 1] = frames
    return paths


def _crossing_paths(spec: SceneSpec, rng: np.random.Generator):
    """Two targets whose paths intersect at the midpoint frame, at right angles."""
    cx, cy = spec.width / 2.0, spec.height / 2.0
    mid = (spec.frames + 1) // 2
    speed = spec.speed
    paths = {}
    for tid, heading in ((1, 0.0), (2, np.pi / 2.0)):
        dxu, dyu = np.cos(heading), np.sin(heading)
        frames = {}
        for t in range(1, spec.frames + 1):
            s = speed * (t - mid)
            frames[t] = (cx + s * dxu, cy + s * dyu, heading % np.pi,
                         spec.body_length, spec.body_width)
        paths[tid] = frames
    extra = SceneSpec(**{**spec.__dict__, "targets": spec.targets - 2})
    if spec.targets > 2:
        for tid, frames in _linear_paths(extra, rng).items():
            paths[tid + 2] = frames
    return paths


_MOTIONS = {
    "linear": _linear_paths,
    "random-walk": _random_walk_paths,
    "crossing": _crossing_paths,
}


def build_ground_truth(spec: SceneSpec) -> GroundTruth:
    if spec.motion not in _MOTIONS:
        raise ValueError(f"unknown motion model {spec.motion!r}")
    rng = stream(spec.seed, "paths", spec.motion)
    paths = _MOTIONS[spec.motion](spec, rng)
    # drop out-of-frame poses: a target that leaves the scene has exited
    margin = 1.0
    targets = {}
    for tid, frames in paths.items():
        kept = {}
        for t in sorted(frames):
            x, y = frames[t][0], frames[t][1]
            if margin <= x <= spec.width - margin and margin <= y <= spec.height - margin:
                if kept and t != max(kept) + 1:
                    break  # keep the first contiguous visible stretch
                kept[t] = frames[t]
            elif kept:
                break
        if kept:
            targets[tid] = kept
    return GroundTruth(spec.width, spec.height, spec.frames, targets)


def generate_scene(out_dir: str | Path, spec: SceneSpec) -> tuple[Path, GroundTruth]:
    """Write the frames, manifest, and ground truth for a scene spec."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt = build_ground_truth(spec)
    bg = _background(spec.width, spec.height, spec.seed)
    for t in range(1, spec.frames + 1):
        poses = [frames[t] for frames in gt.targets.values() if t in frames]
        rng = stream(spec.seed, "noise", t)
        frame = _render_frame(bg, poses, spec.intensity, spec.noise, rng)
        Image.fromarray(frame).save(out_dir / f"frame_{t:06d}.png")
    manifest = write_manifest(out_dir, spec.frames, spec.width, spec.height, "gray")
    gt.save(out_dir / "gt.json")
    return manifest, gt


def make_marks(gt: GroundTruth, frames: list[int]) -> list[UserMark]:
    """Marks a user would draw on the given frames, straight from the truth.

    The three clicks span the capsule's spine (total extent minus the round
    caps), so the rasterized mark reproduces the rendered target region.
    """
    out = []
    for f in frames:
        for tid in sorted(gt.targets):
            pose = gt.targets[tid].get(f)
            if pose is None:
                continue
            x, y, theta, length, width = pose
            half = max((length - width) / 2.0, 1.0)
            dx, dy = np.cos(theta) * half, np.sin(theta) * half
            out.append(UserMark(frame=f, p1=(x - dx, y - dy), p2=(x, y),
                                p3=(x + dx, y + dy), brush_size=width))
    return out


def gt_states(gt: GroundTruth, target_id: int) -> dict[int, TrackState]:
    """Ground-truth poses of one target as track states (for fixtures)."""
    return {
        f: TrackState(frame=f, x=p[0], y=p[1], orientation=p[2],
                      length=p[3], width=p[4], confidence=1.0)
        for f, p in gt.targets[target_id].items()
    }
