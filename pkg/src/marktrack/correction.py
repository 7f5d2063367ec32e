"""Guided reviews, review-answer inference, and the manual operation set.

A review asks the user to follow one track from a confident starting frame
and annotate pose at periodic keyframes.  Inference on the answers breaks
any association the annotations span, writes the annotated poses in, fills
the gaps with agreeing forward/backward particle filters, and joins the
reviewed track onto a following fragment only when four independent checks
all pass.  Manual mode is the opposite philosophy: five operations with
exactly predictable outcomes and exact inverses for undo.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .appearance import (DeltaStats, extract_patch, delta_to_templates,
                         fitness_from_delta, sample_patches)
from .config import DEFAULT_CONFIG, EngineConfig
from .errors import MarkTrackError, OperationError
from .marks import DerivedParams
from .rng import stream
from .trackdoc import Connection, TrackDocument, Tracklet, TrackState, lerp_states


@dataclass
class Review:
    id: int
    kind: str                 # "fragment" | "connection"
    tracklet_id: int
    start_frame: int
    keyframes: list[int]
    priority: float
    status: str = "open"      # open | answered | requeued

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "tracklet_id": self.tracklet_id,
                "start_frame": self.start_frame, "keyframes": self.keyframes,
                "priority": self.priority, "status": self.status}


@dataclass
class KeyframeAnnotation:
    frame: int
    x: float = 0.0
    y: float = 0.0
    orientation: float = 0.0
    special: str = "none"     # none | target_exited | remove_track

    def to_json(self) -> dict:
        return {"frame": self.frame, "x": self.x, "y": self.y,
                "orientation": self.orientation, "special": self.special}

    @classmethod
    def from_json(cls, doc: dict) -> "KeyframeAnnotation":
        return cls(frame=int(doc["frame"]), x=float(doc.get("x", 0.0)),
                   y=float(doc.get("y", 0.0)), orientation=float(doc.get("orientation", 0.0)),
                   special=str(doc.get("special", "none")))


@dataclass
class ManualOp:
    kind: str                 # Add | Remove | Join | Break | Adjust | Restore
    payload: dict

    def to_json(self) -> dict:
        return {"kind": self.kind, "payload": self.payload}

    @classmethod
    def from_json(cls, doc: dict) -> "ManualOp":
        return cls(kind=str(doc["kind"]), payload=dict(doc["payload"]))


@dataclass
class ReviewOutcome:
    outcome: str              # joined | requeued | exited | removed | standalone
    joined_id: int | None = None
    broken_connections: int = 0
    next_keyframes: list[int] = field(default_factory=list)


@dataclass
class CorrectionContext:
    """Everything review inference needs beyond the document itself."""
    seq: object | None = None           # FrameSequence
    params: DerivedParams | None = None
    stats: DeltaStats | None = None
    video_length: int = 0
    seed: int = 0
    cfg: EngineConfig = field(default_factory=lambda: DEFAULT_CONFIG)


# ---------------------------------------------------------------------------
# review creation


def _pick_start(tracklet: Tracklet, error_point: int, lookback: int) -> int:
    window = [f for f in tracklet.frames() if error_point - lookback <= f <= error_point]
    if not window:
        window = [error_point]
    return max(window, key=lambda f: (tracklet.states[f].confidence, f))


def _keyframes(r_start: int, error_point: int, video_length: int,
               cfg: EngineConfig) -> list[int]:
    """Every keyframe_step frames from the start to the error point, then
    lookahead_keyframes more beyond it, clamped to the video end."""
    out: list[int] = []
    k = r_start + cfg.keyframe_step
    while k <= error_point:
        out.append(k)
        k += cfg.keyframe_step
    for _ in range(cfg.lookahead_keyframes):
        out.append(min(k, video_length))
        k += cfg.keyframe_step
    dedup = sorted(set(f for f in out if f <= video_length))
    return dedup


def review_threshold(doc: TrackDocument, cfg: EngineConfig = DEFAULT_CONFIG) -> float:
    return float(doc.meta.get("review_threshold", cfg.review_threshold_start))


def create_reviews(doc: TrackDocument, video_length: int,
                   cfg: EngineConfig = DEFAULT_CONFIG) -> list[Review]:
    """Fresh, fully ordered review list for the current document.

    Fragment reviews (tracks that end early) are found with perfect recall
    and always outrank connection reviews; connection reviews surface only
    while the confidence around their join is below the moving threshold,
    most suspicious first.
    """
    threshold = review_threshold(doc, cfg)
    fragments: list[Review] = []
    connections: list[Review] = []
    for tid in sorted(doc.tracklets):
        t = doc.tracklets[tid]
        if t.last_frame < video_length and not t.complete and not t.exited:
            r_start = _pick_start(t, t.last_frame, cfg.review_lookback)
            fragments.append(Review(
                id=0, kind="fragment", tracklet_id=tid, start_frame=r_start,
                keyframes=_keyframes(r_start, t.last_frame, video_length, cfg),
                priority=0.0))
        for conn in t.connections:
            window = [f for f in t.frames()
                      if abs(f - conn.frame) <= cfg.connection_window]
            if not window:
                continue
            region_conf = float(np.mean([t.states[f].confidence for f in window]))
            if region_conf >= threshold:
                continue
            r_start = _pick_start(t, conn.frame, cfg.review_lookback)
            connections.append(Review(
                id=0, kind="connection", tracklet_id=tid, start_frame=r_start,
                keyframes=_keyframes(r_start, conn.frame, video_length, cfg),
                priority=1.0 - region_conf))

    fragments.sort(key=lambda r: (r.start_frame, r.tracklet_id))
    connections.sort(key=lambda r: (-r.priority, r.start_frame, r.tracklet_id))
    # fragment priorities sit strictly above every connection priority
    top = (connections[0].priority if connections else 0.0) + 1.0
    for i, r in enumerate(fragments):
        r.priority = top + 1.0 / (1.0 + i)
    ordered = fragments + connections
    for i, r in enumerate(ordered, start=1):
        r.id = i
    return ordered


# ---------------------------------------------------------------------------
# gap interpolation


def _linear_fill(pose_a: TrackState, pose_b: TrackState) -> list[TrackState]:
    return [lerp_states(pose_a, pose_b, f) for f in range(pose_a.frame + 1, pose_b.frame)]


def _run_particle_filter(ctx: CorrectionContext, start: TrackState, goal: TrackState,
                         n_particles: int, rng: np.random.Generator) -> dict[int, tuple]:
    """Single-target filter from ``start`` towards ``goal``'s frame.

    Returns frame -> (x, y, orientation) estimates for every frame strictly
    between plus the goal frame itself (used for the landing check).
    Works for either direction: frames are stepped from start to goal.
    """
    cfg = ctx.cfg
    sigma = ctx.params.motion_sigma
    h_patch, w_patch = cfg.appearance_patch_height, cfg.appearance_patch_width
    gray0 = ctx.seq.gray_frame(start.frame)
    template = extract_patch(gray0, start, h_patch, w_patch)[None]
    step = 1 if goal.frame > start.frame else -1
    parts = np.tile(np.array([[start.x, start.y, start.orientation]]), (n_particles, 1))
    estimates: dict[int, tuple] = {}
    width, height = ctx.seq.width, ctx.seq.height
    for f in range(start.frame + step, goal.frame + step, step):
        parts = parts.copy()
        parts[:, 0] += rng.normal(0.0, sigma, n_particles)
        parts[:, 1] += rng.normal(0.0, sigma, n_particles)
        parts[:, 2] += rng.normal(0.0, cfg.ga_orient_sigma, n_particles)
        gray = ctx.seq.gray_frame(f)
        patches = sample_patches(gray, parts, start.length, start.width, h_patch, w_patch)
        delta = delta_to_templates(patches, template)
        fit = fitness_from_delta(delta, ctx.stats)
        oob = (parts[:, 0] < 0) | (parts[:, 0] >= width) | \
              (parts[:, 1] < 0) | (parts[:, 1] >= height)
        fit = np.where(oob, 0.0, fit)
        total = fit.sum()
        weights = fit / total if total > 1e-12 else np.full(n_particles, 1.0 / n_particles)
        mean_xy = weights @ parts[:, :2]
        ang = np.angle(weights @ np.exp(2j * parts[:, 2])) / 2.0
        estimates[f] = (float(mean_xy[0]), float(mean_xy[1]), float(ang))
        # systematic resampling keeps the filter deterministic per seed
        positions = (rng.random() + np.arange(n_particles)) / n_particles
        idx = np.searchsorted(np.cumsum(weights), positions)
        parts = parts[np.clip(idx, 0, n_particles - 1)]
    return estimates


def _blend(pose_a: TrackState, pose_b: TrackState, fwd: dict, bwd: dict) -> list[TrackState]:
    """Weighted mean of the two trajectories: weight falls linearly from the
    start of each filter, so the forward pass dominates near pose_a."""
    out = []
    span = pose_b.frame - pose_a.frame
    for f in range(pose_a.frame + 1, pose_b.frame):
        w = (pose_b.frame - f) / span
        fx, fy, fo = fwd[f]
        bx, by, bo = bwd[f]
        mix = w * np.exp(2j * fo) + (1 - w) * np.exp(2j * bo)
        base = lerp_states(pose_a, pose_b, f)
        out.append(base.copy(
            x=w * fx + (1 - w) * bx,
            y=w * fy + (1 - w) * by,
            orientation=float(np.angle(mix) / 2.0) if abs(mix) > 1e-12 else fo,
        ))
    return out


def interpolate_gap(ctx: CorrectionContext, pose_a: TrackState,
                    pose_b: TrackState) -> list[TrackState]:
    """States for the open interval between two anchors.

    Runs a single-target particle filter from each anchor towards the other;
    a direction lands when its estimate at the far anchor's frame comes
    within the landing distance.  Both landing means the two trajectories
    are blended with linear weights; otherwise the particle count doubles,
    and after four failed attempts the gap falls back to straight linear
    interpolation.
    """
    if pose_a.frame > pose_b.frame:
        pose_a, pose_b = pose_b, pose_a
    if pose_b.frame - pose_a.frame <= 1:
        return []
    cfg = ctx.cfg
    usable = ctx.seq is not None and ctx.stats is not None and ctx.params is not None
    if usable:
        for attempt in range(1, cfg.pf_attempts + 1):
            n = cfg.pf_base_particles * 2 ** (attempt - 1)
            fwd = _run_particle_filter(ctx, pose_a, pose_b, n,
                                       stream(ctx.seed, "pf-fwd", pose_a.frame, attempt))
            bwd = _run_particle_filter(ctx, pose_b, pose_a, n,
                                       stream(ctx.seed, "pf-bwd", pose_b.frame, attempt))
            land = ctx.params.land_dist
            fx, fy, _ = fwd[pose_b.frame]
            bx, by, _ = bwd[pose_a.frame]
            fwd_landed = np.hypot(fx - pose_b.x, fy - pose_b.y) <= land
            bwd_landed = np.hypot(bx - pose_a.x, by - pose_a.y) <= land
            if fwd_landed and bwd_landed:
                return _blend(pose_a, pose_b, fwd, bwd)
    return _linear_fill(pose_a, pose_b)


# ---------------------------------------------------------------------------
# review answers


def _tracklet_to_json(t: Tracklet) -> dict:
    return {
        "id": t.id, "complete": t.complete, "exited": t.exited,
        "connections": [[c.frame, c.joined_id, c.source] for c in t.connections],
        "states": [[s.frame, s.x, s.y, s.orientation, s.length, s.width,
                    int(s.interpolated), s.confidence]
                   for s in (t.states[f] for f in t.frames())],
    }


def _tracklet_from_json(doc_entry: dict) -> Tracklet:
    t = Tracklet(id=int(doc_entry["id"]),
                 connections=[Connection(int(f), int(j), str(s))
                              for f, j, s in doc_entry["connections"]],
                 complete=bool(doc_entry["complete"]), exited=bool(doc_entry["exited"]))
    for frame, x, y, o, ln, w, interp, conf in doc_entry["states"]:
        t.states[int(frame)] = TrackState(int(frame), float(x), float(y), float(o),
                                          float(ln), float(w), bool(interp), float(conf))
    return t


def _break_at(doc: TrackDocument, tracklet: Tracklet, frame: int) -> Tracklet:
    """Split; the given frame starts the tail part, which gets a new id."""
    if frame <= tracklet.first_frame or frame > tracklet.last_frame:
        raise OperationError(f"cannot break tracklet {tracklet.id} at frame {frame}")
    tail = Tracklet(id=doc.new_id(), complete=tracklet.complete, exited=tracklet.exited)
    for f in [f for f in tracklet.frames() if f >= frame]:
        tail.states[f] = tracklet.states.pop(f)
    tail.connections = [c for c in tracklet.connections if c.frame >= frame]
    tracklet.connections = [c for c in tracklet.connections if c.frame < frame]
    tracklet.complete = False
    tracklet.exited = False
    doc.add(tail)
    return tail


def _annotation_state(t: Tracklet, ann: KeyframeAnnotation,
                      cfg: EngineConfig) -> TrackState:
    ref_frame = min(t.frames(), key=lambda f: abs(f - ann.frame))
    ref = t.states[ref_frame]
    return TrackState(frame=ann.frame, x=ann.x, y=ann.y, orientation=ann.orientation,
                      length=ref.length, width=ref.width, interpolated=False,
                      confidence=cfg.annotation_confidence)


def _fill_gaps(ctx: CorrectionContext, t: Tracklet) -> None:
    frames = t.frames()
    for a, b in zip(frames, frames[1:]):
        if b - a > 1:
            for s in interpolate_gap(ctx, t.states[a], t.states[b]):
                t.states[s.frame] = s


def _chain_annotations(doc: TrackDocument, tid: int) -> list[KeyframeAnnotation]:
    stored = doc.meta.get("review_annotations", {}).get(str(tid), [])
    return [KeyframeAnnotation(frame=int(f), x=float(x), y=float(y), orientation=float(o))
            for f, x, y, o in stored]


def _store_chain(doc: TrackDocument, tid: int, anns: list[KeyframeAnnotation]) -> None:
    doc.meta.setdefault("review_annotations", {})[str(tid)] = [
        [a.frame, a.x, a.y, a.orientation] for a in sorted(anns, key=lambda a: a.frame)]


def _clear_chain(doc: TrackDocument, tid: int) -> None:
    doc.meta.get("review_annotations", {}).pop(str(tid), None)


def apply_review_answer(ctx: CorrectionContext, doc: TrackDocument, review: Review,
                        annotations: list[KeyframeAnnotation],
                        prior: list[KeyframeAnnotation] | None = None) -> ReviewOutcome:
    """Inference on an answered review; see the module docstring for the
    steps.  ``prior`` defaults to the annotation chain recorded on the
    document from earlier rounds of this same review."""
    cfg = ctx.cfg
    if review.tracklet_id not in doc.tracklets:
        raise OperationError(f"unknown tracklet {review.tracklet_id} in review {review.id}")
    t = doc.get(review.tracklet_id)

    for ann in annotations:
        if ann.special == "remove_track":
            doc.remove(t.id)
            _clear_chain(doc, t.id)
            review.status = "answered"
            return ReviewOutcome("removed")
        if ann.special == "target_exited":
            t.exited = True
            _clear_chain(doc, t.id)
            review.status = "answered"
            return ReviewOutcome("exited")

    normal = sorted([a for a in annotations if a.special == "none"], key=lambda a: a.frame)
    if not normal:
        raise OperationError("review answer carries no annotations and no special")
    for ann in normal:
        if ctx.video_length and not 1 <= ann.frame <= ctx.video_length:
            raise OperationError(f"annotation frame {ann.frame} outside the video")
        if ctx.seq is not None and not (0 <= ann.x < ctx.seq.width
                                        and 0 <= ann.y < ctx.seq.height):
            raise OperationError(f"annotation at frame {ann.frame} outside frame bounds")
    k_min = normal[0].frame
    k_max = normal[-1].frame

    # (2) annotations spanning a logged association break it first
    broken = 0
    for conn in [c for c in t.connections if k_min <= c.frame <= k_max]:
        tail = _break_at(doc, t, conn.frame)
        tail.connections = [c for c in tail.connections
                            if not (c.frame == conn.frame and c.joined_id == conn.joined_id)]
        broken += 1
        doc.meta["review_threshold"] = min(
            1.0, review_threshold(doc, cfg) + cfg.review_threshold_step)

    # (3) write annotation poses, then restore contiguity around them
    for ann in normal:
        t.states[ann.frame] = _annotation_state(t, ann, cfg)
    _fill_gaps(ctx, t)

    # (4) the four join checks against K* = prior plus current annotations
    if prior is None:
        prior = _chain_annotations(doc, t.id)
    k_star = {a.frame: a for a in prior}
    k_star.update({a.frame: a for a in normal})
    star_frames = sorted(k_star)
    star_min, star_max = star_frames[0], star_frames[-1]

    scored = []
    for other_id in sorted(doc.tracklets):
        if other_id == t.id:
            continue
        other = doc.tracklets[other_id]
        common = [f for f in star_frames if f in other.states]
        if not common:
            continue
        dist = float(np.mean([np.hypot(other.states[f].x - k_star[f].x,
                                       other.states[f].y - k_star[f].y)
                              for f in common]))
        scored.append((dist, other_id, len(common)))
    scored.sort()

    joined_id = None
    if scored:
        best_dist, best_id, overlap = scored[0]
        margin = (scored[1][0] - best_dist) if len(scored) > 1 else float("inf")
        candidate = doc.tracklets[best_id]
        checks = (
            best_dist < ctx.params.join_dist
            and margin > ctx.params.join_margin
            and overlap > ctx.params.join_overlap_min
            and k_max <= candidate.last_frame
            and candidate.first_frame > t.first_frame
        )
        if checks:
            for f in [f for f in t.frames() if f >= candidate.first_frame]:
                del t.states[f]
            for f in candidate.frames():
                t.states[f] = candidate.states[f]
            t.connections.extend(candidate.connections)
            t.connections.append(Connection(candidate.first_frame, best_id, "review"))
            t.connections.sort(key=lambda c: c.frame)
            t.complete = candidate.complete
            t.exited = candidate.exited
            doc.remove(best_id)
            _clear_chain(doc, best_id)
            t.check_contiguous()
            joined_id = best_id

    # (6) drop tracks engulfed by the annotation span
    star_xy = {f: (k_star[f].x, k_star[f].y) for f in star_frames}
    for other_id in sorted(doc.tracklets):
        if other_id == t.id:
            continue
        other = doc.tracklets[other_id]
        if other.first_frame < star_min or other.last_frame > star_max:
            continue
        dists = []
        for f in other.frames():
            nearest = min(star_frames, key=lambda kf: abs(kf - f))
            dists.append(np.hypot(other.states[f].x - star_xy[nearest][0],
                                  other.states[f].y - star_xy[nearest][1]))
        if float(np.mean(dists)) < cfg.engulf_factor * ctx.params.join_dist:
            doc.remove(other_id)
            _clear_chain(doc, other_id)

    if joined_id is not None:
        _clear_chain(doc, t.id)
        review.status = "answered"
        return ReviewOutcome("joined", joined_id=joined_id, broken_connections=broken)

    _store_chain(doc, t.id, list(k_star.values()))
    if k_max >= ctx.video_length:
        review.status = "answered"
        return ReviewOutcome("standalone", broken_connections=broken)
    extension = []
    k = k_max + cfg.keyframe_step
    for _ in range(cfg.requeue_keyframes):
        extension.append(min(k, ctx.video_length))
        k += cfg.keyframe_step
    extension = sorted(set(extension))
    review.status = "requeued"
    review.keyframes = sorted(set(review.keyframes) | set(extension))
    return ReviewOutcome("requeued", broken_connections=broken, next_keyframes=extension)


# ---------------------------------------------------------------------------
# manual operations


def _snapshot_restore(doc: TrackDocument, touched_ids: list[int],
                      created_ids: list[int]) -> ManualOp:
    """Inverse that removes created tracklets and re-adds prior snapshots."""
    return ManualOp(kind="Restore", payload={
        "remove": list(created_ids),
        "add": [_tracklet_to_json(doc.tracklets[tid]) for tid in touched_ids
                if tid in doc.tracklets],
        "next_id": doc.next_id,
    })


def apply_manual(doc: TrackDocument, op: ManualOp) -> ManualOp:
    """Apply one manual operation and return its exact inverse."""
    kind = op.kind
    p = op.payload
    if kind == "Add":
        states = p.get("states", [])
        if not states:
            raise OperationError("Add needs at least one state")
        prev_next_id = doc.next_id
        tid = int(p["id"]) if "id" in p else doc.new_id()
        t = Tracklet(id=tid, complete=bool(p.get("complete", False)),
                     exited=bool(p.get("exited", False)))
        for sd in states:
            s = TrackState(frame=int(sd["frame"]), x=float(sd["x"]), y=float(sd["y"]),
                           orientation=float(sd.get("orientation", 0.0)),
                           length=float(sd.get("length", 1.0)),
                           width=float(sd.get("width", 1.0)),
                           interpolated=bool(sd.get("interpolated", False)),
                           confidence=float(sd.get("confidence", 1.0)))
            t.states[s.frame] = s
        t.check_contiguous()
        doc.add(t)
        return ManualOp(kind="Restore",
                        payload={"remove": [t.id], "add": [], "next_id": prev_next_id})

    if kind == "Remove":
        tid = int(p["track_id"])
        inverse = _snapshot_restore(doc, [tid], [])
        doc.remove(tid)
        return inverse

    if kind == "Join":
        a = doc.get(int(p["first_id"]))
        b = doc.get(int(p["second_id"]))
        if a.first_frame > b.first_frame:
            a, b = b, a
        if a.last_frame >= b.first_frame:
            raise OperationError(
                f"tracklets {a.id} and {b.id} overlap in time; cannot join")
        if "frame" in p and int(p["frame"]) != b.first_frame:
            raise OperationError(
                f"join frame {p['frame']} is not where tracklet {b.id} begins")
        inverse = _snapshot_restore(doc, [a.id, b.id], [])
        gap = _linear_fill(a.states[a.last_frame], b.states[b.first_frame])
        for s in gap:
            a.states[s.frame] = s
        for f in b.frames():
            a.states[f] = b.states[f]
        a.connections.extend(b.connections)
        a.connections.append(Connection(b.first_frame, b.id, "manual"))
        a.connections.sort(key=lambda c: c.frame)
        a.complete = b.complete
        a.exited = b.exited
        doc.remove(b.id)
        a.check_contiguous()
        return inverse

    if kind == "Break":
        t = doc.get(int(p["track_id"]))
        frame = int(p["frame"])
        inverse = _snapshot_restore(doc, [t.id], [])
        tail = _break_at(doc, t, frame)
        inverse.payload["remove"].append(tail.id)
        return inverse

    if kind == "Adjust":
        t = doc.get(int(p["track_id"]))
        frame = int(p["frame"])
        if frame not in t.states:
            raise OperationError(f"tracklet {t.id} has no state at frame {frame}")
        inverse = _snapshot_restore(doc, [t.id], [])
        old = t.states[frame]
        t.states[frame] = TrackState(
            frame=frame, x=float(p["x"]), y=float(p["y"]),
            orientation=float(p.get("orientation", old.orientation)),
            length=float(p.get("length", old.length)),
            width=float(p.get("width", old.width)),
            interpolated=False, confidence=old.confidence)
        # re-interpolate out to the nearest non-interpolated neighbors
        frames = t.frames()
        anchors = [f for f in frames if not t.states[f].interpolated]
        before = [f for f in anchors if f < frame]
        after = [f for f in anchors if f > frame]
        if before:
            a, b = t.states[before[-1]], t.states[frame]
            for f in range(before[-1] + 1, frame):
                t.states[f] = lerp_states(a, b, f)
        if after:
            a, b = t.states[frame], t.states[after[0]]
            for f in range(frame + 1, after[0]):
                t.states[f] = lerp_states(a, b, f)
        return inverse

    if kind == "Restore":
        # sets the state of every affected id: snapshots win, listed removals go
        affected = sorted(set(p.get("remove", [])) | {d["id"] for d in p.get("add", [])})
        inverse = ManualOp(kind="Restore", payload={
            "remove": [tid for tid in affected if tid not in doc.tracklets],
            "add": [_tracklet_to_json(doc.tracklets[tid]) for tid in affected
                    if tid in doc.tracklets],
            "next_id": doc.next_id,
        })
        for tid in affected:
            if tid in doc.tracklets:
                doc.remove(int(tid))
        for entry in p.get("add", []):
            doc.add(_tracklet_from_json(entry))
        if "next_id" in p:
            doc.next_id = int(p["next_id"])
        return inverse

    raise OperationError(f"unknown manual operation {kind!r}")
