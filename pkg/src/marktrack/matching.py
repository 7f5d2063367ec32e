"""Tracklet association via agreement between opposed sequential trackers.

A tracker sweeps the video in one temporal direction; whenever a tracklet
terminates it becomes an active target whose pose is re-estimated each frame
by a genetic algorithm balancing per-target appearance fitness against how
much unclaimed foreground the whole configuration covers.  A target that
arrives within the landing distance of another tracklet's starting state
records a directed prediction.  Only endpoint pairs predicted in *both*
directions, with no competing prediction into either endpoint, are joined;
everything else is left for the correction phase -- fragmented tracks are
cheap to fix, wrong joins are not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .appearance import (DeltaStats, delta_to_templates, fitness_from_delta,
                         sample_delta_stats, sample_patches, tracklet_templates)
from .config import DEFAULT_CONFIG, EngineConfig
from .correction import CorrectionContext, interpolate_gap
from .errors import MarkTrackError
from .marks import DerivedParams
from .media import FrameSequence
from .rng import stream
from .trackdoc import Connection, TrackDocument, Tracklet


@dataclass
class ActiveTarget:
    origin_id: int
    origin_end: str                  # "end" (forward sweep) or "begin" (backward)
    pose: np.ndarray                 # (3,): x, y, orientation
    length: float
    width: float
    templates: np.ndarray            # (K, h, w)
    age: int = 0
    cumulative_fitness: float = 0.0

    def normalized_fitness(self) -> float:
        return self.cumulative_fitness / max(self.age, 1)


@dataclass
class Landing:
    from_id: int
    from_end: str
    to_id: int
    to_end: str
    frame: int


# ---------------------------------------------------------------------------
# fitness terms


def fit_target(gray: np.ndarray, pose, length: float, width: float,
               templates: np.ndarray, stats: DeltaStats,
               cfg: EngineConfig = DEFAULT_CONFIG) -> float:
    """Appearance fitness of one pose hypothesis; 0 outside the frame."""
    x, y = float(pose[0]), float(pose[1])
    h, w = gray.shape
    if not (0 <= x < w and 0 <= y < h):
        return 0.0
    patch = sample_patches(gray, np.asarray(pose, dtype=float)[None], length, width,
                           cfg.appearance_patch_height, cfg.appearance_patch_width)
    delta = delta_to_templates(patch, templates)[0]
    return float(fitness_from_delta(float(delta), stats))


def _boxes_cover(fg_ys: np.ndarray, fg_xs: np.ndarray, poses: np.ndarray,
                 sizes: np.ndarray) -> np.ndarray:
    """Which foreground pixels fall inside the union of oriented boxes.

    poses: (T, 3); sizes: (T, 2) of (length, width).  Returns bool (n_fg,).
    """
    covered = np.zeros(fg_ys.shape[0], dtype=bool)
    for (x, y, theta), (length, width) in zip(poses, sizes):
        dx = fg_xs - x
        dy = fg_ys - y
        cos, sin = np.cos(theta), np.sin(theta)
        along = dx * cos + dy * sin
        across = -dx * sin + dy * cos
        covered |= (np.abs(along) <= length / 2.0) & (np.abs(across) <= width / 2.0)
    return covered


def fit_global(fg_ys: np.ndarray, fg_xs: np.ndarray, poses: np.ndarray,
               sizes: np.ndarray) -> int:
    """Unclaimed-foreground pixels covered by the hypothesized boxes (union,
    never double counted)."""
    if fg_ys.size == 0 or len(poses) == 0:
        return 0
    return int(_boxes_cover(fg_ys, fg_xs, np.atleast_2d(poses), np.atleast_2d(sizes)).sum())


def claim_foreground(mask: np.ndarray, known_states) -> np.ndarray:
    """Remove pixels inside known tracklets' oriented boxes from the mask."""
    mask = np.asarray(mask, dtype=bool)
    if not known_states:
        return mask.copy()
    ys, xs = np.nonzero(mask)
    poses = np.array([[s.x, s.y, s.orientation] for s in known_states])
    sizes = np.array([[s.length, s.width] for s in known_states])
    covered = _boxes_cover(ys.astype(float), xs.astype(float), poses, sizes)
    out = mask.copy()
    out[ys[covered], xs[covered]] = False
    return out


# ---------------------------------------------------------------------------
# genetic optimization of the active-target configuration


def _axial_mean(weights: np.ndarray, thetas: np.ndarray) -> float:
    mix = weights @ np.exp(2j * thetas)
    return float(np.angle(mix) / 2.0) if abs(mix) > 1e-12 else float(thetas[0])


def ga_step(gray: np.ndarray, fg_ys: np.ndarray, fg_xs: np.ndarray,
            targets: list[ActiveTarget], stats: DeltaStats, motion_sigma: float,
            rng: np.random.Generator, cfg: EngineConfig = DEFAULT_CONFIG
            ) -> tuple[np.ndarray, np.ndarray]:
    """One frame of configuration optimization.

    Returns the new (T, 3) poses and the per-target appearance fitness of
    the final estimate.  The population starts at the previous poses plus
    gaussian displacement; reproduction crosses over by keeping the better
    pose per target, or mutates every target of the fitter parent; the
    output is the fitness-weighted population mean per target.
    """
    n_t = len(targets)
    pop = cfg.ga_population
    h_p, w_p = cfg.appearance_patch_height, cfg.appearance_patch_width
    frame_h, frame_w = gray.shape
    base = np.stack([t.pose for t in targets])              # (T, 3)
    sizes = np.array([[t.length, t.width] for t in targets])

    population = np.tile(base[None], (pop, 1, 1))
    population[:, :, 0] += rng.normal(0.0, motion_sigma, (pop, n_t))
    population[:, :, 1] += rng.normal(0.0, motion_sigma, (pop, n_t))

    def evaluate(members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fit_t = np.zeros((len(members), n_t))
        for i, t in enumerate(targets):
            patches = sample_patches(gray, members[:, i, :], t.length, t.width, h_p, w_p)
            delta = delta_to_templates(patches, t.templates)
            fits = fitness_from_delta(delta, stats)
            oob = ((members[:, i, 0] < 0) | (members[:, i, 0] >= frame_w)
                   | (members[:, i, 1] < 0) | (members[:, i, 1] >= frame_h))
            fit_t[:, i] = np.where(oob, 0.0, fits)
        fit_g = np.array([fit_global(fg_ys, fg_xs, m, sizes) for m in members], dtype=float)
        return fit_t, fit_g

    fit_t, fit_g = evaluate(population)

    for _ in range(cfg.ga_cycles):
        order = np.argsort(-fit_g, kind="stable")
        children = [population[order[i]].copy() for i in range(cfg.ga_elitism)]
        total = fit_g.sum()
        probs = fit_g / total if total > 0 else np.full(pop, 1.0 / pop)
        cum = np.cumsum(probs)
        while len(children) < pop:
            pa = int(np.searchsorted(cum, rng.random()))
            pb = int(np.searchsorted(cum, rng.random()))
            pa, pb = min(pa, pop - 1), min(pb, pop - 1)
            if rng.random() < cfg.ga_crossover:
                take_a = fit_t[pa] >= fit_t[pb]
                child = np.where(take_a[:, None], population[pa], population[pb])
            else:
                best = pa if fit_g[pa] >= fit_g[pb] else pb
                child = population[best].copy()
                child[:, 0] += rng.normal(0.0, motion_sigma, n_t)
                child[:, 1] += rng.normal(0.0, motion_sigma, n_t)
                child[:, 2] += rng.normal(0.0, cfg.ga_orient_sigma, n_t)
            children.append(child)
        population = np.stack(children)
        fit_t, fit_g = evaluate(population)

    # final estimate: weighted mean over the population, per target
    out = np.zeros((n_t, 3))
    for i in range(n_t):
        w = fit_t[:, i]
        total = w.sum()
        w = w / total if total > 1e-12 else np.full(pop, 1.0 / pop)
        if cfg.ga_literal_blend:
            w = (1.0 - w)
            w = w / w.sum()
        out[i, 0] = w @ population[:, i, 0]
        out[i, 1] = w @ population[:, i, 1]
        out[i, 2] = _axial_mean(w, population[:, i, 2])

    final_fit = np.zeros(n_t)
    for i, t in enumerate(targets):
        final_fit[i] = fit_target(gray, out[i], t.length, t.width, t.templates, stats, cfg)
    return out, final_fit


def prune_targets(targets: list[ActiveTarget], doc: TrackDocument, frame: int,
                  max_targets: int, cfg: EngineConfig = DEFAULT_CONFIG
                  ) -> list[ActiveTarget]:
    """Cap the active set: the scene holds at most max_targets bodies, so
    anything beyond (known tracklets here) + capacity + slack is dropped,
    lowest age-normalized fitness first, older first on ties."""
    in_frame = sum(1 for t in doc.tracklets.values() if frame in t.states)
    q = in_frame + len(targets) - (max_targets + cfg.prune_slack)
    if q <= 0:
        return targets
    ranked = sorted(targets, key=lambda t: (t.normalized_fitness(), -t.age))
    drop = {id(t) for t in ranked[:q]}
    return [t for t in targets if id(t) not in drop]


# ---------------------------------------------------------------------------
# directional sweeps


def run_direction(doc: TrackDocument, masks, seq: FrameSequence, params: DerivedParams,
                  stats: DeltaStats, direction: str, seed: int = 0,
                  cfg: EngineConfig = DEFAULT_CONFIG) -> list[Landing]:
    """Sweep all frames once, tracking terminated tracklets until they land.

    Forward: targets activate where a tracklet ends and may land on another
    tracklet's first frame.  Backward is the mirror image; besides frame
    order and endpoint roles the procedure is identical.
    """
    if direction not in ("forward", "backward"):
        raise MarkTrackError(f"unknown direction {direction!r}")
    fwd = direction == "forward"
    get_mask = masks if callable(masks) else masks.__getitem__
    frames = list(range(1, seq.frame_count + 1)) if fwd else \
        list(range(seq.frame_count, 0, -1))
    step = 1 if fwd else -1
    h_p, w_p = cfg.appearance_patch_height, cfg.appearance_patch_width
    rng = stream(seed, "ga", direction)

    terminates_at: dict[int, list[Tracklet]] = {}
    starts_at: dict[int, list[Tracklet]] = {}
    for t in doc.tracklets.values():
        term = t.last_frame if fwd else t.first_frame
        start = t.first_frame if fwd else t.last_frame
        terminates_at.setdefault(term, []).append(t)
        starts_at.setdefault(start, []).append(t)

    active: list[ActiveTarget] = []
    landings: list[Landing] = []
    for f in frames:
        for t in sorted(terminates_at.get(f - step, []), key=lambda t: t.id):
            pose_state = t.states[t.last_frame if fwd else t.first_frame]
            active.append(ActiveTarget(
                origin_id=t.id,
                origin_end="end" if fwd else "begin",
                pose=np.array([pose_state.x, pose_state.y, pose_state.orientation]),
                length=pose_state.length, width=pose_state.width,
                templates=tracklet_templates(seq.gray_frame, t, cfg.template_count,
                                             h_p, w_p)))
        if not active:
            continue

        known = [t.states[f] for t in doc.tracklets.values() if f in t.states]
        unclaimed = claim_foreground(get_mask(f), known)
        fg_ys, fg_xs = np.nonzero(unclaimed)
        gray = seq.gray_frame(f)
        poses, fits = ga_step(gray, fg_ys.astype(float), fg_xs.astype(float),
                              active, stats, params.motion_sigma, rng, cfg)
        for target, pose, fit in zip(active, poses, fits):
            target.pose = pose
            target.age += 1
            target.cumulative_fitness += float(fit)

        landed: list[ActiveTarget] = []
        for target in active:
            best = None
            for t in starts_at.get(f, []):
                if t.id == target.origin_id:
                    continue
                s = t.states[f]
                d = float(np.hypot(s.x - target.pose[0], s.y - target.pose[1]))
                if d <= params.land_dist and (best is None or d < best[0]):
                    best = (d, t)
            if best is not None:
                landings.append(Landing(
                    from_id=target.origin_id, from_end=target.origin_end,
                    to_id=best[1].id, to_end="begin" if fwd else "end", frame=f))
                landed.append(target)
        active = [t for t in active if t not in landed]
        active = prune_targets(active, doc, f, params.max_targets, cfg)
    return landings


# ---------------------------------------------------------------------------
# iterative matching


def match_iteration(doc: TrackDocument, forward: list[Landing], backward: list[Landing],
                    ctx: CorrectionContext | None = None) -> tuple[TrackDocument, int]:
    """Join endpoint pairs predicted by both directions.

    The association graph has a begin and an end vertex per tracklet; a
    two-cycle means the forward tracker left one tracklet's end and reached
    another's begin while the backward tracker did the reverse.  Any vertex
    that received more than one prediction is too contested to trust, and
    every pair touching it is dropped.
    """
    in_deg: dict[tuple[int, str], int] = {}
    for l in forward + backward:
        head = (l.to_id, l.to_end)
        in_deg[head] = in_deg.get(head, 0) + 1

    fwd_edges = {(l.from_id, l.to_id): l for l in forward
                 if l.from_end == "end" and l.to_end == "begin"}
    bwd_edges = {(l.from_id, l.to_id) for l in backward
                 if l.from_end == "begin" and l.to_end == "end"}

    pairs = []
    for (a, b), landing in sorted(fwd_edges.items()):
        if (b, a) not in bwd_edges:
            continue
        if in_deg.get((b, "begin"), 0) > 1 or in_deg.get((a, "end"), 0) > 1:
            continue
        assert in_deg.get((b, "begin"), 0) == 1 and in_deg.get((a, "end"), 0) == 1
        pairs.append((a, b))

    alias: dict[int, int] = {}

    def resolve(tid: int) -> int:
        while tid in alias:
            tid = alias[tid]
        return tid

    joins = 0
    for a_id, b_id in sorted(pairs, key=lambda p: doc.tracklets[p[1]].first_frame):
        a = doc.tracklets[resolve(a_id)]
        b = doc.tracklets[resolve(b_id)]
        if a.id == b.id:
            continue
        if a.first_frame > b.first_frame:
            a, b = b, a
        if a.last_frame >= b.first_frame:
            continue  # cannot merge overlapping spans
        gap_a = a.states[a.last_frame]
        gap_b = b.states[b.first_frame]
        if b.first_frame - a.last_frame > 1 and ctx is not None:
            for s in interpolate_gap(ctx, gap_a, gap_b):
                a.states[s.frame] = s
        elif b.first_frame - a.last_frame > 1:
            from .trackdoc import lerp_states
            for f in range(a.last_frame + 1, b.first_frame):
                a.states[f] = lerp_states(gap_a, gap_b, f)
        for f in b.frames():
            a.states[f] = b.states[f]
        a.connections.extend(b.connections)
        a.connections.append(Connection(b.first_frame, b.id, "matching"))
        a.connections.sort(key=lambda c: c.frame)
        a.complete = a.complete and b.complete
        a.exited = b.exited
        doc.remove(b.id)
        alias[b.id] = a.id
        a.check_contiguous()
        joins += 1
    return doc, joins


def motion_sigma_from_tracklets(doc: TrackDocument, floor: float = 0.5) -> float:
    """Per-frame displacement std pooled over both axes of every tracklet."""
    deltas = []
    for t in doc.tracklets.values():
        frames = t.frames()
        for f0, f1 in zip(frames, frames[1:]):
            if f1 == f0 + 1:
                deltas.append(t.states[f1].x - t.states[f0].x)
                deltas.append(t.states[f1].y - t.states[f0].y)
    if not deltas:
        return floor
    return float(max(np.std(np.asarray(deltas)), floor))


def match(doc: TrackDocument, masks, seq: FrameSequence, params: DerivedParams,
          seed: int = 0, cfg: EngineConfig = DEFAULT_CONFIG) -> TrackDocument:
    """Iterate sweep-and-join until stable (at most match_iterations rounds).

    Motion statistics come from the initial tracklets, and the template
    difference statistics are resampled at the start of every iteration so
    joined tracks contribute their updated appearance.
    """
    if not doc.tracklets:
        return doc
    params.motion_sigma = motion_sigma_from_tracklets(doc)
    for iteration in range(1, cfg.match_iterations + 1):
        stats = sample_delta_stats(list(doc.tracklets.values()), seq.gray_frame,
                                   cfg.delta_samples_per_tracklet,
                                   seed=int(stream(seed, "stats", iteration).integers(2 ** 31)),
                                   cfg=cfg)
        ctx = CorrectionContext(seq=seq, params=params, stats=stats,
                                video_length=seq.frame_count,
                                seed=int(stream(seed, "gapfill", iteration).integers(2 ** 31)),
                                cfg=cfg)
        fwd = run_direction(doc, masks, seq, params, stats, "forward",
                            seed=int(stream(seed, "dir", iteration, 0).integers(2 ** 31)), cfg=cfg)
        bwd = run_direction(doc, masks, seq, params, stats, "backward",
                            seed=int(stream(seed, "dir", iteration, 1).integers(2 ** 31)), cfg=cfg)
        doc, joins = match_iteration(doc, fwd, bwd, ctx)
        if joins == 0:
            break
    return doc
