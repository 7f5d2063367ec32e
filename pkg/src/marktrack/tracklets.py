"""Initial tracklet construction from foreground overlap and detections.

Foreground blobs that overlap frame to frame form a directed acyclic graph;
its merge- and split-free corridors ("lanes") are the only places where
identity is unambiguous, so only lanes whose blobs carry a detection
majority become tracklets.  A random-forest confidence model trained on
those tracklets then prunes false tracks and scores every state for the
later matching and review stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .config import DEFAULT_CONFIG, EngineConfig
from .detection import Blob, Detection, blob_descriptor, extract_blobs, label_mask, _descriptor
from .errors import InsufficientStatesError
from .media import FrameSequence
from .rng import stream
from .trackdoc import TrackDocument, Tracklet, TrackState, lerp_states

NodeKey = tuple[int, int]  # (frame, component id)


@dataclass
class OverlapGraph:
    """DAG of foreground blobs linked by pixel overlap in consecutive frames."""
    blobs: dict[NodeKey, Blob]
    succ: dict[NodeKey, list[NodeKey]]
    pred: dict[NodeKey, list[NodeKey]]
    labels: dict[int, np.ndarray]
    frames: list[int]

    def out_degree(self, node: NodeKey) -> int:
        return len(self.succ.get(node, ()))

    def in_degree(self, node: NodeKey) -> int:
        return len(self.pred.get(node, ()))

    def edges(self) -> list[tuple[NodeKey, NodeKey]]:
        return [(u, v) for u, vs in self.succ.items() for v in vs]


@dataclass
class Lane:
    nodes: list[NodeKey]

    @property
    def start_frame(self) -> int:
        return self.nodes[0][0]

    @property
    def end_frame(self) -> int:
        return self.nodes[-1][0]


def build_overlap_graph(masks, frames: list[int]) -> OverlapGraph:
    """Label every mask and link blobs that share at least one pixel
    with a blob in the next frame."""
    get_mask = masks if callable(masks) else masks.__getitem__
    blobs: dict[NodeKey, Blob] = {}
    labels: dict[int, np.ndarray] = {}
    succ: dict[NodeKey, list[NodeKey]] = {}
    pred: dict[NodeKey, list[NodeKey]] = {}
    prev_label = None
    for i, t in enumerate(frames):
        mask = np.asarray(get_mask(t), dtype=bool)
        lab, _ = label_mask(mask)
        labels[t] = lab
        for b in extract_blobs(mask, t):
            blobs[b.key] = b
        if prev_label is not None:
            t_prev = frames[i - 1]
            both = (prev_label > 0) & (lab > 0)
            if both.any():
                pairs = np.unique(np.stack([prev_label[both], lab[both]]), axis=1)
                for a, b in pairs.T:
                    u, v = (t_prev, int(a)), (t, int(b))
                    succ.setdefault(u, []).append(v)
                    pred.setdefault(v, []).append(u)
        prev_label = lab
    return OverlapGraph(blobs=blobs, succ=succ, pred=pred, labels=labels, frames=list(frames))


def partition_lanes(g: OverlapGraph) -> list[Lane]:
    """Maximal merge/split-free chains; isolated and branching nodes are
    singleton lanes.  Every node lands in exactly one lane."""

    def lane_next(u: NodeKey) -> NodeKey | None:
        if g.out_degree(u) != 1:
            return None
        v = g.succ[u][0]
        return v if g.in_degree(v) == 1 else None

    def lane_prev(v: NodeKey) -> NodeKey | None:
        if g.in_degree(v) != 1:
            return None
        u = g.pred[v][0]
        return u if g.out_degree(u) == 1 else None

    lanes = []
    for node in sorted(g.blobs):
        if lane_prev(node) is not None:
            continue  # interior of some chain
        chain = [node]
        nxt = lane_next(node)
        while nxt is not None:
            chain.append(nxt)
            nxt = lane_next(nxt)
        lanes.append(Lane(chain))
    return lanes


def map_detections(g: OverlapGraph, detections: list[Detection]) -> dict[NodeKey, Detection]:
    """Detection -> blob assignment: the detection centroid must fall inside
    the blob's pixel set."""
    out: dict[NodeKey, Detection] = {}
    for d in detections:
        lab = g.labels.get(d.frame)
        if lab is None:
            continue
        x = int(round(d.center[0]))
        y = int(round(d.center[1]))
        if not (0 <= y < lab.shape[0] and 0 <= x < lab.shape[1]):
            continue
        comp = int(lab[y, x])
        if comp > 0:
            out.setdefault((d.frame, comp), d)
    return out


def _det_state(d: Detection, interpolated: bool = False) -> TrackState:
    return TrackState(frame=d.frame, x=d.center[0], y=d.center[1],
                      orientation=d.orientation, length=d.length, width=d.width,
                      interpolated=interpolated)


def build_tracklets(g: OverlapGraph, lanes: list[Lane], detections: list[Detection],
                    cfg: EngineConfig = DEFAULT_CONFIG
                    ) -> tuple[TrackDocument, list[Detection]]:
    """Lanes with a strict detection majority become tracklets.

    Mapped blobs take the detection pose; unmapped blobs inside a majority
    lane are linearly interpolated between their nearest mapped neighbors
    (held at the ends) and flagged.  Detections in minority lanes are
    discarded along with the lanes.
    """
    mapped = map_detections(g, detections)
    doc = TrackDocument()
    discarded: list[Detection] = []
    for lane in sorted(lanes, key=lambda l: (l.start_frame, l.nodes[0][1])):
        hits = [n for n in lane.nodes if n in mapped]
        if len(hits) * 2 <= len(lane.nodes):  # majority must be strict
            discarded.extend(mapped[n] for n in hits)
            continue
        anchor_states = {n[0]: _det_state(mapped[n]) for n in hits}
        anchor_frames = sorted(anchor_states)
        t = Tracklet(id=doc.new_id())
        for node in lane.nodes:
            f = node[0]
            if f in anchor_states:
                t.states[f] = anchor_states[f]
                continue
            before = [af for af in anchor_frames if af < f]
            after = [af for af in anchor_frames if af > f]
            if before and after:
                t.states[f] = lerp_states(anchor_states[before[-1]],
                                          anchor_states[after[0]], f)
            else:  # lane end beyond the outermost detection: hold the pose
                nearest = anchor_states[before[-1] if before else after[0]]
                t.states[f] = nearest.copy(frame=f, interpolated=True)
        t.check_contiguous()
        doc.add(t)
    return doc, discarded


# ---------------------------------------------------------------------------
# detection confidence


@dataclass
class ConfidenceModel:
    forest: RandomForestClassifier
    cfg: EngineConfig = field(default_factory=lambda: DEFAULT_CONFIG)

    def score_descriptors(self, descriptors: np.ndarray) -> np.ndarray:
        """Fraction of trees voting positive, in [0, 1]."""
        x = np.atleast_2d(descriptors)
        votes = np.stack([tree.predict(x) for tree in self.forest.estimators_])
        return votes.mean(axis=0)

    def score_states(self, gray: np.ndarray, states: list[TrackState]) -> np.ndarray:
        desc = np.array([_descriptor(gray, s.x, s.y, s.orientation, s.length, s.width,
                                     self.cfg) for s in states])
        return self.score_descriptors(desc)


def train_confidence(doc: TrackDocument, seq: FrameSequence, body_length: float,
                     seed: int = 0, cfg: EngineConfig = DEFAULT_CONFIG) -> ConfidenceModel:
    """Random forest over the detection patch descriptor.

    Positives are the tracklet states themselves; negatives are the same
    states knocked off-pose by a random offset of 0.5 to 1.5 body lengths
    and a 30 to 90 degree twist.
    """
    states = [(t.id, s) for t in doc.tracklets.values() for s in t.states.values()]
    if len(states) < cfg.confidence_min_states:
        raise InsufficientStatesError(
            f"{len(states)} states < {cfg.confidence_min_states}; "
            "use detection presence as confidence instead")
    rng = stream(seed, "confidence-negatives")
    pos_desc, neg_desc = [], []
    by_frame: dict[int, list[TrackState]] = {}
    for _, s in states:
        by_frame.setdefault(s.frame, []).append(s)
    for f in sorted(by_frame):
        gray = seq.gray_frame(f)
        for s in by_frame[f]:
            pos_desc.append(_descriptor(gray, s.x, s.y, s.orientation,
                                        s.length, s.width, cfg))
            dist = rng.uniform(cfg.negative_offset_low, cfg.negative_offset_high) * body_length
            ang = rng.uniform(0.0, 2 * np.pi)
            twist = np.deg2rad(rng.uniform(cfg.negative_angle_low, cfg.negative_angle_high))
            twist *= 1 if rng.random() < 0.5 else -1
            neg_desc.append(_descriptor(gray, s.x + dist * np.cos(ang),
                                        s.y + dist * np.sin(ang),
                                        s.orientation + twist,
                                        s.length, s.width, cfg))
    x = np.vstack([pos_desc, neg_desc])
    y = np.concatenate([np.ones(len(pos_desc)), np.zeros(len(neg_desc))])
    forest = RandomForestClassifier(n_estimators=cfg.forest_trees, max_depth=cfg.forest_depth,
                                    random_state=int(stream(seed, "forest").integers(2 ** 31)),
                                    n_jobs=1)
    forest.fit(x, y)
    return ConfidenceModel(forest, cfg)


def score_document(doc: TrackDocument, model: ConfidenceModel, seq: FrameSequence) -> None:
    """Write per-state confidences into the document, batched per frame."""
    by_frame: dict[int, list[TrackState]] = {}
    for t in doc.tracklets.values():
        for s in t.states.values():
            by_frame.setdefault(s.frame, []).append(s)
    for f in sorted(by_frame):
        gray = seq.gray_frame(f)
        scores = model.score_states(gray, by_frame[f])
        for s, c in zip(by_frame[f], scores):
            s.confidence = float(c)


def filter_tracks(doc: TrackDocument, model: ConfidenceModel, seq: FrameSequence,
                  cfg: EngineConfig = DEFAULT_CONFIG) -> TrackDocument:
    """Score every state and drop tracklets whose mean confidence is below
    the keep threshold; survivors keep their per-state confidences."""
    score_document(doc, model, seq)
    for tid in [t.id for t in doc.tracklets.values()
                if t.mean_confidence() < cfg.confidence_keep]:
        doc.remove(tid)
    return doc
