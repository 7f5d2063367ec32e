"""Canonical track document: tracklets, their states, and association logs.

This is the unit persisted per project, exchanged with the HTTP service,
and exported to CSV.  Serialization is canonical (sorted keys, stable float
repr) so identically seeded runs produce byte-identical documents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MarkTrackError

DOC_VERSION = 1

CSV_HEADER = "track_id,frame,x,y,orientation_rad,length,width,interpolated,confidence"


@dataclass
class TrackState:
    frame: int
    x: float
    y: float
    orientation: float
    length: float
    width: float
    interpolated: bool = False
    confidence: float = 0.0

    def center(self) -> tuple[float, float]:
        return (self.x, self.y)

    def copy(self, **overrides) -> "TrackState":
        data = dict(frame=self.frame, x=self.x, y=self.y, orientation=self.orientation,
                    length=self.length, width=self.width, interpolated=self.interpolated,
                    confidence=self.confidence)
        data.update(overrides)
        return TrackState(**data)


@dataclass
class Connection:
    frame: int            # first frame of the joined-on fragment
    joined_id: int
    source: str           # "matching" | "review" | "manual"


@dataclass
class Tracklet:
    id: int
    states: dict[int, TrackState] = field(default_factory=dict)
    connections: list[Connection] = field(default_factory=list)
    complete: bool = False
    exited: bool = False

    @property
    def first_frame(self) -> int:
        return min(self.states)

    @property
    def last_frame(self) -> int:
        return max(self.states)

    def frames(self) -> list[int]:
        return sorted(self.states)

    def check_contiguous(self) -> None:
        fs = self.frames()
        if not fs:
            raise MarkTrackError(f"tracklet {self.id} has no states")
        if fs[-1] - fs[0] + 1 != len(fs):
            raise MarkTrackError(f"tracklet {self.id} has frame gaps")

    def mean_confidence(self) -> float:
        return float(np.mean([s.confidence for s in self.states.values()]))

    def copy(self) -> "Tracklet":
        return Tracklet(
            id=self.id,
            states={f: s.copy() for f, s in self.states.items()},
            connections=[Connection(c.frame, c.joined_id, c.source) for c in self.connections],
            complete=self.complete,
            exited=self.exited,
        )


@dataclass
class TrackDocument:
    tracklets: dict[int, Tracklet] = field(default_factory=dict)
    next_id: int = 1
    meta: dict = field(default_factory=dict)

    def new_id(self) -> int:
        nid = self.next_id
        self.next_id += 1
        return nid

    def add(self, tracklet: Tracklet) -> Tracklet:
        if tracklet.id in self.tracklets:
            raise MarkTrackError(f"duplicate tracklet id {tracklet.id}")
        self.tracklets[tracklet.id] = tracklet
        self.next_id = max(self.next_id, tracklet.id + 1)
        return tracklet

    def remove(self, tracklet_id: int) -> Tracklet:
        if tracklet_id not in self.tracklets:
            raise MarkTrackError(f"unknown tracklet id {tracklet_id}")
        return self.tracklets.pop(tracklet_id)

    def get(self, tracklet_id: int) -> Tracklet:
        if tracklet_id not in self.tracklets:
            raise MarkTrackError(f"unknown tracklet id {tracklet_id}")
        return self.tracklets[tracklet_id]

    def copy(self) -> "TrackDocument":
        return TrackDocument(
            tracklets={tid: t.copy() for tid, t in self.tracklets.items()},
            next_id=self.next_id,
            meta=json.loads(json.dumps(self.meta)),
        )

    def in_frame(self, frame: int) -> list[Tracklet]:
        return [t for t in self.tracklets.values() if frame in t.states]

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": DOC_VERSION,
            "next_id": self.next_id,
            "meta": self.meta,
            "tracklets": [
                {
                    "id": t.id,
                    "complete": t.complete,
                    "exited": t.exited,
                    "connections": [[c.frame, c.joined_id, c.source] for c in t.connections],
                    "states": [
                        [s.frame, s.x, s.y, s.orientation, s.length, s.width,
                         int(s.interpolated), s.confidence]
                        for s in (t.states[f] for f in t.frames())
                    ],
                }
                for t in (self.tracklets[i] for i in sorted(self.tracklets))
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrackDocument":
        if doc.get("version") != DOC_VERSION:
            raise MarkTrackError(f"unsupported track document version {doc.get('version')}")
        out = cls(next_id=doc["next_id"], meta=doc.get("meta", {}))
        for td in doc["tracklets"]:
            t = Tracklet(
                id=td["id"],
                connections=[Connection(int(f), int(j), str(s)) for f, j, s in td["connections"]],
                complete=bool(td["complete"]),
                exited=bool(td["exited"]),
            )
            for frame, x, y, o, ln, w, interp, conf in td["states"]:
                t.states[int(frame)] = TrackState(int(frame), float(x), float(y), float(o),
                                                  float(ln), float(w), bool(interp), float(conf))
            out.tracklets[t.id] = t
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "TrackDocument":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for tid in sorted(self.tracklets):
            t = self.tracklets[tid]
            for f in t.frames():
                s = t.states[f]
                lines.append(f"{tid},{f},{s.x!r},{s.y!r},{s.orientation!r},"
                             f"{s.length!r},{s.width!r},{int(s.interpolated)},{s.confidence!r}")
        return "\n".join(lines) + "\n"


def lerp_states(a: TrackState, b: TrackState, frame: int) -> TrackState:
    """Linear pose interpolation at ``frame`` between two anchor states."""
    if b.frame == a.frame:
        return a.copy(frame=frame, interpolated=True)
    w = (frame - a.frame) / (b.frame - a.frame)
    # orientations are axial (mod pi): interpolate on the doubled angle
    da = np.exp(2j * a.orientation)
    db = np.exp(2j * b.orientation)
    mix = (1 - w) * da + w * db
    if abs(mix) < 1e-12:
        orient = a.orientation
    else:
        orient = float(np.angle(mix) / 2.0)
    return TrackState(
        frame=frame,
        x=a.x + w * (b.x - a.x),
        y=a.y + w * (b.y - a.y),
        orientation=orient,
        length=a.length + w * (b.length - a.length),
        width=a.width + w * (b.width - a.width),
        interpolated=True,
        confidence=min(a.confidence, b.confidence),
    )
