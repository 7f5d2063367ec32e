"""Tracking metrics against ground truth, and the annotation-cost model.

Per frame, track states are matched one-to-one to ground-truth poses by
greedy ascending distance within a match radius.  From those matches come
coverage, the mostly/partially/mostly-lost trajectory split, false alarms
per frame, raw identity switches, identity-integrity errors (switches that
never revert within the window), missed associations, and mean position
error.

Identity integrity uses a stable-identity scan: an excursion to another
identity that returns to the previous one within the window is forgiven
outright, so a track reading id1, id2 (10 frames), id1 counts two raw
switches but zero integrity errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import DEFAULT_CONFIG, EngineConfig
from ..trackdoc import TrackDocument
from .synth import GroundTruth


@dataclass
class MetricsReport:
    gt_cov: float
    mt: int
    pt: int
    ml: int
    faf: float
    ids: int
    id_integ: int
    fn_assoc: int
    avg_pos_error: float

    def to_json(self) -> dict:
        return {
            "gt_cov": self.gt_cov, "mt": self.mt, "pt": self.pt, "ml": self.ml,
            "faf": self.faf, "ids": self.ids, "id_integ": self.id_integ,
            "fn_assoc": self.fn_assoc, "avg_pos_error": self.avg_pos_error,
        }


def evaluate(doc: TrackDocument, gt: GroundTruth, match_dist: float | None = None,
             revert_window: int | None = None,
             cfg: EngineConfig = DEFAULT_CONFIG) -> MetricsReport:
    if match_dist is None:
        match_dist = gt.body_length()
    n_window = cfg.ids_window if revert_window is None else revert_window

    track_ids = sorted(doc.tracklets)
    gt_ids = sorted(gt.targets)
    match_of_track: dict[int, dict[int, int]] = {tid: {} for tid in track_ids}
    match_of_gt: dict[int, dict[int, int]] = {gid: {} for gid in gt_ids}
    total_err = 0.0
    n_match = 0
    false_states = 0

    for f in range(1, gt.frame_count + 1):
        present_tracks = [(tid, doc.tracklets[tid].states[f])
                          for tid in track_ids if f in doc.tracklets[tid].states]
        present_gt = [(gid, gt.targets[gid][f]) for gid in gt_ids if f in gt.targets[gid]]
        pairs = []
        for tid, s in present_tracks:
            for gid, p in present_gt:
                d = float(np.hypot(s.x - p[0], s.y - p[1]))
                if d <= match_dist:
                    pairs.append((d, tid, gid))
        pairs.sort()
        used_t, used_g = set(), set()
        for d, tid, gid in pairs:
            if tid in used_t or gid in used_g:
                continue
            used_t.add(tid)
            used_g.add(gid)
            match_of_track[tid][f] = gid
            match_of_gt[gid][f] = tid
            total_err += d
            n_match += 1
        false_states += sum(1 for tid, _ in present_tracks if tid not in used_t)

    total_gt = gt.total_positions()
    gt_cov = n_match / total_gt if total_gt else 0.0
    faf = false_states / gt.frame_count if gt.frame_count else 0.0
    avg_err = total_err / n_match if n_match else 0.0

    mt = pt = ml = 0
    for gid in gt_ids:
        frac = len(match_of_gt[gid]) / len(gt.targets[gid])
        if frac > cfg.mostly_tracked:
            mt += 1
        elif frac < cfg.mostly_lost:
            ml += 1
        else:
            pt += 1

    ids = 0
    id_integ = 0
    for tid in track_ids:
        seq = sorted(match_of_track[tid].items())
        ids += sum(1 for i in range(1, len(seq)) if seq[i][1] != seq[i - 1][1])
        i = 0
        stable = None
        while i < len(seq):
            f, gid = seq[i]
            if stable is None or gid == stable:
                stable = gid
                i += 1
                continue
            revert = None
            for j in range(i + 1, len(seq)):
                if seq[j][0] > f + n_window:
                    break
                if seq[j][1] == stable:
                    revert = j
                    break
            if revert is None:
                id_integ += 1
                stable = gid
                i += 1
            else:
                i = revert

    fn_assoc = 0
    for gid in gt_ids:
        runs: list[int] = []
        for f in sorted(gt.targets[gid]):
            tid = match_of_gt[gid].get(f)
            if tid is not None and (not runs or runs[-1] != tid):
                runs.append(tid)
        fn_assoc += sum(1 for i in range(1, len(runs)) if runs[i] != runs[i - 1])

    return MetricsReport(gt_cov=gt_cov, mt=mt, pt=pt, ml=ml, faf=faf, ids=ids,
                         id_integ=id_integ, fn_assoc=fn_assoc, avg_pos_error=avg_err)


def estimate_cost(playback_seconds: float, annotation_count: int, switch_count: int,
                  cfg: EngineConfig = DEFAULT_CONFIG) -> float:
    """Total correction time in seconds: playback plus per-annotation and
    per-switch constants."""
    if min(playback_seconds, annotation_count, switch_count) < 0:
        raise ValueError("cost inputs must be non-negative")
    return (playback_seconds
            + cfg.annotation_seconds * annotation_count
            + cfg.switch_seconds * switch_count)


REPORT_COLUMNS = ["GT Cov.", "FAF", "Avg Pos. Error", "FN Assoc.", "ID Integ.",
                  "ID Sw.", "MT", "PT", "ML"]


def format_report(report: MetricsReport, label: str = "") -> str:
    values = [f"{report.gt_cov:.3f}", f"{report.faf:.2f}", f"{report.avg_pos_error:.2f}",
              str(report.fn_assoc), str(report.id_integ), str(report.ids),
              str(report.mt), str(report.pt), str(report.ml)]
    widths = [max(len(c), len(v)) for c, v in zip(REPORT_COLUMNS, values)]
    head = "  ".join(c.rjust(w) for c, w in zip(REPORT_COLUMNS, widths))
    row = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    prefix = f"{label}\n" if label else ""
    return f"{prefix}{head}\n{row}"
