import numpy as np
import pytest

from marktrack import detection, media, tracklets
from marktrack.config import DEFAULT_CONFIG
from marktrack.detection import Detection
from marktrack.errors import InsufficientStatesError
from marktrack.harness import SceneSpec, generate_scene, gt_states, render_target_mask
from marktrack.trackdoc import TrackDocument

import oracles


def disc(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def det_for(blob):
    return Detection(frame=blob.frame, center=blob.centroid, orientation=blob.orientation,
                     length=blob.length, width=blob.width, source_blob=blob.key)


class TestOverlapGraph:
    def test_static_blob_chain(self):
        masks = {t: disc(16, 16, 8, 8, 3) for t in range(1, 11)}
        g = tracklets.build_overlap_graph(masks, list(range(1, 11)))
        assert len(g.blobs) == 10
        assert len(g.edges()) == 9

    def test_merge_has_in_degree_two(self):
        masks = {}
        for t in range(1, 5):
            masks[t] = disc(20, 40, 10, 8 + t, 3) | disc(20, 40, 10, 32 - t, 3)
        masks[5] = disc(20, 40, 10, 20, 6)
        g = tracklets.build_overlap_graph(masks, list(range(1, 6)))
        merged = [n for n in g.blobs if n[0] == 5]
        assert len(merged) == 1
        assert g.in_degree(merged[0]) == 2

    def test_edges_match_bruteforce_intersection(self):
        rng = np.random.default_rng(4)
        masks = {t: rng.random((14, 14)) > 0.78 for t in range(1, 21)}
        g = tracklets.build_overlap_graph(masks, list(range(1, 21)))
        # brute force: blobs overlap iff their pixel sets intersect
        expected = set()
        comps = {t: oracles.components_oracle(masks[t]) for t in masks}
        for t in range(1, 20):
            for a in comps[t]:
                for b in comps[t + 1]:
                    if a & b:
                        expected.add((t, t + 1, min(a), min(b)))
        got = set()
        for u, v in g.edges():
            pa = {tuple(p) for p in g.blobs[u].pixels}
            pb = {tuple(p) for p in g.blobs[v].pixels}
            got.add((u[0], v[0], min(pa), min(pb)))
        assert got == expected


class TestLanes:
    def _graph(self, edges, frames_of):
        """Tiny graph straight from an edge list for rule-level tests."""
        blobs = {}
        succ, pred = {}, {}
        for n, f in frames_of.items():
            blobs[(f, n)] = None
        for a, b in edges:
            u, v = (frames_of[a], a), (frames_of[b], b)
            succ.setdefault(u, []).append(v)
            pred.setdefault(v, []).append(u)
        return tracklets.OverlapGraph(blobs, succ, pred, {}, sorted({f for f in frames_of.values()}))

    def test_simple_chain_single_lane(self):
        g = self._graph([(1, 2), (2, 3)], {1: 1, 2: 2, 3: 3})
        lanes = tracklets.partition_lanes(g)
        assert len(lanes) == 1
        assert [n[1] for n in lanes[0].nodes] == [1, 2, 3]

    def test_merge_breaks_lanes(self):
        # B1, B2 -> C: C has in-degree 2, so no edge into C is lane-internal
        g = self._graph([(1, 3), (2, 3)], {1: 1, 2: 1, 3: 2})
        lanes = tracklets.partition_lanes(g)
        assert sorted(len(l.nodes) for l in lanes) == [1, 1, 1]

    def test_split_breaks_lanes(self):
        # X -> Y, X -> Z: X has out-degree 2
        g = self._graph([(1, 2), (1, 3)], {1: 1, 2: 2, 3: 2})
        lanes = tracklets.partition_lanes(g)
        assert sorted(len(l.nodes) for l in lanes) == [1, 1, 1]

    def test_lanes_partition_every_node(self):
        rng = np.random.default_rng(12)
        masks = {t: rng.random((16, 16)) > 0.75 for t in range(1, 16)}
        g = tracklets.build_overlap_graph(masks, list(range(1, 16)))
        lanes = tracklets.partition_lanes(g)
        seen = [n for lane in lanes for n in lane.nodes]
        assert sorted(seen) == sorted(g.blobs)
        assert len(seen) == len(set(seen))

    def test_no_lane_spans_merge_or_split(self):
        rng = np.random.default_rng(3)
        masks = {t: rng.random((16, 16)) > 0.72 for t in range(1, 16)}
        g = tracklets.build_overlap_graph(masks, list(range(1, 16)))
        for lane in tracklets.partition_lanes(g):
            for u, v in zip(lane.nodes, lane.nodes[1:]):
                assert g.out_degree(u) == 1 and g.in_degree(v) == 1
                assert v[0] == u[0] + 1


class TestBuildTracklets:
    def _lane_scene(self, n_frames=10):
        masks = {t: disc(16, 64, 8, 4 + 3 * t, 2) for t in range(1, n_frames + 1)}
        g = tracklets.build_overlap_graph(masks, list(range(1, n_frames + 1)))
        lanes = tracklets.partition_lanes(g)
        assert len(lanes) == 1
        return g, lanes

    def test_fully_mapped_lane(self):
        g, lanes = self._lane_scene()
        dets = [det_for(g.blobs[n]) for n in lanes[0].nodes]
        doc, discarded = tracklets.build_tracklets(g, lanes, dets)
        assert len(doc.tracklets) == 1
        (t,) = doc.tracklets.values()
        assert len(t.states) == 10
        assert not any(s.interpolated for s in t.states.values())
        assert discarded == []

    def test_minority_lane_discards_detections(self):
        g, lanes = self._lane_scene()
        dets = [det_for(g.blobs[n]) for n in lanes[0].nodes[:4]]
        doc, discarded = tracklets.build_tracklets(g, lanes, dets)
        assert doc.tracklets == {}
        assert len(discarded) == 4

    def test_exact_half_fails_majority(self):
        g, lanes = self._lane_scene()
        dets = [det_for(g.blobs[n]) for n in lanes[0].nodes[:5]]
        doc, _ = tracklets.build_tracklets(g, lanes, dets)
        assert doc.tracklets == {}

    def test_interpolated_states_on_segment(self):
        g, lanes = self._lane_scene()
        nodes = lanes[0].nodes
        picked = [nodes[i] for i in (0, 1, 2, 3, 4, 9)]  # 6 of 10 mapped
        dets = [det_for(g.blobs[n]) for n in picked]
        doc, _ = tracklets.build_tracklets(g, lanes, dets)
        (t,) = doc.tracklets.values()
        interp = [s for s in t.states.values() if s.interpolated]
        assert len(interp) == 4
        a = t.states[5]
        b = t.states[10]
        for s in interp:
            w = (s.frame - a.frame) / (b.frame - a.frame)
            assert s.x == pytest.approx(a.x + w * (b.x - a.x))
            assert s.y == pytest.approx(a.y + w * (b.y - a.y))
            assert min(a.x, b.x) - 1e-9 <= s.x <= max(a.x, b.x) + 1e-9
            assert min(a.y, b.y) - 1e-9 <= s.y <= max(a.y, b.y) + 1e-9


@pytest.fixture(scope="module")
def confidence_setup(tmp_path_factory):
    spec = SceneSpec(targets=5, motion="linear", frames=14, width=220, height=170,
                     noise=1.5, seed=21)
    manifest, gt = generate_scene(tmp_path_factory.mktemp("conf"), spec)
    seq = media.open_sequence(manifest)
    doc = TrackDocument()
    for tid in sorted(gt.targets):
        t = doc.add(tracklets.Tracklet(id=doc.new_id()))
        t.states = gt_states(gt, tid)
    model = tracklets.train_confidence(doc, seq, body_length=spec.body_length, seed=2)
    return seq, gt, doc, model, spec


class TestConfidence:
    def test_positives_score_high(self, confidence_setup):
        seq, gt, doc, model, spec = confidence_setup
        scores = []
        for t in doc.tracklets.values():
            for f in t.frames():
                scores.extend(model.score_states(seq.gray_frame(f), [t.states[f]]))
        assert np.mean(np.array(scores) > 0.5) >= 0.95

    def test_background_scores_low(self, confidence_setup):
        seq, gt, doc, model, spec = confidence_setup
        rng = np.random.default_rng(5)
        scores = []
        for _ in range(40):
            f = int(rng.integers(1, spec.frames + 1))
            s = next(iter(doc.tracklets.values())).states[f].copy()
            # move far from every target row
            s.x = float(rng.uniform(20, spec.width - 20))
            s.y = 8.0
            scores.extend(model.score_states(seq.gray_frame(f), [s]))
        assert np.mean(np.array(scores) < 0.5) >= 0.95

    def test_deterministic_for_fixed_seed(self, confidence_setup):
        seq, gt, doc, model, spec = confidence_setup
        again = tracklets.train_confidence(doc, seq, body_length=spec.body_length, seed=2)
        states = list(doc.tracklets[1].states.values())[:5]
        gray = seq.gray_frame(states[0].frame)
        assert np.array_equal(model.score_states(gray, states),
                              again.score_states(gray, states))

    def test_too_few_states(self, confidence_setup):
        seq, gt, doc, model, spec = confidence_setup
        small = TrackDocument()
        t = small.add(tracklets.Tracklet(id=1))
        t.states = {f: doc.tracklets[1].states[f] for f in list(doc.tracklets[1].states)[:3]}
        with pytest.raises(InsufficientStatesError):
            tracklets.train_confidence(small, seq, body_length=spec.body_length)


class TestFilterTracks:
    def _fake_model(self, value_by_y):
        class Fake:
            def score_states(self, gray, states):
                return np.array([value_by_y(s.y) for s in states])
        return Fake()

    def test_keep_and_drop_threshold(self, confidence_setup):
        seq, gt, doc, model, spec = confidence_setup
        work = doc.copy()
        rows = {t.id: next(iter(t.states.values())).y for t in work.tracklets.values()}
        low_id = min(rows, key=rows.get)

        def score(y):
            return 0.49 if abs(y - rows[low_id]) < 1 else 0.9

        out = tracklets.filter_tracks(work, self._fake_model(score), seq)
        assert low_id not in out.tracklets
        assert len(out.tracklets) == len(doc.tracklets) - 1
        for t in out.tracklets.values():
            assert all(s.confidence == 0.9 for s in t.states.values())

    def test_speckle_track_removed_true_tracks_kept(self, confidence_setup):
        seq, gt, doc, model, spec = confidence_setup
        work = doc.copy()
        fake = tracklets.Tracklet(id=99)
        rng = np.random.default_rng(8)
        for f in range(1, spec.frames + 1):
            fake.states[f] = tracklets.TrackState(
                frame=f, x=float(rng.uniform(30, spec.width - 30)), y=10.0,
                orientation=0.0, length=spec.body_length, width=spec.body_width)
        work.add(fake)
        out = tracklets.filter_tracks(work, model, seq)
        assert 99 not in out.tracklets
        assert set(out.tracklets) == set(doc.tracklets)
