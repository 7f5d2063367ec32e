import numpy as np
import pytest

from marktrack import detection, marks, media
from marktrack.config import DEFAULT_CONFIG
from marktrack.errors import DegenerateTrainingError, InsufficientExamplesError
from marktrack.harness import SceneSpec, generate_scene, make_marks, render_target_mask
from marktrack.marks import DerivedParams


def params(area_min=10, area_max=500, ratio_min=1.0, ratio_max=8.0, mark_area=120.0):
    return DerivedParams(area_min=area_min, area_max=area_max, ratio_min=ratio_min,
                         ratio_max=ratio_max, max_targets=5, land_dist=10, join_dist=10,
                         join_margin=10, join_overlap_min=2, motion_sigma=2.0,
                         body_length=20.0, mark_area_mean=mark_area)


class TestExtractBlobs:
    def test_empty_mask(self):
        assert detection.extract_blobs(np.zeros((8, 8), dtype=bool), 1) == []

    def test_rectangle_moments(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[5:9, 4:14] = True  # 10 wide, 4 tall
        (b,) = detection.extract_blobs(mask, 3)
        assert b.area == 40
        assert b.frame == 3
        assert abs(b.orientation) < 1e-9
        assert b.length == pytest.approx(10.0, rel=0.10)
        assert b.width == pytest.approx(4.0, rel=0.10)
        assert b.centroid == (pytest.approx(8.5), pytest.approx(6.5))

    def test_two_discs(self):
        mask = np.zeros((16, 32), dtype=bool)
        yy, xx = np.mgrid[0:16, 0:32]
        mask |= (yy - 8) ** 2 + (xx - 7) ** 2 <= 9
        mask |= (yy - 8) ** 2 + (xx - 24) ** 2 <= 9
        assert len(detection.extract_blobs(mask, 1)) == 2

    def test_length_never_below_width(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            mask = rng.random((15, 15)) > 0.6
            for b in detection.extract_blobs(mask, 1):
                assert b.length >= b.width > 0


class TestGate:
    def _blob(self, area, length, width):
        return detection.Blob(frame=1, comp_id=1, pixels=np.zeros((area, 2), dtype=int),
                              centroid=(5.0, 5.0), area=area, orientation=0.0,
                              length=length, width=width)

    def test_small_area_excluded(self):
        assert detection.gate([self._blob(5, 5, 2)], params(area_min=10)) == []

    def test_all_pass_identity(self):
        blobs = [self._blob(50, 10, 4), self._blob(100, 20, 5)]
        assert detection.gate(blobs, params()) == blobs

    def test_mixed_fixture(self):
        blobs = [
            self._blob(50, 10, 4),    # ok
            self._blob(5, 4, 2),      # area too small
            self._blob(600, 30, 15),  # area too large
            self._blob(80, 45, 5),    # ratio 9 too elongated
            self._blob(120, 12, 6),   # ok
            self._blob(200, 21, 7),   # ok
        ]
        assert len(detection.gate(blobs, params())) == 3


@pytest.fixture(scope="module")
def capsule_scene(tmp_path_factory):
    spec = SceneSpec(targets=5, motion="linear", frames=12, width=200, height=160,
                     noise=1.5, seed=11)
    manifest, gt = generate_scene(tmp_path_factory.mktemp("scene"), spec)
    seq = media.open_sequence(manifest)
    return seq, gt, spec


def scene_masks(seq, gt, spec):
    masks = {}
    for t in range(1, spec.frames + 1):
        m = np.zeros((spec.height, spec.width), dtype=bool)
        for frames in gt.targets.values():
            if t in frames:
                m |= render_target_mask(spec.width, spec.height, frames[t])
        masks[t] = m
    return masks


def scene_params(seq, gt, marked):
    mfs = marks.group_marks(make_marks(gt, marked))
    return marks.derive_params(mfs, seq.width, seq.height), mfs


class TestClassifier:
    def test_capsules_vs_speckles_heldout(self, capsule_scene, tmp_path):
        seq, gt, spec = capsule_scene
        masks = scene_masks(seq, gt, spec)
        p, mfs = scene_params(seq, gt, [1, 6, 12])
        blobs_by_frame = {t: detection.extract_blobs(masks[t], t) for t in masks}
        clf = detection.train_classifier(mfs, blobs_by_frame, seq, p, seed=3)
        # held-out frames: every true blob should classify positive
        hits = total = 0
        for t in (3, 9):
            gray = seq.gray_frame(t)
            for b in detection.gate(blobs_by_frame[t], p):
                hits += clf.classify_blob(gray, b)
                total += 1
        assert total >= 8
        assert hits / total >= 0.9

    def test_insufficient_examples(self, capsule_scene):
        seq, gt, spec = capsule_scene
        p, mfs = scene_params(seq, gt, [1, 12])
        with pytest.raises(InsufficientExamplesError):
            detection.train_classifier(mfs, {t: [] for t in (1, 12)}, seq, p)

    def test_degenerate_identical_sets(self, capsule_scene, monkeypatch):
        seq, gt, spec = capsule_scene
        masks = scene_masks(seq, gt, spec)
        p, mfs = scene_params(seq, gt, [1, 6, 12])
        blobs_by_frame = {t: detection.extract_blobs(masks[t], t) for t in masks}
        same = np.ones(36, dtype=np.float64)
        monkeypatch.setattr(detection, "blob_descriptor", lambda *a, **k: same)
        monkeypatch.setattr(detection, "_descriptor", lambda *a, **k: same)
        with pytest.raises(DegenerateTrainingError):
            detection.train_classifier(mfs, blobs_by_frame, seq, p, seed=3)


class TestDetect:
    def test_small_target_bypass(self, capsule_scene):
        seq, gt, spec = capsule_scene
        masks = scene_masks(seq, gt, spec)
        p, mfs = scene_params(seq, gt, [1, 12])
        small = DerivedParams(**{**p.to_json(), "mark_area_mean": 30.0})

        class RejectAll:
            def predict(self, desc):
                return np.zeros(len(np.atleast_2d(desc)), dtype=bool)

        dets = detection.detect(seq, masks, small, RejectAll())
        gated = sum(len(detection.gate(detection.extract_blobs(masks[t], t), small))
                    for t in masks)
        assert len(dets) == gated > 0

    def test_rejecting_classifier_yields_nothing(self, capsule_scene):
        seq, gt, spec = capsule_scene
        masks = scene_masks(seq, gt, spec)
        p, _ = scene_params(seq, gt, [1, 12])
        assert p.mark_area_mean >= 50

        class RejectAll:
            def predict(self, desc):
                return np.zeros(len(np.atleast_2d(desc)), dtype=bool)

        assert detection.detect(seq, masks, p, RejectAll()) == []

    def test_five_targets_per_frame(self, capsule_scene):
        seq, gt, spec = capsule_scene
        masks = scene_masks(seq, gt, spec)
        p, mfs = scene_params(seq, gt, [1, 6, 12])
        blobs_by_frame = {t: detection.extract_blobs(masks[t], t) for t in masks}
        clf = detection.train_classifier(mfs, blobs_by_frame, seq, p, seed=3)
        dets = detection.detect(seq, masks, p, clf)
        per_frame = {t: 0 for t in masks}
        for d in dets:
            per_frame[d.frame] += 1
        assert all(v == 5 for v in per_frame.values())

    def test_frame_order_independent(self, capsule_scene):
        seq, gt, spec = capsule_scene
        masks = scene_masks(seq, gt, spec)
        p, _ = scene_params(seq, gt, [1, 12])
        fwd = detection.detect(seq, masks, p, None)
        rev = detection.detect(seq, masks, p, None, frames=list(range(spec.frames, 0, -1)))
        assert sorted(map(repr, fwd)) == sorted(map(repr, rev))

    def test_every_detection_passed_gate(self, capsule_scene):
        seq, gt, spec = capsule_scene
        masks = scene_masks(seq, gt, spec)
        p, _ = scene_params(seq, gt, [1, 12])
        for d in detection.detect(seq, masks, p, None):
            ratio = d.length / d.width
            area = len(detection.extract_blobs(masks[d.frame], d.frame)[d.source_blob[1] - 1].pixels)
            assert p.area_min <= area <= p.area_max
            assert p.ratio_min <= ratio <= p.ratio_max
