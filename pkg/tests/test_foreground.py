import numpy as np
import pytest

from marktrack import foreground as fg
from marktrack import marks, media
from marktrack.config import DEFAULT_CONFIG
from marktrack.errors import MarkTrackError

import oracles
from conftest import write_frames


def disc_mask(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


class TestBackground:
    def test_static_scene(self, flat_sequence):
        bg = fg.build_background(flat_sequence, 5)
        assert np.allclose(bg, 40.0)

    def test_moving_disc_median(self, tmp_path):
        frames = []
        for i in range(11):
            f = np.full((24, 48), 30, dtype=np.uint8)
            f[disc_mask(24, 48, 12, 4 + 4 * i, 3)] = 200
            frames.append(f)
        seq = media.open_sequence(write_frames(tmp_path, frames))
        bg = fg.build_background(seq, 11)
        stack = np.stack([f.astype(float) for f in frames])
        expected = np.median(stack, axis=0)
        assert np.array_equal(bg, expected)
        # each pixel is occupied by the disc in far fewer than 6 of 11 samples
        assert np.allclose(bg, 30.0)

    def test_too_few_samples(self, flat_sequence):
        with pytest.raises(MarkTrackError):
            fg.build_background(flat_sequence, 2)


class TestSubtract:
    def test_identical_frame_empty_mask(self):
        bg = np.full((8, 8), 77.0)
        model = fg.BackgroundModel(bg, fg_threshold=10)
        assert not fg.subtract(bg.copy(), model).any()

    def test_uniform_offset_full_mask(self):
        bg = np.full((8, 8), 50.0)
        model = fg.BackgroundModel(bg, fg_threshold=30)
        assert fg.subtract(bg + 50, model).all()

    def test_disc_recovered_exactly(self):
        bg = np.full((32, 32), 60.0)
        frame = bg.copy()
        d = disc_mask(32, 32, 16, 16, 6)
        frame[d] += 80
        model = fg.BackgroundModel(bg, fg_threshold=40)
        got = fg.subtract(frame, model)
        expected = np.abs(frame - bg) > 40  # per-pixel oracle
        assert (got == expected).all()
        assert (got == d).all()

    def test_dimension_mismatch(self):
        model = fg.BackgroundModel(np.zeros((4, 4)))
        with pytest.raises(MarkTrackError):
            fg.subtract(np.zeros((5, 5)), model)


def _mark(frame, x0, y0, x1, y1, brush):
    return marks.UserMark(frame, (x0, y0), ((x0 + x1) / 2, (y0 + y1) / 2), (x1, y1), brush)


class TestTuneThreshold:
    def _fixture(self, tmp_path):
        h, w = 32, 48
        bg = np.full((h, w), 50, dtype=np.uint8)
        m = _mark(2, 8.0, 10.0, 28.0, 10.0, 5)
        mm = marks.rasterize_mark(m, w, h)[0]
        frame = bg.astype(int)
        idx = np.argwhere(mm)
        for k, (y, x) in enumerate(idx):
            frame[y, x] += 61 if k % 2 == 0 else 100
        # background noise floor: differences of at most 20
        frame[0, 0] += 20
        frame[h - 1, w - 1] -= 15
        frames = [bg, np.clip(frame, 0, 255).astype(np.uint8), bg]
        seq = media.open_sequence(write_frames(tmp_path, frames))
        return seq, [marks.MarkedFrame(2, [m])]

    def test_tie_breaks_to_largest_perfect_threshold(self, tmp_path):
        seq, mfs = self._fixture(tmp_path)
        bg = fg.build_background(seq, 3)
        assert fg.tune_threshold(mfs, bg, seq) == 60

    def test_matches_exhaustive_oracle(self, tmp_path):
        seq, mfs = self._fixture(tmp_path)
        bg = fg.build_background(seq, 3)
        union = marks.rasterize_mark(mfs[0].marks[0], seq.width, seq.height)[0]
        diff = np.abs(seq.gray_frame(2) - bg)
        best_t, best_f1 = 1, -1.0
        for t in range(1, 256):
            pred = diff > t
            tp = (pred & union).sum()
            fp = (pred & ~union).sum()
            fn = (~pred & union).sum()
            f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
            if f1 >= best_f1:
                best_f1, best_t = f1, t
        got = fg.tune_threshold(mfs, bg, seq)
        assert abs(got - best_t) <= 5
        assert got == best_t

    def test_no_marks_rejected(self, flat_sequence):
        bg = fg.build_background(flat_sequence, 3)
        with pytest.raises(MarkTrackError):
            fg.tune_threshold([marks.MarkedFrame(1, [])], bg, flat_sequence)


class TestRefine:
    def test_identity_params(self):
        rng = np.random.default_rng(3)
        mask = rng.random((20, 20)) > 0.7
        out = fg.refine(mask, fg.RefineParams(0, 0, 0, 0))
        assert (out == mask).all()

    def test_small_blob_removed(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[4, 4:7] = True  # 3-pixel blob
        out = fg.refine(mask, fg.RefineParams(area_pre=5))
        assert not out.any()

    def test_closing_bridges_nearby_blobs(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[6:10, 2:6] = True
        mask[6:10, 8:12] = True  # 2 px apart
        out = fg.refine(mask, fg.RefineParams(close_size=2))
        assert (out == oracles.closing_oracle(mask, 2)).all()
        assert len(oracles.components_oracle(out)) == 1

    def test_pipeline_matches_bruteforce(self):
        rng = np.random.default_rng(11)
        for _ in range(6):
            mask = rng.random((18, 22)) > 0.72
            p = fg.RefineParams(area_pre=int(rng.integers(0, 4)),
                                majority_reps=int(rng.integers(0, 3)),
                                close_size=int(rng.integers(0, 3)),
                                area_post=int(rng.integers(0, 4)))
            got = fg.refine(mask, p)
            expect = oracles.area_filter_oracle(mask, p.area_pre)
            expect = oracles.majority_oracle(expect, p.majority_reps)
            expect = oracles.closing_oracle(expect, p.close_size)
            expect = oracles.area_filter_oracle(expect, p.area_post)
            assert (got == expect).all(), p


class TestFgLoss:
    def _marked(self):
        m1 = _mark(1, 4.0, 5.0, 16.0, 5.0, 3)
        m2 = _mark(1, 4.0, 20.0, 16.0, 20.0, 3)
        return marks.MarkedFrame(1, [m1, m2])

    def test_perfect_segmentation(self):
        mf = self._marked()
        union = np.zeros((28, 24), dtype=bool)
        for m in mf.marks:
            union |= marks.rasterize_mark(m, 24, 28)[0]
        b = fg.fg_loss(union, mf)
        assert (b.over_seg, b.under_seg, b.incorrect) == (0, 0, 0)
        assert b.loss == pytest.approx(-1.0)

    def test_empty_mask_all_missed(self):
        mf = self._marked()
        b = fg.fg_loss(np.zeros((28, 24), dtype=bool), mf)
        total = sum(marks.rasterize_mark(m, 24, 28)[0].sum() for m in mf.marks)
        assert b.under_seg == total
        assert b.loss == pytest.approx(1.0)

    def test_component_spanning_two_marks(self):
        mf = self._marked()
        merged = np.zeros((28, 24), dtype=bool)
        merged[3:23, 3:18] = True  # touches both marks
        b = fg.fg_loss(merged, mf)
        assert b.under_seg >= merged.sum()
        assert b.correct == 0

    def test_breakdown_counts_consistent(self):
        rng = np.random.default_rng(5)
        mf = self._marked()
        union = np.zeros((28, 24), dtype=bool)
        for m in mf.marks:
            union |= marks.rasterize_mark(m, 24, 28)[0]
        for _ in range(5):
            refined = rng.random((28, 24)) > 0.8
            b = fg.fg_loss(refined, mf)
            missed = int((union & ~refined).sum())
            assert b.correct + b.over_seg + b.incorrect + (b.under_seg - missed) == refined.sum()


class TestPsoTune:
    def _scene(self, tmp_path, speckles):
        h, w = 40, 56
        bg = np.full((h, w), 40, dtype=np.uint8)
        m1 = _mark(2, 8.0, 10.0, 26.0, 10.0, 5)
        m2 = _mark(2, 14.0, 28.0, 40.0, 28.0, 5)
        frame = bg.astype(int)
        for m in (m1, m2):
            frame[marks.rasterize_mark(m, w, h)[0]] += 80
        rng = np.random.default_rng(9)
        for _ in range(speckles):
            y, x = rng.integers(0, h), rng.integers(0, w)
            if frame[y, x] == 40:
                frame[y, x] += 80
        frames = [bg, np.clip(frame, 0, 255).astype(np.uint8), bg]
        seq = media.open_sequence(write_frames(tmp_path, frames))
        model = fg.BackgroundModel(fg.build_background(seq, 3), fg_threshold=40)
        return seq, model, [marks.MarkedFrame(2, [m1, m2])]

    def test_never_worse_than_identity(self, tmp_path):
        seq, model, mfs = self._scene(tmp_path, speckles=0)
        cfg = DEFAULT_CONFIG.override(pso_particles=12, pso_iterations=10)
        res = fg.pso_tune(mfs, model, seq, area_max=400, body_length=20, seed=1, cfg=cfg)
        identity = np.mean([fg.fg_loss(fg.subtract(seq.gray_frame(mf.frame), model), mf).loss
                            for mf in mfs])
        assert res.loss <= identity + 1e-12

    def test_salt_noise_learns_area_filter(self, tmp_path):
        seq, model, mfs = self._scene(tmp_path, speckles=30)
        cfg = DEFAULT_CONFIG.override(pso_particles=20, pso_iterations=20)
        res = fg.pso_tune(mfs, model, seq, area_max=400, body_length=20, seed=2, cfg=cfg)
        p0 = np.mean([fg.fg_loss(fg.subtract(seq.gray_frame(mf.frame), model), mf).loss
                      for mf in mfs])
        assert res.loss <= p0
        # speckles are single pixels: some minimum-area filter must be active
        assert res.params.area_pre >= 2 or res.params.area_post >= 2

        # coarse lattice over the search box can do no better
        lattice_best = min(
            np.mean([fg.fg_loss(fg.refine(fg.subtract(seq.gray_frame(mf.frame), model),
                                          fg.RefineParams(a, mj, c, ap)), mf).loss
                     for mf in mfs])
            for a in (0, 2, 40) for mj in (0, 1) for c in (0, 1) for ap in (0, 2))
        assert res.loss <= lattice_best + 1e-12

    def test_deterministic_and_monotone(self, tmp_path):
        seq, model, mfs = self._scene(tmp_path, speckles=10)
        cfg = DEFAULT_CONFIG.override(pso_particles=8, pso_iterations=8)
        a = fg.pso_tune(mfs, model, seq, 400, 20, seed=5, cfg=cfg)
        b = fg.pso_tune(mfs, model, seq, 400, 20, seed=5, cfg=cfg)
        assert a.params == b.params and a.loss == b.loss
        assert all(y <= x + 1e-15 for x, y in zip(a.best_history, a.best_history[1:]))
