"""Blob extraction, mark-derived gating, and the patch classifier.

Refined foreground components become region proposals; area and
aspect-ratio gates (derived from the marks) cut obvious noise, and a linear
SVM over HOG descriptors of the oriented, scale-normalized patch decides
the rest.  Scenes whose mean mark area is below the small-target limit
bypass the classifier entirely: at that scale the descriptor carries no
signal, so every gated blob is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.feature import hog
from sklearn.svm import LinearSVC

from .appearance import sample_patches
from .config import DEFAULT_CONFIG, EngineConfig
from .errors import DegenerateTrainingError, InsufficientExamplesError
from .foreground import FOUR_CONN
from .marks import DerivedParams, MarkedFrame, rasterize_mark
from .media import FrameSequence
from .rng import stream

PATCH_CONTEXT = 1.5  # patch spans this multiple of the body extent


@dataclass
class Blob:
    frame: int
    comp_id: int
    pixels: np.ndarray        # (n, 2) array of (y, x)
    centroid: tuple[float, float]
    area: int
    orientation: float        # radians, axial (mod pi)
    length: float
    width: float

    @property
    def key(self) -> tuple[int, int]:
        return (self.frame, self.comp_id)


@dataclass
class Detection:
    frame: int
    center: tuple[float, float]
    orientation: float
    length: float
    width: float
    source_blob: tuple[int, int]
    confidence: float = 0.0


def label_mask(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(mask, structure=FOUR_CONN)


def extract_blobs(mask: np.ndarray, frame: int) -> list[Blob]:
    """One blob per 4-connected component; pose from second image moments.

    Pixels are treated as unit squares (the 1/12 variance correction), so an
    axis-aligned w-by-h rectangle reports length h and width w exactly.
    """
    labels, n = label_mask(mask.astype(bool))
    blobs = []
    for comp_id in range(1, n + 1):
        ys, xs = np.nonzero(labels == comp_id)
        area = len(ys)
        cx, cy = float(xs.mean()), float(ys.mean())
        mxx = float(((xs - cx) ** 2).mean()) + 1.0 / 12.0
        myy = float(((ys - cy) ** 2).mean()) + 1.0 / 12.0
        mxy = float(((xs - cx) * (ys - cy)).mean())
        common = 0.5 * (mxx + myy)
        diff = 0.5 * (mxx - myy)
        radius = float(np.hypot(diff, mxy))
        lam1, lam2 = common + radius, max(common - radius, 0.0)
        orientation = 0.5 * float(np.arctan2(2.0 * mxy, mxx - myy))
        blobs.append(Blob(
            frame=frame, comp_id=comp_id,
            pixels=np.stack([ys, xs], axis=1),
            centroid=(cx, cy), area=area,
            orientation=orientation,
            length=float(np.sqrt(12.0 * lam1)),
            width=float(np.sqrt(12.0 * lam2)),
        ))
    return blobs


def gate(blobs: list[Blob], params: DerivedParams) -> list[Blob]:
    """Keep blobs inside the mark-derived area and aspect-ratio ranges."""
    out = []
    for b in blobs:
        ratio = b.length / max(b.width, 1e-9)
        if params.area_min <= b.area <= params.area_max and \
                params.ratio_min <= ratio <= params.ratio_max:
            out.append(b)
    return out


# ---------------------------------------------------------------------------
# classifier


def _descriptor(gray: np.ndarray, x: float, y: float, orientation: float,
                length: float, width: float, cfg: EngineConfig) -> np.ndarray:
    patch = sample_patches(gray, np.array([[x, y, orientation]]),
                           PATCH_CONTEXT * length, PATCH_CONTEXT * width,
                           cfg.patch_height, cfg.patch_width)[0]
    return hog(patch, orientations=cfg.hog_bins,
               pixels_per_cell=(cfg.hog_cell, cfg.hog_cell),
               cells_per_block=(2, 2), block_norm="L2-Hys", feature_vector=True)


def blob_descriptor(gray: np.ndarray, blob: Blob, cfg: EngineConfig = DEFAULT_CONFIG) -> np.ndarray:
    return _descriptor(gray, blob.centroid[0], blob.centroid[1], blob.orientation,
                       blob.length, blob.width, cfg)


@dataclass
class BlobClassifier:
    svm: LinearSVC
    cfg: EngineConfig = field(default_factory=lambda: DEFAULT_CONFIG)

    def predict(self, descriptors: np.ndarray) -> np.ndarray:
        return self.svm.decision_function(np.atleast_2d(descriptors)) > 0

    def classify_blob(self, gray: np.ndarray, blob: Blob) -> bool:
        return bool(self.predict(blob_descriptor(gray, blob, self.cfg))[0])


def train_classifier(marked_frames: list[MarkedFrame], blobs_by_frame: dict[int, list[Blob]],
                     seq: FrameSequence, params: DerivedParams, seed: int = 0,
                     cfg: EngineConfig = DEFAULT_CONFIG) -> BlobClassifier:
    """Train the blob classifier from the marks.

    Positives: gated blobs on marked frames whose centroid falls inside a
    mark region.  Negatives: gated blobs touching no mark, padded with
    random background patches when the scene is too clean to supply enough.
    """
    w, h = seq.width, seq.height
    pos, neg = [], []
    rng = stream(seed, "svm-train")
    for mf in marked_frames:
        if not mf.marks:
            continue
        union = np.zeros((h, w), dtype=bool)
        for m in mf.marks:
            union |= rasterize_mark(m, w, h)[0]
        gray = seq.gray_frame(mf.frame)
        for b in gate(blobs_by_frame.get(mf.frame, []), params):
            cx = int(round(b.centroid[0]))
            cy = int(round(b.centroid[1]))
            inside = 0 <= cx < w and 0 <= cy < h and union[cy, cx]
            (pos if inside else neg).append(blob_descriptor(gray, b, cfg))

    if len(pos) < cfg.min_train_examples:
        raise InsufficientExamplesError(
            f"{len(pos)} positive examples (< {cfg.min_train_examples}); "
            "run detection in gate-only mode")
    # pad negatives with random background patches
    typical_len = params.body_length
    typical_wid = max(2.0, typical_len / max(params.ratio_min, 1.0) / 2.0)
    marked = [mf for mf in marked_frames if mf.marks]
    while len(neg) < cfg.min_train_examples:
        mf = marked[int(rng.integers(0, len(marked)))]
        gray = seq.gray_frame(mf.frame)
        union = np.zeros((h, w), dtype=bool)
        for m in mf.marks:
            union |= rasterize_mark(m, w, h)[0]
        x = float(rng.uniform(0, w))
        y = float(rng.uniform(0, h))
        if union[min(h - 1, int(y)), min(w - 1, int(x))]:
            continue
        neg.append(_descriptor(gray, x, y, float(rng.uniform(0, np.pi)),
                               typical_len, typical_wid, cfg))

    x_pos = np.array(pos)
    x_neg = np.array(neg)
    pos_rows = {row.tobytes() for row in x_pos}
    neg_rows = {row.tobytes() for row in x_neg}
    if pos_rows == neg_rows:
        raise DegenerateTrainingError("positive and negative descriptor sets are identical")

    x = np.vstack([x_pos, x_neg])
    y = np.concatenate([np.ones(len(x_pos)), np.zeros(len(x_neg))])
    svm = LinearSVC(C=cfg.svm_c, dual=True, max_iter=20000, tol=1e-5, random_state=0)
    svm.fit(x, y)
    return BlobClassifier(svm, cfg)


def detect(seq: FrameSequence, masks, params: DerivedParams,
           classifier: BlobClassifier | None,
           cfg: EngineConfig = DEFAULT_CONFIG,
           frames: list[int] | None = None) -> list[Detection]:
    """Per-frame detections from refined masks.

    ``masks`` maps frame index to a boolean mask (any mapping or callable).
    Frames are independent: processing order cannot change the result.
    """
    get_mask = masks if callable(masks) else masks.__getitem__
    frame_list = frames if frames is not None else range(1, seq.frame_count + 1)
    bypass = params.mark_area_mean < cfg.small_target_area or classifier is None
    out: list[Detection] = []
    for t in frame_list:
        blobs = gate(extract_blobs(get_mask(t), t), params)
        if not blobs:
            continue
        if bypass:
            kept = blobs
        else:
            gray = seq.gray_frame(t)
            desc = np.array([blob_descriptor(gray, b, cfg) for b in blobs])
            flags = classifier.predict(desc)
            kept = [b for b, ok in zip(blobs, flags) if ok]
        out.extend(Detection(frame=t, center=b.centroid, orientation=b.orientation,
                             length=b.length, width=b.width, source_blob=b.key)
                   for b in kept)
    return out
