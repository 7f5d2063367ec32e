"""Frame-sequence ingest and per-frame binary mask storage.

Input is a directory of numbered lossless images (PNG or PGM/PPM) plus a
small JSON manifest; converting videos to frame directories is a separate,
out-of-scope step.  Frames are decoded lazily and cached, so repeated reads
of the same index are byte-identical.  Grayscale conversion uses the
Rec.601 luma weights so downstream masks are reproducible.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FrameIndexError, ManifestError

REC601 = (0.299, 0.587, 0.114)

MANIFEST_NAME = "manifest.json"


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (H, W, 3) uint8 array, as float64 in [0, 255]."""
    r, g, b = REC601
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


@dataclass
class FrameSequence:
    """Random-access handle over a decoded frame directory.

    Frame indices are 1-based and contiguous. Read-only after open; safe
    for concurrent readers.
    """

    root: Path
    frame_count: int
    width: int
    height: int
    color_mode: str  # "gray" or "rgb"
    pattern: str
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def frame_path(self, t: int) -> Path:
        return self.root / (self.pattern % t)

    def read_frame(self, t: int) -> np.ndarray:
        """Decoded pixels of frame t: (H, W) uint8 for gray, (H, W, 3) for rgb."""
        if not 1 <= t <= self.frame_count:
            raise FrameIndexError(f"frame {t} outside [1, {self.frame_count}]")
        with self._lock:
            if t in self._cache:
                return self._cache[t]
        path = self.frame_path(t)
        try:
            with Image.open(path) as im:
                im = im.convert("RGB" if self.color_mode == "rgb" else "L")
                arr = np.asarray(im)
        except FileNotFoundError:
            raise ManifestError(f"frame file missing: {path}")
        except OSError as exc:
            raise ManifestError(f"undecodable frame {path}: {exc}")
        if arr.shape[:2] != (self.height, self.width):
            raise ManifestError(
                f"frame {t} is {arr.shape[1]}x{arr.shape[0]}, "
                f"manifest says {self.width}x{self.height}"
            )
        arr.setflags(write=False)
        with self._lock:
            self._cache[t] = arr
        return arr

    def gray_frame(self, t: int) -> np.ndarray:
        """Frame t as float64 grayscale in [0, 255]."""
        arr = self.read_frame(t)
        if arr.ndim == 2:
            return arr.astype(np.float64)
        return luma(arr)

    def drop_cache(self) -> None:
        with self._lock:
            self._cache.clear()


def write_manifest(root: str | Path, frame_count: int, width: int, height: int,
                   color_mode: str = "gray", pattern: str = "frame_%06d.png") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    doc = {
        "frame_count": frame_count,
        "width": width,
        "height": height,
        "color_mode": color_mode,
        "pattern": pattern,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def open_sequence(manifest_path: str | Path) -> FrameSequence:
    """Open a frame directory via its manifest; no frame is decoded here.

    Validates that the manifest exists, lists at least 2 frames, and that
    the first and last frame files agree with the declared dimensions (the
    full per-frame check happens lazily on read).
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
        frame_count = int(doc["frame_count"])
        width, height = int(doc["width"]), int(doc["height"])
        color_mode = doc.get("color_mode", "gray")
        pattern = doc["pattern"]
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ManifestError(f"malformed manifest {manifest_path}: {exc}")
    if frame_count < 2:
        raise ManifestError(f"manifest lists {frame_count} frames; need at least 2")
    if color_mode not in ("gray", "rgb"):
        raise ManifestError(f"unknown color_mode {color_mode!r}")
    seq = FrameSequence(manifest_path.parent, frame_count, width, height, color_mode, pattern)
    for probe in (1, frame_count):
        path = seq.frame_path(probe)
        if not path.exists():
            raise ManifestError(f"frame file missing: {path}")
        with Image.open(path) as im:
            if im.size != (width, height):
                raise ManifestError(
                    f"frame {probe} is {im.size[0]}x{im.size[1]}, "
                    f"manifest says {width}x{height}"
                )
    return seq


class MaskStore:
    """Per-frame boolean masks persisted as 1-bit PNGs named by frame index.

    One writer per frame index; reads after a write round-trip exactly.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, t: int) -> Path:
        return self.root / f"mask_{t:06d}.png"

    def put(self, t: int, mask: np.ndarray) -> None:
        im = Image.fromarray(np.asarray(mask, dtype=bool))
        im.save(self._path(t), format="PNG")

    def get(self, t: int) -> np.ndarray:
        with Image.open(self._path(t)) as im:
            return np.asarray(im.convert("1"), dtype=bool)

    def has(self, t: int) -> bool:
        return self._path(t).exists()
