import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from marktrack import media


def write_frames(root, frames, color_mode="gray", pattern="frame_%06d.png"):
    """Dump an iterable of arrays as a frame directory + manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = list(frames)
    h, w = frames[0].shape[:2]
    for i, arr in enumerate(frames, start=1):
        Image.fromarray(arr).save(root / (pattern % i))
    media.write_manifest(root, len(frames), w, h, color_mode, pattern)
    return root / media.MANIFEST_NAME


@pytest.fixture
def flat_sequence(tmp_path):
    """10 identical 64x64 gray frames."""
    frames = [np.full((64, 64), 40, dtype=np.uint8) for _ in range(10)]
    manifest = write_frames(tmp_path / "flat", frames)
    return media.open_sequence(manifest)
