"""Oriented image patches and the appearance fitness built on them.

A pose's patch is sampled in the pose frame (rows run along the body axis,
columns across it) at a fixed resolution, so patches from differently sized
targets are directly comparable.  The fitness of a pose hypothesis is the
complementary normal CDF of its template difference, calibrated by the
difference statistics sampled along the current tracklets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import erfc

from .config import DEFAULT_CONFIG, EngineConfig
from .rng import stream
from .trackdoc import TrackState, Tracklet


@dataclass
class DeltaStats:
    """Mean/std of template absolute differences along confident tracks."""
    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def patch_grid(out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized patch coordinates in [-0.5, 0.5]: (along, across) per cell."""
    u = (np.arange(out_h) + 0.5) / out_h - 0.5
    v = (np.arange(out_w) + 0.5) / out_w - 0.5
    return np.meshgrid(u, v, indexing="ij")


def sample_patches(gray: np.ndarray, poses: np.ndarray, length: float, width: float,
                   out_h: int, out_w: int) -> np.ndarray:
    """Oriented patches for N poses at once.

    poses: (N, 3) array of (x, y, orientation).  Returns (N, out_h, out_w)
    float64 patches; samples beyond the frame clamp to the border pixel.
    """
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    n = poses.shape[0]
    uu, vv = patch_grid(out_h, out_w)
    cos = np.cos(poses[:, 2])[:, None, None]
    sin = np.sin(poses[:, 2])[:, None, None]
    along = uu[None] * length
    across = vv[None] * width
    xs = poses[:, 0][:, None, None] + along * cos - across * sin
    ys = poses[:, 1][:, None, None] + along * sin + across * cos
    flat = map_coordinates(gray, [ys.ravel(), xs.ravel()], order=1, mode="nearest")
    return flat.reshape(n, out_h, out_w)


def extract_patch(gray: np.ndarray, state: TrackState,
                  out_h: int, out_w: int) -> np.ndarray:
    return sample_patches(gray, np.array([[state.x, state.y, state.orientation]]),
                          state.length, state.width, out_h, out_w)[0]


def delta_to_templates(patches: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Min-over-templates mean absolute difference, per patch.

    patches: (N, h, w); templates: (K, h, w) with K >= 1.
    """
    diffs = np.abs(patches[:, None, :, :] - templates[None, :, :, :])
    return diffs.mean(axis=(2, 3)).min(axis=1)


def fitness_from_delta(delta: np.ndarray | float, stats: DeltaStats) -> np.ndarray | float:
    """1 - Phi((delta - mu) / sigma): high when the patch matches its template."""
    z = (np.asarray(delta, dtype=np.float64) - stats.mu) / stats.sigma
    out = 0.5 * erfc(z / np.sqrt(2.0))
    return float(out) if np.isscalar(delta) else out


def template_states(tracklet: Tracklet, count: int) -> list[TrackState]:
    """The tracklet's most confident states, used as appearance templates."""
    ranked = sorted(tracklet.states.values(),
                    key=lambda s: (-s.confidence, s.frame))
    picked = [s for s in ranked if not s.interpolated][:count]
    if not picked:
        picked = ranked[:count]
    return picked


def tracklet_templates(gray_for_frame, tracklet: Tracklet, count: int,
                       out_h: int, out_w: int) -> np.ndarray:
    """Template patch stack (K, h, w) for a tracklet."""
    states = template_states(tracklet, count)
    return np.stack([extract_patch(gray_for_frame(s.frame), s, out_h, out_w)
                     for s in states])


def sample_delta_stats(tracklets: list[Tracklet], gray_for_frame,
                       samples_per_tracklet: int = DEFAULT_CONFIG.delta_samples_per_tracklet,
                       seed: int = 0, cfg: EngineConfig = DEFAULT_CONFIG) -> DeltaStats:
    """Template-difference statistics sampled at random states of each tracklet.

    The sigma is floored (one intensity level) so the fitness CDF stays
    usable on constant-appearance scenes.
    """
    if not tracklets:
        raise ValueError("need at least one tracklet")
    rng = stream(seed, "delta-stats")
    h, w = cfg.appearance_patch_height, cfg.appearance_patch_width
    deltas = []
    for t in sorted(tracklets, key=lambda t: t.id):
        templates = tracklet_templates(gray_for_frame, t, cfg.template_count, h, w)
        frames = t.frames()
        picks = rng.integers(0, len(frames), size=samples_per_tracklet)
        states = [t.states[frames[i]] for i in picks]
        patches = np.stack([extract_patch(gray_for_frame(s.frame), s, h, w) for s in states])
        deltas.append(delta_to_templates(patches, templates))
    samples = np.concatenate(deltas)
    mu = float(samples.mean())
    sigma = float(max(samples.std(), cfg.delta_sigma_floor))
    return DeltaStats(mu=mu, sigma=sigma)
