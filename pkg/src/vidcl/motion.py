"""Motion-strength profiling and probabilistic targeted window sampling.

Motion is measured with a frame-difference proxy: per-pixel magnitude of
consecutive-frame differences, sharpened into an edge map with a Sobel
filter. Each 1-second window gets an amplitude (median frame score, where
a frame score is the median of its top-k edge values), and windows are
sampled from a softmax over amplitudes with temperature beta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import InputError, Rng, VideoTensor

# Pixel budget for the per-frame score at 224x224; scaled by resolution.
_TOPK_REF_PIXELS = 4000
_TOPK_REF_AREA = 224 * 224


@dataclass
class MotionProfile:
    """Per-window motion amplitudes and the sampling distribution over windows."""

    amplitudes: np.ndarray  # m_i >= 0, one per 1-second window
    probabilities: np.ndarray  # p_i > 0, sums to 1
    beta_used: float
    warnings: list[str] = field(default_factory=list)

    @property
    def n_windows(self) -> int:
        return len(self.amplitudes)


def motion_magnitude_field(video: VideoTensor) -> np.ndarray:
    """Channel-mean absolute frame difference, shape [T-1, H, W], values in [0, 1]."""
    if video.t < 2:
        raise InputError("need at least two frames")
    frames = video.frames.astype(np.float64)
    return np.abs(np.diff(frames, axis=0)).mean(axis=3)


def edge_map(fld: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude sqrt(Gx^2 + Gy^2) with replicate border padding."""
    if fld.ndim != 2 or fld.shape[0] < 3 or fld.shape[1] < 3:
        raise InputError(f"field must be at least 3x3, got shape {fld.shape}")
    p = np.pad(fld.astype(np.float64), 1, mode="edge")
    # 3x3 Sobel as cross-correlation: Gx = [[-1,0,1],[-2,0,2],[-1,0,1]], Gy = Gx.T
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return np.sqrt(gx * gx + gy * gy)


def default_top_k(h: int, w: int) -> int:
    """Pixel budget scaled from the 4000-at-224x224 reference."""
    return max(1, round(_TOPK_REF_PIXELS * (h * w) / _TOPK_REF_AREA))


def softmax_weights(amplitudes: np.ndarray, beta: float) -> np.ndarray:
    """exp(m_i/beta) / sum_j exp(m_j/beta); beta = inf gives the uniform distribution."""
    m = np.asarray(amplitudes, dtype=np.float64)
    if math.isinf(beta):
        return np.full(len(m), 1.0 / len(m))
    # subtract the max before dividing: stable, and constant shifts of m
    # cancel in the subtraction rather than surviving as rounding noise
    e = np.exp((m - m.max()) / beta)
    return e / e.sum()


def profile(video: VideoTensor, top_k: int | None = None, beta: float = 5.0) -> MotionProfile:
    """Motion amplitudes per 1-second window plus sampling probabilities.

    Window i spans frames [i*fps, (i+1)*fps); only complete windows count.
    The difference frame between t and t+1 is assigned to window t // fps.
    A top_k larger than H*W is clamped (recorded as a profile warning).
    """
    fps = int(round(video.fps))
    n_windows = video.t // fps
    if n_windows < 1:
        raise InputError(
            f"video spans no full window: {video.t} frames at fps {fps}"
        )
    warnings = []
    if top_k is None:
        top_k = default_top_k(video.h, video.w)
    if top_k < 1:
        raise InputError("top_k must be >= 1")
    n_px = video.h * video.w
    if top_k > n_px:
        warnings.append(f"top_k {top_k} clamped to pixel count {n_px}")
        top_k = n_px

    fld = motion_magnitude_field(video)
    frame_scores = np.empty(fld.shape[0])
    for t in range(fld.shape[0]):
        edges = edge_map(fld[t]).ravel()
        # top-k by value; ties at the cut share the same value so the
        # selected multiset (and its median) is index-order independent
        top = np.sort(edges)[-top_k:]
        frame_scores[t] = np.median(top)

    amplitudes = np.empty(n_windows)
    for i in range(n_windows):
        lo = i * fps
        hi = min((i + 1) * fps, fld.shape[0])
        amplitudes[i] = np.median(frame_scores[lo:hi])

    return MotionProfile(
        amplitudes=amplitudes,
        probabilities=softmax_weights(amplitudes, beta),
        beta_used=beta,
        warnings=warnings,
    )


def sample_window(prof: MotionProfile, rng: Rng) -> int:
    """Draw a window index from the profile's multinomial distribution."""
    return rng.choice_p(prof.probabilities)
