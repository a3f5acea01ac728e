"""Clip augmentation: temporally consistent spatial transforms plus frame-group shuffling.

One random draw of (crop, flip, grayscale, blur, color jitter) is applied
identically to every frame of a clip. Frame-group shuffling permutes
consecutive groups of g frames and is the generator of temporal negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InputError, Rng, VideoTensor

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugmentPolicy:
    """Augmentation family: probabilities and ranges for one clip view."""

    crop_size: int = 32
    crop_scale: tuple[float, float] = (0.6, 1.0)  # area fraction of the source
    p_gray: float = 0.2
    p_flip: float = 0.5
    p_blur: float = 0.5
    p_color: float = 0.8
    color_jitter_ratio: float = 0.4  # brightness, contrast, saturation
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    temporal_jitter_frames: int = 2

    def violations(self) -> list[str]:
        v = []
        for name in ("p_gray", "p_flip", "p_blur", "p_color"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                v.append(f"{name} must be in [0, 1]")
        if not (0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0):
            v.append("crop_scale must satisfy 0 < min <= max <= 1")
        if self.crop_size < 1:
            v.append("crop_size must be >= 1")
        return v


@dataclass
class GroupPermutation:
    """Permutation over consecutive frame groups of size g (within-group order kept)."""

    g: int
    order: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise InputError(f"order {self.order} is not a permutation")

    @property
    def n_groups(self) -> int:
        return len(self.order)

    def is_identity(self) -> bool:
        return all(i == j for i, j in enumerate(self.order))

    def inverse(self) -> "GroupPermutation":
        inv = [0] * len(self.order)
        for j, i in enumerate(self.order):
            inv[i] = j
        return GroupPermutation(self.g, tuple(inv))


# ---------------------------------------------------------------------------
# spatial ops (all numpy float32, vectorized over frames)
# ---------------------------------------------------------------------------


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense bilinear interpolation matrix [n_out, n_in] (half-pixel centers)."""
    r = np.zeros((n_out, n_in), dtype=np.float32)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = math.floor(src)
        w = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        r[i, lo_c] += 1.0 - w
        r[i, hi_c] += w
    return r


def _resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rh = _resize_matrix(frames.shape[1], out_h)
    rw = _resize_matrix(frames.shape[2], out_w)
    return np.einsum("ih,thwc,jw->tijc", rh, frames, rw, optimize=True)


def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    """1-D Gaussian blur as a dense matrix with replicate borders."""
    half = max(1, math.ceil(2.0 * sigma))  # kernel size = 2*half+1, next odd >= 4 sigma
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    taps = (taps / taps.sum()).astype(np.float32)
    b = np.zeros((n, n), dtype=np.float32)
    for i in range(n):
        for k, tap in zip(range(-half, half + 1), taps):
            b[i, min(max(i + k, 0), n - 1)] += tap
    return b


def _gaussian_blur(frames: np.ndarray, sigma: float) -> np.ndarray:
    bh = _blur_matrix(frames.shape[1], sigma)
    bw = _blur_matrix(frames.shape[2], sigma)
    return np.einsum("ih,thwc,jw->tijc", bh, frames, bw, optimize=True)


def _to_gray(frames: np.ndarray) -> np.ndarray:
    luma = frames @ _LUMA if frames.shape[3] == 3 else frames[..., 0]
    return np.repeat(luma[..., None], frames.shape[3], axis=3)


def _color_jitter(frames: np.ndarray, factors: tuple[float, float, float]) -> np.ndarray:
    """Brightness, contrast, saturation scaling (fixed order, independent factors)."""
    fb, fc, fs = factors
    out = frames * fb
    out = (out - out.mean()) * fc + out.mean()
    if frames.shape[3] == 3:
        gray = _to_gray(out)
        out = gray + (out - gray) * fs
    return out


def apply_policy(clip: VideoTensor, policy: AugmentPolicy, rng: Rng) -> VideoTensor:
    """One random augmentation draw applied identically to every frame.

    Output spatial size is policy.crop_size; values are clamped to [0, 1].
    """
    bad = policy.violations()
    if bad:
        raise InputError("; ".join(bad))
    t, h, w, ch = clip.frames.shape
    if policy.crop_size > h or policy.crop_size > w:
        raise InputError(
            f"crop_size {policy.crop_size} larger than input {h}x{w}"
        )

    # crop box: area fraction in crop_scale, square, uniform position
    area = rng.uniform(policy.crop_scale[0], policy.crop_scale[1])
    side = max(1, min(round(math.sqrt(area * h * w)), h, w))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    do_flip = rng.uniform() < policy.p_flip
    do_color = rng.uniform() < policy.p_color
    jr = policy.color_jitter_ratio
    factors = tuple(rng.uniform(1.0 - jr, 1.0 + jr, size=3))
    do_gray = rng.uniform() < policy.p_gray
    do_blur = rng.uniform() < policy.p_blur
    sigma = float(rng.uniform(policy.blur_sigma[0], policy.blur_sigma[1]))

    out = clip.frames[:, top:top + side, left:left + side, :].astype(np.float32)
    if side != policy.crop_size:
        out = _resize(out, policy.crop_size, policy.crop_size)
    if do_flip:
        out = out[:, :, ::-1, :]
    if do_color:
        out = _color_jitter(out, factors)
    if do_gray:
        out = _to_gray(out)
    if do_blur:
        out = _gaussian_blur(out, sigma)
    out = np.clip(out, 0.0, 1.0, out=np.ascontiguousarray(out))
    return VideoTensor(out, fps=clip.fps)


def jitter_start(start: int, max_offset: int, max_start: int, rng: Rng) -> int:
    """Shift a clip start frame by a uniform offset in [-max_offset, max_offset]."""
    if max_offset == 0:
        return min(max(start, 0), max_start)
    off = int(rng.integers(-max_offset, max_offset + 1))
    return min(max(start + off, 0), max_start)


# ---------------------------------------------------------------------------
# temporal shuffling
# ---------------------------------------------------------------------------


def group_shuffle(clip: VideoTensor, perm: GroupPermutation) -> VideoTensor:
    """Reorder consecutive frame groups of size g; output group j = input group order[j]."""
    t = clip.t
    if t % perm.g != 0:
        raise InputError(f"group size {perm.g} does not divide clip length {t}")
    if t // perm.g != perm.n_groups:
        raise InputError(
            f"permutation over {perm.n_groups} groups, clip has {t // perm.g}"
        )
    grouped = clip.frames.reshape(perm.n_groups, perm.g, *clip.frames.shape[1:])
    return VideoTensor(
        grouped[list(perm.order)].reshape(clip.frames.shape).copy(), fps=clip.fps
    )


def sample_negative_perms(
    n_groups: int, n: int, rng: Rng, g: int = 2
) -> list[GroupPermutation]:
    """n distinct non-identity group permutations, uniform without replacement."""
    available = math.factorial(n_groups) - 1
    if n > available:
        raise InputError(
            f"requested {n} negatives but only {available} non-identity "
            f"permutations of {n_groups} groups exist"
        )
    seen: set[tuple[int, ...]] = set()
    identity = tuple(range(n_groups))
    out = []
    while len(out) < n:
        order = tuple(int(i) for i in rng.permutation(n_groups))
        if order == identity or order in seen:
            continue
        seen.add(order)
        out.append(GroupPermutation(g, order))
    return out
