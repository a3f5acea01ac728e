"""Procedural sprite videos with decoupled motion and appearance cues.

MOTION datasets encode the class purely in the direction of sprite travel:
the start position is uniform on a torus and motion wraps around, so the
pixel distribution of any single frame is identical across classes. Sprite
shape, color, size, speed and background texture are per-video nuisances.
APPEARANCE datasets are the complement: the class is the sprite shape and
the motion direction is random.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import InputError, Rng, VideoTensor

MOTION = "MOTION"
APPEARANCE = "APPEARANCE"

_SHAPES = ("disc", "square", "triangle", "diamond")

# triangle half-plane normals (unit vectors, equilateral, apex up in image coords)
_TRI_NORMALS = np.array(
    [[math.cos(a), math.sin(a)] for a in (math.pi / 2, math.pi * 7 / 6, math.pi * 11 / 6)]
)


@dataclass
class DatasetSpec:
    """What to generate: benchmark kind, size, and nuisance ranges."""

    kind: str = MOTION
    n_videos: int = 512
    video_length_frames: int = 24
    resolution: int = 32
    n_classes: int = 4
    fps: float = 8.0
    sprite_radius: tuple[float, float] = (4.0, 6.0)
    speed: tuple[float, float] = (1.5, 3.0)  # pixels per frame, per window
    background_amplitude: float = 0.15
    seed: int = 0

    def violations(self) -> list[str]:
        v = []
        if self.kind not in (MOTION, APPEARANCE):
            v.append(f"kind must be {MOTION} or {APPEARANCE}")
        if self.n_classes < 2:
            v.append("n_classes must be >= 2")
        if self.kind == APPEARANCE and self.n_classes > len(_SHAPES):
            v.append(f"APPEARANCE supports at most {len(_SHAPES)} classes")
        if self.n_videos < 1:
            v.append("n_videos must be >= 1")
        if self.video_length_frames < int(round(self.fps)):
            v.append("video must span at least one full 1-second window")
        min_res = self.min_resolution()
        if self.resolution < min_res:
            v.append(
                f"resolution {self.resolution} too small to render sprites; "
                f"need at least {min_res}"
            )
        if not (0 < self.sprite_radius[0] <= self.sprite_radius[1]):
            v.append("sprite_radius range must satisfy 0 < min <= max")
        if not (0 <= self.speed[0] <= self.speed[1]):
            v.append("speed range must satisfy 0 <= min <= max")
        return v

    def min_resolution(self) -> int:
        return int(math.ceil(4 * self.sprite_radius[1]))

    def class_names(self) -> list[str]:
        if self.kind == APPEARANCE:
            return list(_SHAPES[: self.n_classes])
        return [f"dir{round(math.degrees(self._class_angle(k)))}" for k in range(self.n_classes)]

    def _class_angle(self, label: int) -> float:
        return 2.0 * math.pi * label / self.n_classes


@dataclass
class SyntheticSample:
    """One generated video with its label and per-window ground-truth motion."""

    video: VideoTensor
    label: int
    motion_ground_truth: np.ndarray  # pixels per frame, one entry per window


class Dataset:
    """In-memory sequence of samples plus the spec that produced them."""

    def __init__(self, samples: list[SyntheticSample], spec: DatasetSpec):
        self.samples = samples
        self.spec = spec

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> SyntheticSample:
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _sprite_coverage(shape: str, dx: np.ndarray, dy: np.ndarray, radius: float) -> np.ndarray:
    """Anti-aliased coverage in [0,1] from a signed distance field (1 px ramp)."""
    if shape == "disc":
        d = np.hypot(dx, dy)
    elif shape == "square":
        d = np.maximum(np.abs(dx), np.abs(dy))
    elif shape == "diamond":
        d = (np.abs(dx) + np.abs(dy)) / math.sqrt(2.0)
    elif shape == "triangle":
        d = np.max(
            dx[..., None] * _TRI_NORMALS[:, 0] + dy[..., None] * _TRI_NORMALS[:, 1],
            axis=-1,
        ) * 2.0  # inradius is half the nominal radius, rescale to comparable size
    else:
        raise InputError(f"unknown sprite shape {shape!r}")
    return np.clip(radius + 0.5 - d, 0.0, 1.0)


def _textured_background(size: int, amplitude: float, rng: Rng) -> np.ndarray:
    """Static smooth texture: a few random low-frequency waves per channel."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    bg = np.full((size, size, 3), 0.35)
    for c in range(3):
        for _ in range(3):
            fx, fy = rng.integers(1, 4, size=2)
            phase = rng.uniform(0, 2 * math.pi)
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            bg[:, :, c] += (
                amplitude / 3.0
                * np.sin(2 * math.pi * (fx * xx + sign * fy * yy) / size + phase)
            )
    return np.clip(bg, 0.0, 1.0)


def render_moving_sprite(
    size: int,
    n_frames: int,
    fps: int,
    shape: str,
    radius: float,
    color: np.ndarray,
    start: tuple[float, float],
    direction: float,
    window_speeds: np.ndarray,
    background: np.ndarray,
) -> np.ndarray:
    """Render frames [T, size, size, 3] of one sprite on a static background.

    The sprite moves along `direction` (radians, y measured downward so
    angle pi/2 moves up) at window_speeds[t // fps] pixels per frame,
    wrapping around the borders. Output is quantized to 256 levels.
    """
    vx, vy = math.cos(direction), -math.sin(direction)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    frames = np.empty((n_frames, size, size, 3), dtype=np.float32)
    cx, cy = start
    for t in range(n_frames):
        # toroidal offsets from sprite center
        dx = (xx - cx + size / 2.0) % size - size / 2.0
        dy = (yy - cy + size / 2.0) % size - size / 2.0
        cov = _sprite_coverage(shape, dx, dy, radius)[..., None]
        frames[t] = background * (1.0 - cov) + color * cov
        speed = window_speeds[min(t // fps, len(window_speeds) - 1)]
        cx = (cx + speed * vx) % size
        cy = (cy + speed * vy) % size
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)


def _render_one(spec: DatasetSpec, label: int, rng: Rng) -> SyntheticSample:
    size = spec.resolution
    fps = int(round(spec.fps))
    n_windows = spec.video_length_frames // fps

    if spec.kind == MOTION:
        shape = _SHAPES[int(rng.integers(0, len(_SHAPES)))]
        direction = spec._class_angle(label)
    else:
        shape = _SHAPES[label]
        direction = rng.uniform(0, 2 * math.pi)

    radius = float(rng.uniform(*spec.sprite_radius))
    color = rng.uniform(0.55, 1.0, size=3)
    background = _textured_background(size, spec.background_amplitude, rng)
    start = (rng.uniform(0, size), rng.uniform(0, size))
    window_speeds = rng.uniform(spec.speed[0], spec.speed[1], size=n_windows)

    frames = render_moving_sprite(
        size, spec.video_length_frames, fps, shape, radius, color,
        start, direction, window_speeds, background,
    )
    return SyntheticSample(
        video=VideoTensor(frames, fps=spec.fps),
        label=label,
        motion_ground_truth=window_speeds.copy(),
    )


def generate(spec: DatasetSpec, rng: Rng | None = None) -> Dataset:
    """Generate a dataset; deterministic given (spec, spec.seed).

    Each video renders from its own forked stream, so per-video work could
    run in parallel without changing the output.
    """
    bad = spec.violations()
    if bad:
        raise InputError("; ".join(bad))
    master = rng if rng is not None else Rng(spec.seed)
    labels = [i % spec.n_classes for i in range(spec.n_videos)]
    children = [master.fork() for _ in range(spec.n_videos)]
    samples = [_render_one(spec, lab, child) for lab, child in zip(labels, children)]
    return Dataset(samples, spec)


def iterate(
    dataset: Dataset | Sequence, batch_size: int, shuffle: bool, rng: Rng | None = None
) -> Iterator[list]:
    """Yield one epoch of batches; every sample appears exactly once."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle:
        if rng is None:
            raise InputError("shuffle requires an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for lo in range(0, n, batch_size):
        yield [dataset[int(i)] for i in order[lo:lo + batch_size]]


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + one raw uint8 array file per video
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write raw little-endian uint8 frame arrays plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = dataset.spec
    records = []
    for i, sample in enumerate(dataset.samples):
        data = np.round(sample.video.frames * 255.0).astype(np.uint8)
        fname = f"{i:05d}.bin"
        (out / fname).write_bytes(data.tobytes(order="C"))
        records.append(
            {
                "id": i,
                "file": fname,
                "label": int(sample.label),
                "motion_ground_truth": [float(x) for x in sample.motion_ground_truth],
                "shape": list(data.shape),
                "dtype": "uint8",
                "byte_order": "little",
                "order": "row-major",
                "crc32": zlib.crc32(data.tobytes(order="C")),
            }
        )
    manifest = {
        "format_version": _FORMAT_VERSION,
        "spec": {
            "kind": spec.kind,
            "n_videos": spec.n_videos,
            "video_length_frames": spec.video_length_frames,
            "resolution": spec.resolution,
            "n_classes": spec.n_classes,
            "fps": spec.fps,
            "sprite_radius": list(spec.sprite_radius),
            "speed": list(spec.speed),
            "background_amplitude": spec.background_amplitude,
            "seed": spec.seed,
        },
        "videos": records,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return out


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset directory written by save_dataset (bit-exact round trip)."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise InputError(f"unsupported dataset format version {manifest.get('format_version')}")
    s = manifest["spec"]
    spec = DatasetSpec(
        kind=s["kind"],
        n_videos=s["n_videos"],
        video_length_frames=s["video_length_frames"],
        resolution=s["resolution"],
        n_classes=s["n_classes"],
        fps=s["fps"],
        sprite_radius=tuple(s["sprite_radius"]),
        speed=tuple(s["speed"]),
        background_amplitude=s["background_amplitude"],
        seed=s["seed"],
    )
    samples = []
    for rec in manifest["videos"]:
        raw = (root / rec["file"]).read_bytes()
        if zlib.crc32(raw) != rec["crc32"]:
            raise InputError(f"corrupt video file {rec['file']} (crc mismatch)")
        data = np.frombuffer(raw, dtype=np.uint8).reshape(rec["shape"])
        frames = data.astype(np.float32) / np.float32(255.0)
        samples.append(
            SyntheticSample(
                video=VideoTensor(frames, fps=spec.fps),
                label=rec["label"],
                motion_ground_truth=np.array(rec["motion_ground_truth"]),
            )
        )
    return Dataset(samples, spec)


# --- flat key=value dataset spec files (CLI input) ---

_SPEC_KEYS = {
    "kind": str,
    "n_videos": int,
    "video_length_frames": int,
    "resolution": int,
    "n_classes": int,
    "fps": float,
    "sprite_radius_min": float,
    "sprite_radius_max": float,
    "speed_min": float,
    "speed_max": float,
    "background_amplitude": float,
    "seed": int,
}


def spec_from_text(text: str) -> DatasetSpec:
    """Parse a flat key = value dataset spec; unknown keys are an error."""
    from .core import _kv_lines, _parse_value

    values: dict = {}
    for lineno, key, raw in _kv_lines(text):
        if key not in _SPEC_KEYS:
            raise InputError(f"line {lineno}: unknown dataset spec key {key!r}")
        values[key] = _parse_value(key, raw, _SPEC_KEYS[key], lineno)
    kwargs: dict = {k: v for k, v in values.items() if not k.endswith(("_min", "_max"))}
    defaults = DatasetSpec()
    kwargs["sprite_radius"] = (
        values.get("sprite_radius_min", defaults.sprite_radius[0]),
        values.get("sprite_radius_max", defaults.sprite_radius[1]),
    )
    kwargs["speed"] = (
        values.get("speed_min", defaults.speed[0]),
        values.get("speed_max", defaults.speed[1]),
    )
    return DatasetSpec(**kwargs)


def spec_to_text(spec: DatasetSpec) -> str:
    lines = [
        f"kind = {spec.kind}",
        f"n_videos = {spec.n_videos}",
        f"video_length_frames = {spec.video_length_frames}",
        f"resolution = {spec.resolution}",
        f"n_classes = {spec.n_classes}",
        f"fps = {spec.fps!r}",
        f"sprite_radius_min = {spec.sprite_radius[0]!r}",
        f"sprite_radius_max = {spec.sprite_radius[1]!r}",
        f"speed_min = {spec.speed[0]!r}",
        f"speed_max = {spec.speed[1]!r}",
        f"background_amplitude = {spec.background_amplitude!r}",
        f"seed = {spec.seed}",
    ]
    return "\n".join(lines) + "\n"
