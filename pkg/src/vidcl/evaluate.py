"""Evaluation battery: linear probe, shuffle sensitivity, retrieval, low-shot,
motion-correlation report, and the cross-entropy shuffle-detection baseline.

All evaluations are read-only with respect to checkpoints: the backbone is
frozen and only a linear classifier is fit on its representations.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import motion
from .augment import group_shuffle, sample_negative_perms
from .core import Config, InputError, Rng, VideoTensor
from .model import clips_to_tensor
from .synthdata import Dataset
from .trainer import TrainState, load_checkpoint, pretrain


@dataclass
class ProbeConfig:
    """Linear-probe protocol: optimizer, split, and feature extraction options."""

    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    train_fraction: float = 0.75
    seed: int = 0
    n_temporal_crops: int = 1  # desk default: one center clip per video
    standardize: bool = True


@dataclass
class ProbeResult:
    top1: float
    per_class: np.ndarray  # accuracy per class on the eval split
    n_eval: int

    def as_dict(self) -> dict:
        return {
            "top1": self.top1,
            "per_class": [float(a) for a in self.per_class],
            "n_eval": self.n_eval,
        }


def _resolve_state(checkpoint: TrainState | str | Path) -> TrainState:
    if isinstance(checkpoint, TrainState):
        return checkpoint
    return load_checkpoint(checkpoint)


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def _clip_starts(video_t: int, span: int, n_crops: int) -> list[int]:
    if n_crops <= 1:
        return [(video_t - span) // 2]
    return [round(i * (video_t - span) / (n_crops - 1)) for i in range(n_crops)]


def extract_features(
    state: TrainState, dataset: Dataset, probe_cfg: ProbeConfig, batch: int = 64
) -> np.ndarray:
    """Frozen-backbone representation per video (center clip, or crop average)."""
    cfg = state.cfg
    span = (cfg.clip_len - 1) * cfg.clip_stride + 1
    model = state.online
    was_training = model.training
    model.eval()
    feats = []
    clips: list[VideoTensor] = []
    counts: list[int] = []
    for sample in dataset.samples:
        starts = _clip_starts(sample.video.t, span, probe_cfg.n_temporal_crops)
        counts.append(len(starts))
        for s in starts:
            idx = s + np.arange(cfg.clip_len) * cfg.clip_stride
            clips.append(VideoTensor(sample.video.frames[idx], fps=sample.video.fps))
    with torch.no_grad():
        for lo in range(0, len(clips), batch):
            x = clips_to_tensor(clips[lo:lo + batch], state.dtype)
            feats.append(model.backbone(x)[0].float().numpy())
    model.train(was_training)
    flat = np.concatenate(feats)
    out, pos = [], 0
    for c in counts:
        out.append(flat[pos:pos + c].mean(axis=0))
        pos += c
    return np.stack(out)


def single_frame_features(dataset: Dataset) -> np.ndarray:
    """Flattened center-frame pixels per video (the appearance-leak probe input)."""
    return np.stack(
        [s.video.frames[s.video.t // 2].ravel() for s in dataset.samples]
    ).astype(np.float32)


# ---------------------------------------------------------------------------
# linear classifier
# ---------------------------------------------------------------------------


def stratified_split(
    labels: np.ndarray, train_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-class split into (train_idx, eval_idx)."""
    rng = Rng(seed)
    train, evl = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_fraction * len(idx)))
        train.extend(idx[:n_train])
        evl.extend(idx[n_train:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(evl, dtype=np.int64))


def fit_linear_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    probe_cfg: ProbeConfig,
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[torch.nn.Linear, tuple[np.ndarray, np.ndarray]]:
    """Multinomial logistic regression with Adam; deterministic given the seed."""
    present = np.unique(labels)
    if len(present) < n_classes:
        missing = sorted(set(range(n_classes)) - set(int(c) for c in present))
        raise InputError(f"classes absent from training split: {missing}")
    if norm_stats is None and probe_cfg.standardize:
        mu = features.mean(axis=0)
        sd = features.std(axis=0) + 1e-6
        norm_stats = (mu, sd)
    elif norm_stats is None:
        norm_stats = (np.zeros(features.shape[1]), np.ones(features.shape[1]))
    x = torch.from_numpy((features - norm_stats[0]) / norm_stats[1]).float()
    y = torch.from_numpy(labels).long()

    clf = torch.nn.Linear(features.shape[1], n_classes)
    with torch.no_grad():
        clf.weight.zero_()
        clf.bias.zero_()
    opt = torch.optim.Adam(clf.parameters(), lr=probe_cfg.lr, foreach=False)
    rng = Rng(probe_cfg.seed)
    n = len(x)
    for _ in range(probe_cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, probe_cfg.batch_size):
            sel = torch.from_numpy(order[lo:lo + probe_cfg.batch_size].copy())
            loss = torch.nn.functional.cross_entropy(clf(x[sel]), y[sel])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return clf, norm_stats


def _classifier_accuracy(
    clf: torch.nn.Linear,
    norm_stats: tuple[np.ndarray, np.ndarray],
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
) -> ProbeResult:
    x = torch.from_numpy((features - norm_stats[0]) / norm_stats[1]).float()
    with torch.no_grad():
        pred = clf(x).argmax(dim=1).numpy()
    correct = pred == labels
    per_class = np.array(
        [correct[labels == c].mean() if (labels == c).any() else np.nan
         for c in range(n_classes)]
    )
    return ProbeResult(top1=float(correct.mean()), per_class=per_class, n_eval=len(labels))


def probe_features(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    probe_cfg: ProbeConfig,
    train_idx: np.ndarray | None = None,
    eval_idx: np.ndarray | None = None,
) -> ProbeResult:
    """Split, fit, and score a linear probe on precomputed features."""
    if train_idx is None or eval_idx is None:
        train_idx, eval_idx = stratified_split(labels, probe_cfg.train_fraction, probe_cfg.seed)
    clf, stats = fit_linear_classifier(
        features[train_idx], labels[train_idx], n_classes, probe_cfg
    )
    return _classifier_accuracy(clf, stats, features[eval_idx], labels[eval_idx], n_classes)


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------


def linear_probe(
    checkpoint: TrainState | str | Path, dataset: Dataset, probe_cfg: ProbeConfig | None = None
) -> ProbeResult:
    """Held-out top-1 of a linear layer on frozen backbone representations."""
    probe_cfg = probe_cfg or ProbeConfig()
    state = _resolve_state(checkpoint)
    feats = extract_features(state, dataset, probe_cfg)
    return probe_features(feats, dataset.labels, dataset.n_classes, probe_cfg)


def single_frame_probe(dataset: Dataset, probe_cfg: ProbeConfig | None = None) -> ProbeResult:
    """Linear probe on single-frame pixels: the anti-shortcut / appearance-leak check."""
    probe_cfg = probe_cfg or ProbeConfig()
    feats = single_frame_features(dataset)
    return probe_features(feats, dataset.labels, dataset.n_classes, probe_cfg)


def shuffle_eval(
    checkpoint: TrainState | str | Path,
    dataset: Dataset,
    probe_cfg: ProbeConfig | None = None,
    rng: Rng | None = None,
    identity_shuffle: bool = False,
) -> dict:
    """Probe accuracy on clean vs group-shuffled test clips, and the drop.

    Each test clip gets an independent random non-identity group permutation
    (or the identity when identity_shuffle is set, which must give drop 0).
    """
    probe_cfg = probe_cfg or ProbeConfig()
    rng = rng or Rng(probe_cfg.seed + 1)
    state = _resolve_state(checkpoint)
    cfg = state.cfg
    labels = dataset.labels
    train_idx, eval_idx = stratified_split(labels, probe_cfg.train_fraction, probe_cfg.seed)

    feats = extract_features(state, dataset, probe_cfg)
    clf, stats = fit_linear_classifier(
        feats[train_idx], labels[train_idx], dataset.n_classes, probe_cfg
    )
    normal = _classifier_accuracy(clf, stats, feats[eval_idx], labels[eval_idx], dataset.n_classes)

    # re-extract eval features from shuffled center clips
    span = (cfg.clip_len - 1) * cfg.clip_stride + 1
    n_groups = cfg.clip_len // cfg.group_size
    model = state.online
    model.eval()
    clips = []
    for i in eval_idx:
        video = dataset.samples[int(i)].video
        start = (video.t - span) // 2
        idx = start + np.arange(cfg.clip_len) * cfg.clip_stride
        clip = VideoTensor(video.frames[idx], fps=video.fps)
        if not identity_shuffle:
            perm = sample_negative_perms(n_groups, 1, rng, g=cfg.group_size)[0]
            clip = group_shuffle(clip, perm)
        clips.append(clip)
    shuf_feats = []
    with torch.no_grad():
        for lo in range(0, len(clips), 64):
            x = clips_to_tensor(clips[lo:lo + 64], state.dtype)
            shuf_feats.append(model.backbone(x)[0].float().numpy())
    shuffled = _classifier_accuracy(
        clf, stats, np.concatenate(shuf_feats), labels[eval_idx], dataset.n_classes
    )
    return {
        "acc_normal": normal.top1,
        "acc_shuffled": shuffled.top1,
        "drop": normal.top1 - shuffled.top1,
    }


def retrieve_topk(
    checkpoint: TrainState | str | Path,
    query: VideoTensor,
    gallery: list[VideoTensor],
    k: int,
) -> list[tuple[int, float]]:
    """Top-k gallery indices by cosine similarity in visual-head space."""
    if not gallery:
        raise InputError("gallery must be non-empty")
    if k > len(gallery):
        raise InputError(f"k {k} exceeds gallery size {len(gallery)}")
    state = _resolve_state(checkpoint)
    model = state.online
    model.eval()
    with torch.no_grad():
        q = model.head_v(model.backbone(clips_to_tensor([query], state.dtype))[0])[0]
        embs = []
        for lo in range(0, len(gallery), 64):
            x = clips_to_tensor(gallery[lo:lo + 64], state.dtype)
            embs.append(model.head_v(model.backbone(x)[0]))
        g = torch.cat(embs)
    sims = (g @ q).float().numpy()
    order = np.lexsort((np.arange(len(sims)), -sims))  # ties broken by gallery index
    return [(int(i), float(sims[i])) for i in order[:k]]


def lowshot_eval(
    checkpoint: TrainState | str | Path,
    dataset: Dataset,
    fractions: list[float],
    probe_cfg: ProbeConfig | None = None,
) -> dict[float, ProbeResult]:
    """Probe accuracy per labeled-data fraction (deterministic stratified subsets).

    Fraction 1.0 reproduces linear_probe exactly. Subsets are per-class
    prefixes of a seed-shuffled order, so smaller fractions nest in larger.
    """
    probe_cfg = probe_cfg or ProbeConfig()
    state = _resolve_state(checkpoint)
    labels = dataset.labels
    train_idx, eval_idx = stratified_split(labels, probe_cfg.train_fraction, probe_cfg.seed)
    feats = extract_features(state, dataset, probe_cfg)

    sub_rng = Rng(probe_cfg.seed + 2)
    by_class = {
        int(c): train_idx[labels[train_idx] == c][
            sub_rng.permutation(int((labels[train_idx] == c).sum()))
        ]
        for c in np.unique(labels[train_idx])
    }
    results: dict[float, ProbeResult] = {}
    for frac in fractions:
        if not (0.0 < frac <= 1.0):
            raise InputError(f"fraction {frac} outside (0, 1]")
        if frac == 1.0:
            sel = train_idx
        else:
            parts = []
            for c, idx in by_class.items():
                n_keep = int(round(frac * len(idx)))
                if n_keep < 1:
                    raise InputError(
                        f"fraction {frac} leaves class {c} empty "
                        f"({len(idx)} train samples)"
                    )
                parts.append(idx[:n_keep])
            sel = np.sort(np.concatenate(parts))
        results[frac] = probe_features(
            feats, labels, dataset.n_classes, probe_cfg, train_idx=sel, eval_idx=eval_idx
        )
    return results


def motion_class_report(
    checkpoint_a: TrainState | str | Path,
    checkpoint_b: TrainState | str | Path,
    dataset: Dataset,
    probe_cfg: ProbeConfig | None = None,
) -> list[dict]:
    """Per-class accuracy difference (a - b) alongside a class motion score.

    The motion score is the class median of per-video median window
    amplitudes (raw desk-scale values, not normalized). Sorted by delta,
    descending.
    """
    probe_cfg = probe_cfg or ProbeConfig()
    res_a = linear_probe(checkpoint_a, dataset, probe_cfg)
    res_b = linear_probe(checkpoint_b, dataset, probe_cfg)

    labels = dataset.labels
    per_video = np.array(
        [float(np.median(motion.profile(s.video).amplitudes)) for s in dataset.samples]
    )
    names = dataset.spec.class_names()
    rows = []
    for c in range(dataset.n_classes):
        rows.append(
            {
                "class": c,
                "name": names[c] if c < len(names) else str(c),
                "motion": float(np.median(per_video[labels == c])),
                "delta_acc": float(res_a.per_class[c] - res_b.per_class[c]),
            }
        )
    rows.sort(key=lambda r: -r["delta_acc"])
    return rows


def pretext_baseline(
    cfg: Config,
    dataset: Dataset,
    steps: int | None = None,
    out_dir: str | Path | None = None,
    serial: bool = True,
) -> TrainState:
    """Train the cross-entropy shuffle-detection baseline (binary head + visual loss)."""
    return pretrain(
        dataclasses.replace(cfg, objective="pretext"),
        dataset, steps=steps, out_dir=out_dir, serial=serial,
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def write_report(
    path: str | Path,
    title: str,
    meta: dict,
    columns: list[str],
    rows: list[list],
) -> Path:
    """Tab-separated table with '#'-prefixed metadata lines plus a text summary."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {title}"]
    for key, val in meta.items():
        lines.append(f"# {key}: {val}")
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(str(v) for v in row))
    out.write_text("\n".join(lines) + "\n")
    return out
