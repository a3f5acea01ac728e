"""Self-supervised pretraining loop: clip sampling, loss assembly, optimization.

Per step and per video: a clip window is drawn by targeted sampling, a
second clip of the same video serves as the visual positive, the combined
loss is optimized with AdamW under a warmup+cosine schedule, the momentum
encoder is EMA-updated, and the visual keys are enqueued into the bank.
Checkpoints use a CRC-protected binary format (documented in save_checkpoint)
that restores training bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import motion
from .augment import AugmentPolicy, apply_policy, jitter_start
from .core import Config, InputError, NumericalError, Rng, VideoTensor, validate_config
from .model import ContrastiveModel, clips_to_tensor, clone_momentum, make_model
from .momentum import MemoryBank, ema_update
from .objective import (
    encode_anchors,
    shuffle_pretext_logits,
    temporal_loss_parts,
    total_loss,
    visual_loss_parts,
)
from .synthdata import Dataset, SyntheticSample


class TrainingDiverged(NumericalError):
    """Loss became non-finite; carries a diagnostic dump of the offending batch."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def lr_at(step: int, cfg: Config) -> float:
    """Linear warmup from lr_warm to lr_peak, then cosine annealing to lr_end."""
    w, s = cfg.warmup_steps, cfg.total_steps
    if step < w:
        return cfg.lr_warm + (cfg.lr_peak - cfg.lr_warm) * step / w
    frac = min((step - w) / (s - w), 1.0)
    return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + math.cos(math.pi * frac))


def policy_for(cfg: Config) -> AugmentPolicy:
    return AugmentPolicy(
        crop_size=cfg.crop_size, temporal_jitter_frames=cfg.temporal_jitter_frames
    )


def _uses_visual(objective: str) -> bool:
    return objective in ("scvrl", "cvrl", "pretext")


def _uses_temporal(objective: str) -> bool:
    return objective in ("scvrl", "shuffled-only")


@dataclass
class TrainState:
    cfg: Config
    online: ContrastiveModel
    momentum: ContrastiveModel
    bank: MemoryBank
    optimizer: torch.optim.AdamW
    rng: Rng
    epoch_perm: np.ndarray
    epoch_pos: int = 0
    step: int = 0
    dtype: torch.dtype = torch.float32
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    profile_cache: dict = field(default_factory=dict)


def build_optimizer(online: ContrastiveModel, cfg: Config) -> torch.optim.AdamW:
    """AdamW with decay exemptions for biases, norms, CLS and positional embeddings."""
    decay, no_decay = [], []
    for name, p in online.named_parameters():
        if name.endswith(".bias") or "norm" in name or "cls_token" in name or "pos_" in name:
            no_decay.append(p)
        else:
            decay.append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr_warm,
        betas=(0.9, 0.999),
        eps=1e-8,
        foreach=False,
    )


def init_train_state(cfg: Config, dtype: torch.dtype = torch.float32, n_videos: int = 0) -> TrainState:
    bad = validate_config(cfg)
    if bad:
        raise InputError("; ".join(bad))
    rng = Rng(cfg.seed)
    online = make_model(cfg, rng, dtype)
    momentum_model = clone_momentum(online)
    bank = MemoryBank(cfg.bank_size, cfg.head_out, dtype)
    opt = build_optimizer(online, cfg)
    perm = rng.permutation(n_videos) if n_videos else np.arange(0, dtype=np.int64)
    return TrainState(
        cfg=cfg,
        online=online,
        momentum=momentum_model,
        bank=bank,
        optimizer=opt,
        rng=rng,
        epoch_perm=np.asarray(perm, dtype=np.int64),
        dtype=dtype,
        policy=policy_for(cfg),
    )


# ---------------------------------------------------------------------------
# clip sampling
# ---------------------------------------------------------------------------


def _profile_for(state: TrainState, idx: int, sample: SyntheticSample) -> motion.MotionProfile:
    prof = state.profile_cache.get(idx)
    if prof is None:
        top_k = state.cfg.motion_top_k if state.cfg.motion_top_k > 0 else None
        prof = motion.profile(sample.video, top_k=top_k, beta=state.cfg.beta)
        state.profile_cache[idx] = prof
    return prof


def _draw_clip(state: TrainState, sample: SyntheticSample, window: int) -> VideoTensor:
    cfg = state.cfg
    fps = int(round(sample.video.fps))
    span = (cfg.clip_len - 1) * cfg.clip_stride
    max_start = sample.video.t - span - 1
    if max_start < 0:
        raise InputError(
            f"video of {sample.video.t} frames too short for clip span {span + 1}"
        )
    start = jitter_start(window * fps, cfg.temporal_jitter_frames, max_start, state.rng)
    idx = start + np.arange(cfg.clip_len) * cfg.clip_stride
    return VideoTensor(sample.video.frames[idx], fps=sample.video.fps)


def sample_training_clips(
    state: TrainState, batch: list[tuple[int, SyntheticSample]]
) -> tuple[list[VideoTensor], list[VideoTensor]]:
    """Anchor clip (targeted window) and visual-positive clip per video."""
    cfg = state.cfg
    anchors, visuals = [], []
    for idx, sample in batch:
        prof = _profile_for(state, idx, sample)
        w_a = motion.sample_window(prof, state.rng)
        anchors.append(_draw_clip(state, sample, w_a))
        if cfg.visual_positive_sampling == "targeted":
            w_v = motion.sample_window(prof, state.rng)
        else:
            w_v = int(state.rng.integers(0, prof.n_windows))
        visuals.append(_draw_clip(state, sample, w_v))
    return anchors, visuals


def _next_batch(state: TrainState, dataset: Dataset) -> list[tuple[int, SyntheticSample]]:
    n = len(dataset)
    b = state.cfg.batch_size
    if state.epoch_pos + b > n:
        state.epoch_perm = np.asarray(state.rng.permutation(n), dtype=np.int64)
        state.epoch_pos = 0
    idxs = state.epoch_perm[state.epoch_pos:state.epoch_pos + b]
    state.epoch_pos += b
    return [(int(i), dataset[int(i)]) for i in idxs]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_step(state: TrainState, batch: list[tuple[int, SyntheticSample]]) -> dict:
    """One optimization step over a batch of (index, sample) pairs."""
    cfg = state.cfg
    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    anchors, visuals = sample_training_clips(state, batch)
    metrics: dict = {"step": state.step, "lr": lr}

    lt = None
    if cfg.objective == "pretext":
        logits, labels, anchor_repr = shuffle_pretext_logits(
            state.online, anchors, state.policy, cfg, state.rng, state.dtype
        )
        lt = F.binary_cross_entropy_with_logits(logits, labels)
        metrics["pretext_acc"] = float(((logits > 0) == (labels > 0.5)).float().mean())
    else:
        anchor_repr = encode_anchors(state.online, anchors, state.policy, state.rng, state.dtype)
        if _uses_temporal(cfg.objective):
            lt, diag = temporal_loss_parts(
                state.online, state.momentum, anchor_repr, anchors,
                state.policy, cfg, state.rng, dtype=state.dtype,
            )
            metrics.update(diag)

    lv, keys = None, None
    if _uses_visual(cfg.objective):
        lv, keys, diag = visual_loss_parts(
            state.online, state.momentum, anchor_repr, visuals,
            state.bank.negatives(), state.policy, cfg, state.rng, state.dtype,
        )
        metrics.update(diag)

    if lt is not None and lv is not None:
        loss = total_loss(lt, lv, cfg.lambda_weight, cfg.lambda_target)
    else:
        loss = lt if lt is not None else lv

    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step}",
            {
                "step": state.step,
                "batch_indices": [idx for idx, _ in batch],
                "loss_t": None if lt is None else float(lt.detach()),
                "loss_v": None if lv is None else float(lv.detach()),
                "lr": lr,
            },
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.momentum, state.online, cfg.ema_momentum)
    if keys is not None:
        state.bank.enqueue(keys)
    state.step += 1

    metrics["loss_t"] = None if lt is None else float(lt.detach())
    metrics["loss_v"] = None if lv is None else float(lv.detach())
    metrics["loss_total"] = float(loss.detach())
    return metrics


def warm_bank(state: TrainState, dataset: Dataset) -> None:
    """Momentum-encode clips (no loss, no updates) until the bank has min fill."""
    if not _uses_visual(state.cfg.objective):
        return
    target = min(state.cfg.bank_min_fill, state.cfg.bank_size)
    while state.bank.count < target:
        batch = _next_batch(state, dataset)
        _, visuals = sample_training_clips(state, batch)
        aug = [apply_policy(c, state.policy, state.rng) for c in visuals]
        with torch.no_grad():
            keys = state.momentum.head_v(
                state.momentum.backbone(clips_to_tensor(aug, state.dtype))[0]
            )
        state.bank.enqueue(keys)


def run_steps(
    state: TrainState,
    dataset: Dataset,
    n_steps: int,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    metrics_sink: list | None = None,
) -> TrainState:
    """Advance training n_steps, streaming metrics and periodic checkpoints."""
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = (out / "metrics.jsonl").open("a")
    try:
        for _ in range(n_steps):
            try:
                m = train_step(state, _next_batch(state, dataset))
            except TrainingDiverged as exc:
                if out is not None:
                    (out / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=2))
                raise
            if metrics_sink is not None:
                metrics_sink.append(m)
            if metrics_file is not None:
                metrics_file.write(json.dumps(m) + "\n")
            if out is not None and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, out / f"step_{state.step:06d}.ckpt")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return state


def pretrain(
    cfg: Config,
    dataset: Dataset,
    steps: int | None = None,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    serial: bool = True,
    dtype: torch.dtype = torch.float32,
    metrics_sink: list | None = None,
) -> TrainState:
    """Initialize, warm the bank, train, and (if out_dir) write final.ckpt."""
    n_threads = torch.get_num_threads()
    if serial:
        torch.set_num_threads(1)
    try:
        state = init_train_state(cfg, dtype, n_videos=len(dataset))
        warm_bank(state, dataset)
        run_steps(
            state, dataset,
            cfg.total_steps if steps is None else steps,
            out_dir=out_dir, checkpoint_every=checkpoint_every,
            metrics_sink=metrics_sink,
        )
        if out_dir is not None:
            save_checkpoint(state, Path(out_dir) / "final.ckpt")
        return state
    finally:
        torch.set_num_threads(n_threads)


# ---------------------------------------------------------------------------
# checkpoint codec
#
# layout: magic "VIDCLCK1" | u32 version | u64 header_len | header JSON
#         | tensor payload (row-major little-endian, offsets in header)
#         | u32 CRC32 of header+payload
# ---------------------------------------------------------------------------

_MAGIC = b"VIDCLCK1"
_CKPT_VERSION = 1

_DTYPE_CODES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _named_checkpoint_tensors(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    tensors: list[tuple[str, torch.Tensor]] = []
    for name, t in state.online.state_dict().items():
        tensors.append((f"online/{name}", t))
    for name, t in state.momentum.state_dict().items():
        tensors.append((f"momentum/{name}", t))
    opt_state = state.optimizer.state_dict()["state"]
    for pidx in sorted(opt_state):
        for key in sorted(opt_state[pidx]):
            val = opt_state[pidx][key]
            if isinstance(val, torch.Tensor):
                tensors.append((f"opt/{pidx}/{key}", val))
    tensors.append(("bank/buffer", state.bank.buffer))
    tensors.append(("data/epoch_perm", torch.from_numpy(state.epoch_perm)))
    return tensors


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Serialize the full training state; load_checkpoint restores it bit-exactly."""
    from .core import config_to_text

    names, blobs, manifest, offset = [], [], [], 0
    for name, t in _named_checkpoint_tensors(state):
        arr = t.detach().cpu().contiguous()
        code = _DTYPE_CODES[arr.dtype]
        raw = arr.numpy().astype(code, copy=False).tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset,
             "nbytes": len(raw)}
        )
        names.append(name)
        blobs.append(raw)
        offset += len(raw)

    header = {
        "config_text": config_to_text(state.cfg),
        "step": state.step,
        "dtype": _DTYPE_CODES[state.dtype],
        "rng_state": state.rng.get_state(),
        "rng_seed": state.rng.seed,
        "epoch_pos": state.epoch_pos,
        "bank": {"count": state.bank.count, "cursor": state.bank.cursor,
                 "capacity": state.bank.capacity},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(blobs)
    body = header_bytes + payload
    crc = zlib.crc32(body)

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(body)
        f.write(struct.pack("<I", crc))
    return out


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Parse and verify a checkpoint file -> (header, {tensor name: torch.Tensor})."""
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:8] != _MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != _CKPT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", raw[12:20])[0]
    body = raw[20:-4]
    crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise InputError(f"{path}: checkpoint CRC mismatch")
    header = json.loads(body[:header_len].decode())
    payload = body[header_len:]
    tensors = {}
    for rec in header["tensors"]:
        chunk = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(chunk, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
        tensors[rec["name"]] = torch.from_numpy(arr)
    return header, tensors


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a TrainState from disk; resuming reproduces training bit-exactly."""
    from .core import config_from_text

    header, tensors = read_checkpoint(path)
    cfg = config_from_text(header["config_text"])
    dtype = _CODE_DTYPES[header["dtype"]]

    online = ContrastiveModel(cfg).to(dtype)
    online.load_state_dict(
        {k.split("/", 1)[1]: v.to(dtype) for k, v in tensors.items() if k.startswith("online/")}
    )
    momentum_model = clone_momentum(online)
    momentum_model.load_state_dict(
        {k.split("/", 1)[1]: v.to(dtype) for k, v in tensors.items() if k.startswith("momentum/")}
    )

    opt = build_optimizer(online, cfg)
    opt_sd = opt.state_dict()
    opt_state: dict = {}
    for k, v in tensors.items():
        if not k.startswith("opt/"):
            continue
        _, pidx, key = k.split("/")
        entry = opt_state.setdefault(int(pidx), {})
        entry[key] = v if key == "step" else v.to(dtype)
    opt_sd["state"] = opt_state
    opt.load_state_dict(opt_sd)

    bank_meta = header["bank"]
    bank = MemoryBank(bank_meta["capacity"], cfg.head_out, dtype)
    bank.buffer.copy_(tensors["bank/buffer"].to(dtype))
    bank.count = bank_meta["count"]
    bank.cursor = bank_meta["cursor"]

    rng = Rng.from_state(_decode_rng_state(header["rng_state"]), seed=header["rng_seed"])
    return TrainState(
        cfg=cfg,
        online=online,
        momentum=momentum_model,
        bank=bank,
        optimizer=opt,
        rng=rng,
        epoch_perm=tensors["data/epoch_perm"].numpy().astype(np.int64),
        epoch_pos=header["epoch_pos"],
        step=header["step"],
        dtype=dtype,
        policy=policy_for(cfg),
    )


def _decode_rng_state(state: dict) -> dict:
    # JSON round-trips PCG64's big ints natively; nothing to decode today,
    # kept as a seam in case the bit generator ever changes
    return state


def checkpoint_id(path: str | Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
