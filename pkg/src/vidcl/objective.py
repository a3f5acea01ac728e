"""Contrastive objectives: InfoNCE, the temporal shuffled loss, the visual loss.

The temporal loss contrasts a clip against group-shuffled copies of its
re-augmented positive: anchor and positive are the same clip under two
independent augmentation draws, and each negative is the positive clip with
a non-identity frame-group permutation applied. The visual loss contrasts
two clips of the same video against a memory bank of other videos' keys.
Both anchors share one online backbone pass feeding the two heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .augment import AugmentPolicy, GroupPermutation, apply_policy, group_shuffle, sample_negative_perms
from .core import Config, InputError, Rng, VideoTensor
from .model import ContrastiveModel, clips_to_tensor


@dataclass
class ContrastiveBatch:
    """One anchor, its positive, and a matrix of negatives (all unit-norm rows)."""

    anchor: torch.Tensor  # [D]
    positive: torch.Tensor  # [D]
    negatives: torch.Tensor  # [N, D]


def info_nce(batch: ContrastiveBatch, tau: float) -> torch.Tensor:
    """-log( e^{a.p/tau} / (e^{a.p/tau} + sum_i e^{a.n_i/tau}) ), stable form."""
    loss, _, _ = _info_nce_rows(
        batch.anchor[None, :], batch.positive[None, :], batch.negatives[None, :, :], tau
    )
    return loss


def _info_nce_rows(
    anchors: torch.Tensor,  # [B, D]
    positives: torch.Tensor,  # [B, D]
    negatives: torch.Tensor,  # [B, N, D] per-anchor, or [N, D] shared
    tau: float,
) -> tuple[torch.Tensor, float, float]:
    """Mean loss over the batch plus mean positive/negative logits."""
    if tau <= 0:
        raise InputError("tau must be > 0")
    if negatives.ndim == 2:
        negatives = negatives[None, :, :].expand(anchors.shape[0], -1, -1)
    if negatives.shape[1] < 1:
        raise InputError("at least one negative required")
    pos = (anchors * positives).sum(dim=1, keepdim=True) / tau  # [B, 1]
    neg = torch.einsum("bd,bnd->bn", anchors, negatives) / tau  # [B, N]
    logits = torch.cat([pos, neg], dim=1)
    # log-sum-exp subtracts the max logit internally
    loss = (torch.logsumexp(logits, dim=1) - pos[:, 0]).mean()
    return loss, float(pos.detach().mean()), float(neg.detach().mean())


def total_loss(
    lt: torch.Tensor | float,
    lv: torch.Tensor | float,
    lambda_weight: float,
    lambda_target: str = "visual",
):
    """Combine the two objectives; lambda scales the visual term by default."""
    if lambda_target == "temporal":
        return lambda_weight * lt + lv
    return lt + lambda_weight * lv


# ---------------------------------------------------------------------------
# batched loss assembly (used by the trainer; single-clip wrappers below)
# ---------------------------------------------------------------------------


def encode_anchors(
    online: ContrastiveModel,
    clips: list[VideoTensor],
    policy: AugmentPolicy,
    rng: Rng,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """One online backbone pass over the psi1-augmented anchors -> repr [B, D]."""
    aug = [apply_policy(c, policy, rng) for c in clips]
    return online.backbone(clips_to_tensor(aug, dtype))[0]


def temporal_loss_parts(
    online: ContrastiveModel,
    momentum: ContrastiveModel,
    anchor_repr: torch.Tensor,
    clips: list[VideoTensor],
    policy: AugmentPolicy,
    cfg: Config,
    rng: Rng,
    perms_per_clip: list[list[GroupPermutation]] | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, dict]:
    """Shuffled contrastive loss for a batch sharing a precomputed anchor pass.

    Per clip: positive = momentum temporal embedding of a fresh psi2 draw;
    negatives = the same psi2 clip under n_temporal_negatives distinct
    non-identity group permutations (momentum, gradient-free).
    """
    n_groups = cfg.clip_len // cfg.group_size
    z_a = online.head_t(anchor_repr)

    pos_clips = [apply_policy(c, policy, rng) for c in clips]
    if perms_per_clip is None:
        perms_per_clip = [
            sample_negative_perms(n_groups, cfg.n_temporal_negatives, rng, g=cfg.group_size)
            for _ in clips
        ]
    neg_clips = [
        group_shuffle(pc, perm)
        for pc, perms in zip(pos_clips, perms_per_clip)
        for perm in perms
    ]
    n_neg = len(perms_per_clip[0])
    for perms in perms_per_clip:
        if len(perms) != n_neg:
            raise InputError("all clips must use the same number of negatives")
        for perm in perms:
            if perm.is_identity():
                raise InputError("identity permutation is not a valid negative")

    with torch.no_grad():
        z_p = momentum.head_t(momentum.backbone(clips_to_tensor(pos_clips, dtype))[0])
        z_n = momentum.head_t(momentum.backbone(clips_to_tensor(neg_clips, dtype))[0])
    z_n = z_n.reshape(len(clips), n_neg, -1)

    loss, pos_logit, neg_logit = _info_nce_rows(z_a, z_p, z_n, cfg.tau)
    return loss, {"pos_logit_t": pos_logit, "neg_logit_t": neg_logit}


def visual_loss_parts(
    online: ContrastiveModel,
    momentum: ContrastiveModel,
    anchor_repr: torch.Tensor,
    positive_clips: list[VideoTensor],
    bank_negatives: torch.Tensor,
    policy: AugmentPolicy,
    cfg: Config,
    rng: Rng,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor, dict]:
    """Visual contrastive loss against the memory bank; returns momentum keys."""
    if bank_negatives.shape[0] < 1:
        raise InputError("bank must be warmed before visual loss")
    z_a = online.head_v(anchor_repr)
    aug = [apply_policy(c, policy, rng) for c in positive_clips]
    with torch.no_grad():
        keys = momentum.head_v(momentum.backbone(clips_to_tensor(aug, dtype))[0])
    loss, pos_logit, neg_logit = _info_nce_rows(z_a, keys, bank_negatives.to(z_a.dtype), cfg.tau)
    return loss, keys, {"pos_logit_v": pos_logit, "neg_logit_v": neg_logit}


def shuffle_pretext_logits(
    online: ContrastiveModel,
    clips: list[VideoTensor],
    policy: AugmentPolicy,
    cfg: Config,
    rng: Rng,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Online pass for the cross-entropy shuffle-detection baseline.

    Every odd-indexed clip is group-shuffled (exact 50/50 balance), all are
    augmented, and one online pass yields both the binary logits and the
    anchor representations reused by the visual loss.
    """
    n_groups = cfg.clip_len // cfg.group_size
    labels = torch.tensor([float(i % 2) for i in range(len(clips))], dtype=dtype)
    prepared = []
    for i, c in enumerate(clips):
        aug = apply_policy(c, policy, rng)
        if i % 2 == 1:
            perm = sample_negative_perms(n_groups, 1, rng, g=cfg.group_size)[0]
            aug = group_shuffle(aug, perm)
        prepared.append(aug)
    repr_ = online.backbone(clips_to_tensor(prepared, dtype))[0]
    logits = online.head_cls(repr_)[:, 0]
    return logits, labels, repr_


# ---------------------------------------------------------------------------
# single-clip operation contracts
# ---------------------------------------------------------------------------


def temporal_loss(
    online: ContrastiveModel,
    momentum: ContrastiveModel,
    clip: VideoTensor,
    policy: AugmentPolicy,
    perms: list[GroupPermutation],
    cfg: Config,
    rng: Rng,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, dict]:
    anchor_repr = encode_anchors(online, [clip], policy, rng, dtype)
    return temporal_loss_parts(
        online, momentum, anchor_repr, [clip], policy, cfg, rng,
        perms_per_clip=[perms], dtype=dtype,
    )


def visual_loss(
    online: ContrastiveModel,
    momentum: ContrastiveModel,
    anchor_clip: VideoTensor,
    positive_clip: VideoTensor,
    bank,
    policy: AugmentPolicy,
    cfg: Config,
    rng: Rng,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    anchor_repr = encode_anchors(online, [anchor_clip], policy, rng, dtype)
    loss, keys, _ = visual_loss_parts(
        online, momentum, anchor_repr, [positive_clip], bank.negatives(),
        policy, cfg, rng, dtype=dtype,
    )
    return loss, keys[0]
