"""Video encoder: cube tokenizer, multiscale transformer stages, projection heads.

The backbone follows the multiscale recipe: a 3-D convolutional cube layer
turns the clip into a space-time token grid, a CLS token is prepended with
learned separable positional embeddings, and stages of pre-norm transformer
blocks run at doubling channel width with stride-2 spatial average pooling
of the token grid at stage transitions (CLS exempt). Temporal resolution is
held constant after the cube layer. The cube layer's temporal kernel equals
the frame-group size by default so no kernel straddles two shuffle groups.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Config, InputError, NumericalError, Rng, VideoTensor


@dataclass
class BackboneConfig:
    temporal_kernel: int = 2
    temporal_stride: int = 2
    spatial_patch: int = 4
    spatial_stride: int = 4
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_blocks: tuple[int, ...] = (1, 1, 2, 1)
    stage_heads: tuple[int, ...] = (1, 2, 4, 8)
    mlp_ratio: float = 4.0
    pooling_mode: str = "CLS"  # CLS | AVG

    @classmethod
    def desk_scale(cls, temporal_kernel: int = 2, pooling_mode: str = "CLS"):
        return cls(temporal_kernel=temporal_kernel, pooling_mode=pooling_mode)

    @classmethod
    def paper_scale(cls, temporal_kernel: int = 2, pooling_mode: str = "CLS"):
        # full-scale constants: 16-frame 224^2 clips, CLS readout
        return cls(
            temporal_kernel=temporal_kernel,
            spatial_patch=7,
            spatial_stride=4,
            stage_channels=(96, 192, 384, 768),
            stage_blocks=(1, 2, 11, 2),
            stage_heads=(1, 2, 4, 8),
            pooling_mode=pooling_mode,
        )

    def violations(self) -> list[str]:
        v = []
        if self.temporal_kernel not in (2, 3):
            v.append("temporal_kernel must be 2 or 3")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                v.append("stage_channels must double at each stage")
                break
        if not (len(self.stage_channels) == len(self.stage_blocks) == len(self.stage_heads)):
            v.append("stage lists must have equal length")
        for c, h in zip(self.stage_channels, self.stage_heads):
            if c % h != 0:
                v.append(f"heads {h} must divide channels {c}")
        return v


def backbone_config_for(cfg: Config) -> BackboneConfig:
    """Derive the desk-scale backbone geometry from a run config."""
    b = BackboneConfig.desk_scale(
        temporal_kernel=cfg.temporal_kernel, pooling_mode=cfg.pooling_mode
    )
    # tokens must not straddle shuffle groups: temporal stride = group size
    b.temporal_stride = cfg.group_size
    bad = b.violations()
    if bad:
        raise InputError("; ".join(bad))
    return b


class CubeProject(nn.Module):
    """3-D convolutional tokenizer: clip [B,C,T,H,W] -> token grid [B,C0,T',H',W'].

    temporal padding is 0 for kernel 2 and 1 for kernel 3, so a kernel-2
    cube with stride 2 reads each frame pair exactly once (no group overlap).
    """

    def __init__(self, bcfg: BackboneConfig):
        super().__init__()
        pad_t = 1 if bcfg.temporal_kernel == 3 else 0
        pad_s = bcfg.spatial_patch // 2 if bcfg.spatial_patch != bcfg.spatial_stride else 0
        self.conv = nn.Conv3d(
            bcfg.in_channels,
            bcfg.stage_channels[0],
            kernel_size=(bcfg.temporal_kernel, bcfg.spatial_patch, bcfg.spatial_patch),
            stride=(bcfg.temporal_stride, bcfg.spatial_stride, bcfg.spatial_stride),
            padding=(pad_t, pad_s, pad_s),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5:
            raise InputError(f"expected [B,C,T,H,W], got shape {tuple(x.shape)}")
        return self.conv(x)


class Attention(nn.Module):
    """Standard multi-head self-attention with explicit softmax (no dropout)."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, d // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class StageTransition(nn.Module):
    """Stride-2 spatial average pooling of the token grid + channel expansion."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.proj = nn.Linear(dim_in, dim_out)

    def forward(self, x: torch.Tensor, thw: tuple[int, int, int]):
        t, h, w = thw
        if h % 2 or w % 2:
            raise InputError(f"token grid {h}x{w} not divisible by 2 at stage transition")
        cls, grid = x[:, :1], x[:, 1:]
        b, n, d = grid.shape
        grid = grid.reshape(b * t, h, w, d).permute(0, 3, 1, 2)
        grid = F.avg_pool2d(grid, kernel_size=2, stride=2)
        grid = grid.permute(0, 2, 3, 1).reshape(b, t * (h // 2) * (w // 2), d)
        x = torch.cat([cls, grid], dim=1)
        return self.proj(x), (t, h // 2, w // 2)


class VideoEncoder(nn.Module):
    """Backbone: cube tokens + CLS + positional embeddings + multiscale stages."""

    def __init__(self, bcfg: BackboneConfig, clip_len: int, crop_size: int):
        super().__init__()
        bad = bcfg.violations()
        if bad:
            raise InputError("; ".join(bad))
        self.bcfg = bcfg
        self.grid_t = _conv_out(clip_len, bcfg.temporal_kernel, bcfg.temporal_stride,
                                1 if bcfg.temporal_kernel == 3 else 0)
        pad_s = bcfg.spatial_patch // 2 if bcfg.spatial_patch != bcfg.spatial_stride else 0
        self.grid_h = _conv_out(crop_size, bcfg.spatial_patch, bcfg.spatial_stride, pad_s)
        self.grid_w = self.grid_h
        if self.grid_t < 1 or self.grid_h < 1:
            raise InputError(
                f"clip {clip_len}x{crop_size}^2 too small for patch geometry"
            )

        c0 = bcfg.stage_channels[0]
        self.cube = CubeProject(bcfg)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c0))
        self.pos_time = nn.Parameter(torch.zeros(self.grid_t, c0))
        self.pos_space = nn.Parameter(torch.zeros(self.grid_h * self.grid_w, c0))
        self.pos_cls = nn.Parameter(torch.zeros(1, c0))

        self.stages = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for i, (dim, n_blocks, n_heads) in enumerate(
            zip(bcfg.stage_channels, bcfg.stage_blocks, bcfg.stage_heads)
        ):
            if i > 0:
                self.transitions.append(StageTransition(bcfg.stage_channels[i - 1], dim))
            self.stages.append(
                nn.ModuleList([Block(dim, n_heads, bcfg.mlp_ratio) for _ in range(n_blocks)])
            )
        self.norm = nn.LayerNorm(bcfg.stage_channels[-1])
        self.out_dim = bcfg.stage_channels[-1]
        self.clip_forwards = 0  # instrumentation: clips seen by forward()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode clips [B,C,T,H,W] -> (repr [B,D], patch tokens [B,N,D])."""
        self.clip_forwards += x.shape[0]
        grid = self.cube(x)  # [B, C0, T', H', W']
        b, c, t, h, w = grid.shape
        if (t, h, w) != (self.grid_t, self.grid_h, self.grid_w):
            raise InputError(
                f"token grid {(t, h, w)} does not match configured "
                f"{(self.grid_t, self.grid_h, self.grid_w)}"
            )
        tokens = grid.permute(0, 2, 3, 4, 1).reshape(b, t * h * w, c)
        pos = (self.pos_time[:, None, :] + self.pos_space[None, :, :]).reshape(t * h * w, c)
        tokens = tokens + pos
        cls = (self.cls_token + self.pos_cls).expand(b, -1, -1)
        x = torch.cat([cls, tokens], dim=1)

        thw = (t, h, w)
        for i, blocks in enumerate(self.stages):
            if i > 0:
                x, thw = self.transitions[i - 1](x, thw)
            for blk in blocks:
                x = blk(x)
            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite activations at stage {i}")
        x = self.norm(x)

        patch_tokens = x[:, 1:]
        if self.bcfg.pooling_mode == "AVG":
            rep = patch_tokens.mean(dim=1)
        else:
            rep = x[:, 0]
        return rep, patch_tokens


class ProjectionHead(nn.Module):
    """linear -> ReLU -> linear -> L2 normalization onto the unit sphere."""

    def __init__(self, dim_in: int, hidden: int, out: int):
        super().__init__()
        self.fc1 = nn.Linear(dim_in, hidden)
        self.fc2 = nn.Linear(hidden, out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.fc2(F.relu(self.fc1(x)))
        norm = z.norm(dim=-1, keepdim=True)
        if (norm < 1e-12).any():
            raise NumericalError("degenerate pre-norm embedding")
        return z / norm


class ContrastiveModel(nn.Module):
    """Shared backbone with one projection head per objective.

    heads_mode="shared" aliases the two heads to the same parameters. The
    binary shuffle-detection head used by the pretext baseline is always
    present (it is tiny) so checkpoints share one layout across objectives.
    """

    def __init__(self, cfg: Config, bcfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg
        bcfg = bcfg if bcfg is not None else backbone_config_for(cfg)
        self.backbone = VideoEncoder(bcfg, cfg.clip_len, cfg.crop_size)
        self.head_v = ProjectionHead(self.backbone.out_dim, cfg.head_hidden, cfg.head_out)
        if cfg.heads_mode == "shared":
            self.head_t = self.head_v
        else:
            self.head_t = ProjectionHead(self.backbone.out_dim, cfg.head_hidden, cfg.head_out)
        self.head_cls = nn.Linear(self.backbone.out_dim, 1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        rep, _ = self.backbone(x)
        return rep

    def embed_visual(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_v(self.encode(x))

    def embed_temporal(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_t(self.encode(x))


# ---------------------------------------------------------------------------
# initialization / utilities
# ---------------------------------------------------------------------------


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _trunc_normal(rng: Rng, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range values."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2 * std
    return vals


def init_parameters(model: nn.Module, rng: Rng) -> None:
    """Deterministic init: trunc-normal weights, zero biases, zero CLS token.

    Iterates parameters in registration order, so the same seed always
    produces the same parameter values.
    """
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".bias") or "cls_token" in name:
                p.zero_()
            elif "norm" in name and p.ndim == 1:
                p.fill_(1.0)
            else:
                vals = _trunc_normal(rng, tuple(p.shape))
                p.copy_(torch.from_numpy(vals).to(p.dtype))


def make_model(
    cfg: Config,
    rng: Rng,
    dtype: torch.dtype = torch.float32,
    bcfg: BackboneConfig | None = None,
) -> ContrastiveModel:
    model = ContrastiveModel(cfg, bcfg).to(dtype)
    init_parameters(model, rng)
    return model


def clone_momentum(model: ContrastiveModel) -> ContrastiveModel:
    """Exact copy of the online model with gradients disabled."""
    m = copy.deepcopy(model)
    for p in m.parameters():
        p.requires_grad_(False)
    m.eval()
    return m


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def clips_to_tensor(
    clips: list[VideoTensor] | VideoTensor, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Stack clips into a [B, C, T, H, W] batch tensor."""
    if isinstance(clips, VideoTensor):
        clips = [clips]
    arrs = [np.transpose(c.frames, (3, 0, 1, 2)) for c in clips]
    return torch.from_numpy(np.stack(arrs)).to(dtype)
