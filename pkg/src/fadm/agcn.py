"""Attribute-guided conditioning: appearance code, motion-weighted pyramid, fusion.

The appearance encoder sees a 1/4-resolution frame (the driving frame during
training, the coarse frame during inference). The motion MLP turns the
pose/expression difference between source and driving into a scalar weight
``w``, which is spread across the K pyramid levels with

    w_i = (K - i) / K * exp(w - alpha) + i / K * exp(alpha - w),   i = 1..K

where level 1 is the lowest resolution. Large motion (w > alpha) favours the
coarse levels, small motion favours the sharp ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import conv3x3, timestep_embedding

EXP_CLAMP = 20.0


@dataclass
class MotionState:
    exp: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        self.exp = np.asarray(self.exp, dtype=np.float64).reshape(-1)
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.exp)) and np.all(np.isfinite(self.pose))):
            raise ValueError("MotionState entries must be finite")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.exp, self.pose])

    def to_json(self) -> dict:
        return {"exp": self.exp.tolist(), "pose": self.pose.tolist()}


def stack_states(states: Sequence[MotionState]) -> torch.Tensor:
    """(B, E+P) float tensor of concatenated [exp, pose] vectors."""
    dims = {(s.exp.size, s.pose.size) for s in states}
    if len(dims) != 1:
        raise ValueError(f"MotionState dimensions differ within batch: {sorted(dims)}")
    return torch.tensor(np.stack([s.vector() for s in states]), dtype=torch.get_default_dtype())


@dataclass
class WeightingConfig:
    alpha: float = 0.3
    K: int = 3

    def validate(self) -> None:
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")


@dataclass
class AGCNConfig:
    exp_dim: int = 8
    pose_dim: int = 4
    appearance_channels: int = 16
    motion_channels: int = 16
    cond_channels: int = 16
    hidden: int = 32
    mlp_hidden: int = 64
    emb_dim: int = 32
    resolution: int = 64
    appearance_factor: int = 4
    alpha: float = 0.3
    K: int = 3

    @property
    def weighting(self) -> WeightingConfig:
        return WeightingConfig(alpha=self.alpha, K=self.K)

    @property
    def pyramid_sizes(self) -> list:
        """Spatial sizes g_1 (lowest) .. g_K (working resolution)."""
        return [self.resolution // 2 ** (self.K - 1 - i) for i in range(self.K)]

    @property
    def code_size(self) -> int:
        return self.resolution // self.appearance_factor


class AppearanceEncoder(nn.Module):
    """P_Conv: a shallow CNN over the downsampled frame."""

    def __init__(self, cfg: AGCNConfig):
        super().__init__()
        self.factor = cfg.appearance_factor
        self.resolution = cfg.resolution
        self.net = nn.Sequential(
            conv3x3(3, cfg.hidden), nn.SiLU(),
            conv3x3(cfg.hidden, cfg.hidden), nn.SiLU(),
            conv3x3(cfg.hidden, cfg.appearance_channels),
            # fixed-scale code: L_color then measures alignment, not magnitude
            nn.GroupNorm(1, cfg.appearance_channels, affine=False),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-1] != self.resolution:
            raise ValueError(
                f"appearance encoder expects (B, 3, {self.resolution}, {self.resolution}), "
                f"got {tuple(image.shape)}"
            )
        return self.net(F.avg_pool2d(image, self.factor))


class MotionMLP(nn.Module):
    """f_theta: scalar motion weight from a state difference and a timestep."""

    def __init__(self, cfg: AGCNConfig):
        super().__init__()
        self.in_dim = cfg.exp_dim + cfg.pose_dim
        self.emb_dim = cfg.emb_dim
        self.net = nn.Sequential(
            nn.Linear(self.in_dim + cfg.emb_dim, cfg.mlp_hidden), nn.SiLU(),
            nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden), nn.SiLU(),
            nn.Linear(cfg.mlp_hidden, 1),
        )

    def forward(self, diff: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if diff.shape[-1] != self.in_dim:
            raise ValueError(f"motion MLP expects {self.in_dim} inputs, got {diff.shape[-1]}")
        if t.dim() == 0:
            t = t.expand(diff.shape[0])
        emb = timestep_embedding(t, self.emb_dim).to(diff.dtype)
        return self.net(torch.cat([diff, emb], dim=1)).squeeze(-1)


class MotionEncoder(nn.Module):
    """P_motion: shared CNN over each pyramid level with the appearance code
    resized and concatenated; outputs are upsampled to the working resolution."""

    def __init__(self, cfg: AGCNConfig):
        super().__init__()
        self.resolution = cfg.resolution
        self.net = nn.Sequential(
            conv3x3(3 + cfg.appearance_channels, cfg.hidden), nn.SiLU(),
            conv3x3(cfg.hidden, cfg.hidden), nn.SiLU(),
            conv3x3(cfg.hidden, cfg.motion_channels),
        )

    def forward(self, g: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        a = F.interpolate(a, size=g.shape[-2:], mode="bilinear", align_corners=False)
        h = self.net(torch.cat([g, a], dim=1))
        if h.shape[-1] != self.resolution:
            h = F.interpolate(h, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False)
        return h


class ConditionFuser(nn.Module):
    """P_cond: merges appearance and motion maps; the timestep embedding is
    added to the intermediate features."""

    def __init__(self, cfg: AGCNConfig):
        super().__init__()
        self.emb_dim = cfg.emb_dim
        self.conv_in = conv3x3(cfg.appearance_channels + cfg.motion_channels, cfg.hidden)
        self.emb = nn.Linear(cfg.emb_dim, cfg.hidden)
        self.conv_out = conv3x3(cfg.hidden, cfg.cond_channels)

    def forward(self, a: torch.Tensor, m: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        a_up = F.interpolate(a, size=m.shape[-2:], mode="bilinear", align_corners=False)
        h = self.conv_in(torch.cat([a_up, m], dim=1))
        if t.dim() == 0:
            t = t.expand(h.shape[0])
        h = h + self.emb(timestep_embedding(t, self.emb_dim).to(h.dtype))[:, :, None, None]
        return self.conv_out(F.silu(h))


class AGCN(nn.Module):
    def __init__(self, cfg: AGCNConfig):
        super().__init__()
        cfg.weighting.validate()
        self.cfg = cfg
        self.p_conv = AppearanceEncoder(cfg)
        self.f_theta = MotionMLP(cfg)
        self.p_motion = MotionEncoder(cfg)
        self.p_cond = ConditionFuser(cfg)


@dataclass
class ConditionBundle:
    a: torch.Tensor
    m: torch.Tensor
    fused: torch.Tensor
    t: torch.Tensor
    # coarse frame at working resolution, used by the anchored denoiser head
    anchor: Optional[torch.Tensor] = None


def _as_t(t, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.reshape(-1).expand(batch) if t.numel() == 1 else t.reshape(-1)
    return torch.full((batch,), int(t), dtype=torch.long)


def build_pyramid(frame: torch.Tensor, K: int = 3) -> list:
    """g_1 .. g_K by repeated 2x area downsampling; g_K is ``frame`` itself."""
    if K < 2:
        raise ValueError(f"pyramid needs K >= 2, got {K}")
    levels = [frame]
    for _ in range(K - 1):
        levels.append(F.avg_pool2d(levels[-1], 2))
    return levels[::-1]


def appearance_code(image: torch.Tensor, encoder: AppearanceEncoder) -> torch.Tensor:
    return encoder(image)


def color_loss(d: torch.Tensor, g: torch.Tensor, encoder: AppearanceEncoder) -> torch.Tensor:
    if d.shape != g.shape:
        raise ValueError(f"color_loss shape mismatch: {tuple(d.shape)} vs {tuple(g.shape)}")
    return F.mse_loss(encoder(d), encoder(g))


def motion_input(state_s: torch.Tensor, state_d: torch.Tensor) -> torch.Tensor:
    if state_s.shape != state_d.shape:
        raise ValueError(f"state dimension mismatch: {tuple(state_s.shape)} vs {tuple(state_d.shape)}")
    return state_s - state_d


def motion_weight(state_s: torch.Tensor, state_d: torch.Tensor, t, f_theta: nn.Module) -> torch.Tensor:
    """w per batch element; states are (B, E+P) tensors (see ``stack_states``)."""
    diff = motion_input(state_s, state_d)
    return f_theta(diff, _as_t(t, diff.shape[0]))


def resolution_weights(w, cfg: WeightingConfig):
    """Per-level weights, last axis indexes levels 1..K. Works on floats or tensors."""
    cfg.validate()
    K = cfg.K
    if isinstance(w, torch.Tensor):
        x = (w - cfg.alpha).clamp(-EXP_CLAMP, EXP_CLAMP).unsqueeze(-1)
        i = torch.arange(1, K + 1, dtype=x.dtype, device=x.device)
        return (K - i) / K * torch.exp(x) + i / K * torch.exp(-x)
    x = min(max(float(w) - cfg.alpha, -EXP_CLAMP), EXP_CLAMP)
    return [(K - i) / K * math.exp(x) + i / K * math.exp(-x) for i in range(1, K + 1)]


def motion_features(pyramid: Sequence[torch.Tensor], a: torch.Tensor, p_motion: MotionEncoder) -> list:
    """P_motion(g_i, a) per level; t-independent, so callers may cache it."""
    feats = [p_motion(g, a) for g in pyramid]
    shapes = {tuple(f.shape) for f in feats}
    if len(shapes) != 1:
        raise ValueError(f"P_motion outputs disagree in shape: {sorted(shapes)}")
    return feats


def combine_motion(feats: Sequence[torch.Tensor], weights) -> torch.Tensor:
    """m = sum_i w_i * feats_i; ``weights`` is (K,) or (B, K)."""
    weights = torch.as_tensor(weights, dtype=feats[0].dtype)
    if weights.shape[-1] != len(feats):
        raise ValueError(f"got {weights.shape[-1]} weights for {len(feats)} pyramid levels")
    if weights.dim() == 1:
        weights = weights.expand(feats[0].shape[0], -1)
    return sum(weights[:, i, None, None, None] * f for i, f in enumerate(feats))


def motion_condition(pyramid, a, weights, p_motion: MotionEncoder) -> torch.Tensor:
    return combine_motion(motion_features(pyramid, a, p_motion), weights)


def fuse_conditions(
    a: torch.Tensor, m: torch.Tensor, t, p_cond: ConditionFuser, anchor: Optional[torch.Tensor] = None
) -> ConditionBundle:
    if a.shape[0] != m.shape[0]:
        raise ValueError(f"batch mismatch between a {tuple(a.shape)} and m {tuple(m.shape)}")
    ts = _as_t(t, a.shape[0])
    return ConditionBundle(a=a, m=m, fused=p_cond(a, m, ts), t=ts, anchor=anchor)


class Conditioner:
    """Per-frame conditioning with the t-independent parts cached.

    ``condition(t)`` recomputes the motion weight and the fusion for timestep
    ``t``; the appearance code and per-level P_motion features are computed
    once. ``ablation`` is one of ``none``, ``no-appearance``, ``no-motion``.
    """

    def __init__(
        self,
        agcn: AGCN,
        coarse: torch.Tensor,
        state_s: torch.Tensor,
        state_d: torch.Tensor,
        appearance_source: Optional[torch.Tensor] = None,
        ablation: str = "none",
    ):
        self.agcn = agcn
        self.ablation = ablation
        self.state_s, self.state_d = state_s, state_d
        src = coarse if appearance_source is None else appearance_source
        self.a = agcn.p_conv(src)
        self.pyramid = build_pyramid(coarse, agcn.cfg.K)
        self.feats = motion_features(self.pyramid, self.a, agcn.p_motion)

    def weights(self, t) -> torch.Tensor:
        batch = self.a.shape[0]
        if self.ablation == "no-motion":
            w = torch.zeros(batch, self.agcn.cfg.K, dtype=self.a.dtype)
            w[:, -1] = 1.0
            return w
        w = motion_weight(self.state_s, self.state_d, t, self.agcn.f_theta)
        return resolution_weights(w, self.agcn.cfg.weighting)

    def __call__(self, t) -> ConditionBundle:
        m = combine_motion(self.feats, self.weights(t))
        return fuse_conditions(self.a, m, t, self.agcn.p_cond, anchor=self.pyramid[-1])
