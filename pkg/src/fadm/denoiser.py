"""Conditional noise-prediction U-Net.

The fused conditioning map is concatenated to the noisy input at the top
level; the timestep enters every residual block through a learned projection
of its sinusoidal embedding.

Two output parameterisations, both returning predicted noise:

``eps``       the network output is the noise estimate itself.
``anchored``  the network output F is a correction to the coarse frame g, read
              as a clean-image estimate x0_hat = g + F and converted to noise,
              z_hat = (x_t - sqrt(abar_t) * x0_hat) / sqrt(1 - abar_t).
              With the zero-initialised output layer an untrained model
              samples g exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .layers import ResBlock, conv3x3, norm, timestep_embedding

PARAMETERIZATIONS = ("eps", "anchored")


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 2)
    cond_channels: int = 16
    resolution: int = 64
    image_channels: int = 3
    emb_dim: int = 64
    zero_init_out: bool = True
    parameterization: str = "eps"

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    def validate(self) -> None:
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}, got {self.parameterization!r}")
        if self.levels < 2:
            raise ValueError("denoiser needs at least 2 levels")
        if self.resolution % 2 ** (self.levels - 1):
            raise ValueError(
                f"resolution {self.resolution} not divisible by 2^{self.levels - 1}"
            )


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig, alpha_bars: Optional[torch.Tensor] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.parameterization == "anchored" and alpha_bars is None:
            raise ValueError("the anchored parameterisation needs the schedule's alpha_bars")
        # not persistent: the schedule is part of the config, not of the weights
        self.register_buffer("alpha_bars", None if alpha_bars is None else alpha_bars.clone(), persistent=False)
        emb = cfg.emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        chans = [cfg.base_channels * m for m in cfg.channel_mults]

        self.stem = conv3x3(cfg.image_channels + cfg.cond_channels, chans[0])
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        c_prev = chans[0]
        for i, c in enumerate(chans):
            self.down_blocks.append(ResBlock(c_prev, c, emb))
            c_prev = c
            if i < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock(c_prev, c_prev, emb)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(chans))):
            self.up_blocks.append(ResBlock(c_prev + chans[i], chans[i], emb))
            c_prev = chans[i]
            if i > 0:
                self.upsamples.append(conv3x3(c_prev, c_prev))
        self.out_norm = norm(c_prev)
        self.out = conv3x3(c_prev, cfg.image_channels)
        if cfg.zero_init_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond) -> torch.Tensor:
        fused = getattr(cond, "fused", cond)
        expected = (self.cfg.cond_channels, x_t.shape[-2], x_t.shape[-1])
        if x_t.shape[-1] != self.cfg.resolution or tuple(fused.shape[1:]) != expected:
            raise ValueError(
                f"denoiser expects x_t at {self.cfg.resolution}px and cond {expected}, "
                f"got x_t {tuple(x_t.shape)} cond {tuple(fused.shape)}"
            )
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.cfg.emb_dim).to(x_t.dtype))
        h = self.stem(torch.cat([x_t, fused.to(x_t.dtype)], dim=1))
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = self.mid(h, emb)
        for j, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if j < len(self.upsamples):
                h = self.upsamples[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.out(F.silu(self.out_norm(h)))
        if self.cfg.parameterization == "eps":
            return out
        anchor = getattr(cond, "anchor", None)
        if anchor is None:
            raise ValueError("the anchored parameterisation needs cond.anchor (the coarse frame)")
        abar = self.alpha_bars.to(x_t.dtype)[t].view(-1, 1, 1, 1)
        return (x_t - abar.sqrt() * (anchor.to(x_t.dtype) + out)) / (1.0 - abar).sqrt()


def predict_noise(model: Denoiser, x_t: torch.Tensor, t, cond) -> torch.Tensor:
    if not isinstance(t, torch.Tensor):
        t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    return model(x_t, t, cond)
