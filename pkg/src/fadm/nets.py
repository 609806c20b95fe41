"""Container for every trainable network in the refinement model."""

import torch
from torch import nn

from .agcn import AGCN
from .config import Config
from .denoiser import Denoiser
from .diffusion import make_schedule


class FADMNets(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        d = cfg.diffusion
        schedule = make_schedule(d.kind, d.T, d.beta_start, d.beta_end)
        self.denoiser = Denoiser(cfg.denoiser_config(), schedule.alpha_bars.float())
        self.agcn = AGCN(cfg.agcn_config())


def build_nets(cfg: Config, seed: int | None = None) -> FADMNets:
    """Networks initialised from ``seed`` (defaults to ``cfg.train.seed``)."""
    seed = cfg.train.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return FADMNets(cfg)
