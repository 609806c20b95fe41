"""Joint optimisation of the denoiser and the conditioning networks.

total = L_d + lambda_color * L_color, where L_d is the noise-prediction MSE at
a uniformly drawn timestep and L_color aligns the appearance codes of the
driving and coarse frames.
"""

from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .agcn import Conditioner, color_loss
from .config import Config, from_dict
from .dataset import PairTensors
from .diffusion import NoiseSchedule, forward_diffuse, make_schedule
from .nets import FADMNets, build_nets

log = logging.getLogger(__name__)

MAGIC = "FADM-CKPT-1"

# config fields that change tensor shapes or what the outputs mean; a checkpoint
# must agree on all of them
ARCH_FIELDS = (
    "data.resolution", "data.exp_dim", "data.pose_dim",
    "model.base_channels", "model.channel_mults", "model.denoiser_emb_dim", "model.cond_channels",
    "model.appearance_channels", "model.motion_channels", "model.hidden", "model.mlp_hidden",
    "model.emb_dim", "model.appearance_factor", "model.K", "model.parameterization",
    "diffusion.kind", "diffusion.T", "diffusion.beta_start", "diffusion.beta_end",
)


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def schedule_from(cfg: Config) -> NoiseSchedule:
    d = cfg.diffusion
    sched = make_schedule(d.kind, d.T, d.beta_start, d.beta_end)
    if float(sched.alpha_bars[-1]) > 0.01:
        # sampling starts from N(0, I), which is only right when x_T is nearly pure noise
        log.warning("alpha_bar_T = %.3f: x_T keeps signal the sampler's N(0, I) start does not have",
                    float(sched.alpha_bars[-1]))
    return sched


def diffusion_loss(x0, t, noise, cond, model, schedule: NoiseSchedule) -> torch.Tensor:
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    if not isinstance(t, torch.Tensor):
        t = torch.full((x0.shape[0],), int(t), dtype=torch.long)
    x_t = forward_diffuse(x0, t, noise, schedule)
    return F.mse_loss(model(x_t, t, cond), noise)


@dataclass
class Batch:
    driving: torch.Tensor
    coarse: torch.Tensor
    state_s: torch.Tensor
    state_d: torch.Tensor

    @classmethod
    def from_pairs(cls, data: PairTensors, idx=None) -> "Batch":
        if idx is not None:
            data = data.subset(idx)
        return cls(data.driving, data.coarse, data.state_s, data.state_d)


def compute_losses(
    batch: Batch, nets: FADMNets, schedule: NoiseSchedule, gen: torch.Generator, cfg: Config
) -> dict:
    """Forward pass of one training step; returns tensors {L_d, L_color, total}."""
    n = batch.driving.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    ablation = cfg.train.ablation
    t = torch.randint(1, schedule.T + 1, (n,), generator=gen)
    noise = torch.randn(batch.driving.shape, generator=gen)
    # training branch: appearance from the driving frame unless ablated
    app_src = batch.coarse if ablation == "no-appearance" else batch.driving
    cond = Conditioner(nets.agcn, batch.coarse, batch.state_s, batch.state_d, app_src, ablation)(t)
    l_d = diffusion_loss(batch.driving, t, noise, cond, nets.denoiser, schedule)
    if ablation == "no-appearance":
        l_color = torch.zeros((), dtype=l_d.dtype)
    else:
        l_color = color_loss(batch.driving, batch.coarse, nets.agcn.p_conv)
    total = l_d + cfg.train.lambda_color * l_color
    for name, val in (("L_d", l_d), ("L_color", l_color), ("total", total)):
        if not torch.isfinite(val):
            raise NonFiniteLossError(f"non-finite {name} = {float(val.detach())}")
    return {"L_d": l_d, "L_color": l_color, "total": total}


def make_optimizer(nets: FADMNets, cfg: Config) -> torch.optim.Optimizer:
    t = cfg.train
    return torch.optim.Adam(nets.parameters(), lr=t.lr, betas=(t.beta1, t.beta2))


def train_step(batch: Batch, nets, optimizer, schedule, gen, cfg) -> dict:
    nets.train()
    losses = compute_losses(batch, nets, schedule, gen, cfg)
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


class Trainer:
    """Owns nets, optimiser and every RNG stream, so a checkpoint can resume exactly."""

    def __init__(self, cfg: Config, data: PairTensors, nets: Optional[FADMNets] = None):
        self.cfg = cfg
        self.data = data
        self.schedule = schedule_from(cfg)
        self.nets = nets if nets is not None else build_nets(cfg)
        self.optimizer = make_optimizer(self.nets, cfg)
        self.gen = torch.Generator().manual_seed(int(cfg.train.seed) + 1)
        self.order_gen = torch.Generator().manual_seed(int(cfg.train.seed) + 2)
        self.step = 0
        self.order = torch.empty(0, dtype=torch.long)
        self.cursor = 0

    def next_indices(self) -> torch.Tensor:
        bs = min(self.cfg.train.batch_size, len(self.data))
        if self.cursor + bs > len(self.order):
            self.order = torch.randperm(len(self.data), generator=self.order_gen)
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + bs]
        self.cursor += bs
        return idx

    def run(
        self,
        steps: int,
        log: Optional[Callable[[dict], None]] = None,
        checkpoint: Optional[Callable[["Trainer"], None]] = None,
    ) -> list:
        records = []
        start = time.time()
        for _ in range(steps):
            batch = Batch.from_pairs(self.data, self.next_indices())
            losses = train_step(batch, self.nets, self.optimizer, self.schedule, self.gen, self.cfg)
            self.step += 1
            rec = {"step": self.step, **losses, "wall_time": time.time() - start}
            records.append(rec)
            if log is not None and self.step % max(1, self.cfg.train.log_every) == 0:
                log(rec)
            every = self.cfg.train.checkpoint_every
            if checkpoint is not None and every and self.step % every == 0:
                checkpoint(self)
        return records

    # -- checkpointing ------------------------------------------------------

    def state(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "gen": self.gen.get_state(),
            "order_gen": self.order_gen.get_state(),
            "order": self.order.clone(),
            "cursor": self.cursor,
        }

    def load_state(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.gen.set_state(state["gen"])
        self.order_gen.set_state(state["order_gen"])
        self.order = state["order"].clone()
        self.cursor = int(state["cursor"])

    def save(self, path: Path) -> None:
        save_checkpoint(self.nets, self.cfg, self.step, path, trainer_state=self.state())

    @classmethod
    def resume(cls, path: Path, data: PairTensors, cfg: Optional[Config] = None) -> "Trainer":
        nets, ckpt_cfg, step, state = load_checkpoint(path, cfg, with_state=True)
        trainer = cls(cfg or ckpt_cfg, data, nets=nets)
        trainer.step = step
        if state is not None:
            trainer.load_state(state)
        return trainer


def write_log_line(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def read_log(path: Path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def save_checkpoint(nets: FADMNets, cfg: Config, step: int, path: Path, trainer_state: Optional[dict] = None) -> None:
    payload = {
        "magic": MAGIC,
        "config": cfg.to_dict(),
        "step": int(step),
        "nets": nets.state_dict(),
        "trainer": trainer_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())


def _get(d: dict, dotted: str):
    for part in dotted.split("."):
        d = d[part]
    return d


def config_diff(a: dict, b: dict, keys=ARCH_FIELDS) -> list:
    return [(k, _get(a, k), _get(b, k)) for k in keys if _get(a, k) != _get(b, k)]


def load_checkpoint(path: Path, cfg: Optional[Config] = None, with_state: bool = False):
    """Return (nets, config); with ``with_state`` also (step, trainer_state).

    When ``cfg`` is given, the checkpoint's architecture fields must match it.
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises several unrelated types for foreign files
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from None
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected {MAGIC!r}")
    saved = from_dict(payload["config"])
    if cfg is not None:
        diff = config_diff(saved.to_dict(), cfg.to_dict())
        if diff:
            detail = ", ".join(f"{k}: checkpoint={a!r} config={b!r}" for k, a, b in diff)
            raise CheckpointError(f"{path}: incompatible config ({detail})")
    nets = FADMNets(cfg or saved)
    nets.load_state_dict(payload["nets"])
    if with_state:
        return nets, saved, payload["step"], payload.get("trainer")
    return nets, saved


def appearance_gap(nets: FADMNets, data: PairTensors, batch_size: int = 64) -> float:
    """Mean MSE between appearance codes of driving and coarse frames."""
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            d = data.driving[i:i + batch_size]
            g = data.coarse[i:i + batch_size]
            a_d, a_g = nets.agcn.p_conv(d), nets.agcn.p_conv(g)
            total += float(((a_d - a_g) ** 2).mean(dim=(1, 2, 3)).sum())
            n += d.shape[0]
    return total / max(n, 1)
