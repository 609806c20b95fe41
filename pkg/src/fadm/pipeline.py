"""Inference: refine coarse frames, rectify whole videos, score against references."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .agcn import Conditioner
from .coarse import CoarsePair
from .dataset import PairTensors, pairs_to_tensors, tensor_to_frames
from .diffusion import NoiseSchedule, sample
from .metrics import psnr, ssim
from .nets import FADMNets


def frame_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def refine_tensors(
    coarse: torch.Tensor,
    state_s: torch.Tensor,
    state_d: torch.Tensor,
    nets: FADMNets,
    schedule: NoiseSchedule,
    seeds: Sequence[int],
    ablation: str = "none",
    sampler: str = "ancestral",
    ddim_steps: int = 20,
    clip_denoised: bool = True,
) -> torch.Tensor:
    """Refine a batch of coarse frames (B, 3, H, W); item i uses its own ``seeds[i]`` stream.

    The appearance code comes from the coarse frame. Motion weight and fusion
    are recomputed at every timestep; the appearance code and per-level
    motion features are computed once.
    """
    res = nets.denoiser.cfg.resolution
    if coarse.shape[-1] != res or coarse.shape[-2] != res:
        raise ValueError(f"frames are {tuple(coarse.shape[-2:])}, checkpoint expects {res}x{res}")
    nets.eval()
    with torch.no_grad():
        cond = Conditioner(nets.agcn, coarse, state_s, state_d, None, ablation)
        return sample(cond, nets.denoiser, schedule, list(seeds), tuple(coarse.shape),
                      sampler=sampler, ddim_steps=ddim_steps, clip_denoised=clip_denoised)


def refine_frame(pair: CoarsePair, nets: FADMNets, schedule: NoiseSchedule, seed: int, **kw) -> np.ndarray:
    data = pairs_to_tensors([pair])
    out = refine_tensors(data.coarse, data.state_s, data.state_d, nets, schedule, [seed], **kw)
    return tensor_to_frames(out)[0]


def refine_dataset(
    data: PairTensors, nets: FADMNets, schedule: NoiseSchedule, seed: int, batch_size: int = 32, **kw
) -> torch.Tensor:
    outs = []
    for i in range(0, len(data), batch_size):
        j = min(i + batch_size, len(data))
        seeds = [frame_seed(seed, k) for k in range(i, j)]
        outs.append(refine_tensors(data.coarse[i:j], data.state_s[i:j], data.state_d[i:j],
                                   nets, schedule, seeds, **kw))
    return torch.cat(outs)


def rectify_video(
    frames: Sequence[np.ndarray],
    nets: FADMNets,
    schedule: NoiseSchedule,
    seed: int,
    provider,
    batch_size: int = 16,
    **kw,
) -> list:
    """Refine every frame of an existing animation, with frame 0 as the source.

    ``provider.get(i)`` must supply the MotionState of frame i.
    """
    if len(frames) < 2:
        raise ValueError(f"rectify_video needs at least 2 frames, got {len(frames)}")
    states = []
    for i in range(len(frames)):
        try:
            states.append(provider.get(i))
        except (KeyError, FileNotFoundError) as e:
            raise LookupError(f"no motion state for frame {i}: {e}") from e
    source_state = states[0]
    pairs = [CoarsePair(frames[0], f, f, source_state, st) for f, st in zip(frames, states)]
    data = pairs_to_tensors(pairs)
    out = refine_dataset(data, nets, schedule, seed, batch_size=batch_size, **kw)
    return tensor_to_frames(out)


def compare(refined: torch.Tensor, data: PairTensors) -> dict:
    """Per-frame PSNR/SSIM of refined and coarse frames against the driving truth."""
    ref, coarse, truth = (tensor_to_frames(x) for x in (refined, data.coarse, data.driving))
    rows = {
        "psnr_refined": [psnr(r, t) for r, t in zip(ref, truth)],
        "psnr_coarse": [psnr(c, t) for c, t in zip(coarse, truth)],
        "ssim_refined": [ssim(r, t) for r, t in zip(ref, truth)],
        "ssim_coarse": [ssim(c, t) for c, t in zip(coarse, truth)],
    }
    return {k: float(np.mean(v)) for k, v in rows.items()} | {"rows": rows}


def eval_subset(data: PairTensors, n: int) -> PairTensors:
    """Evenly spaced subset of at most ``n`` pairs (deterministic)."""
    if n >= len(data):
        return data
    idx = np.linspace(0, len(data) - 1, n).round().astype(int)
    return data.subset(idx.tolist())
