"""Synthetic corpus generation and loading in the precomputed layout.

A corpus root holds ``seq_0000/ ... seq_NNNN/`` video directories plus a
``corpus.json`` index. Frame 0 of each sequence doubles as the source image,
so driving index 0 is the no-motion pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .agcn import stack_states
from .coarse import count_frames, generate_coarse_stub, load_all, pair_seed, write_precomputed
from .config import Config
from .synth import sample_sequence

INDEX_FILE = "corpus.json"


def identity_seed(data_seed: int, sequence: int) -> int:
    return int(np.random.SeedSequence([int(data_seed), int(sequence), 17]).generate_state(1)[0] % 2**31)


def generate_sequence(cfg: Config, k: int):
    """Return (spec, source, source_state, [(driving, coarse, state), ...]) for sequence k."""
    d = cfg.data
    spec = cfg.synth_spec(identity_seed(d.seed, k))
    rng = np.random.default_rng([int(d.seed), int(k), 1])
    frames = sample_sequence(spec, d.seq_length, rng, step_bound=d.step_bound)
    source, source_state = frames[0]
    pairs = []
    for j, (driving, state) in enumerate(frames):
        degrade = cfg.degrade_spec(pair_seed(d.seed, k, j))
        coarse = generate_coarse_stub(spec, source, source_state, state, degrade)
        pairs.append((driving, coarse, state))
    return spec, source, source_state, pairs


def generate_corpus(cfg: Config, root: Path) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    seqs = []
    for k in range(d.n_sequences):
        spec, source, source_state, pairs = generate_sequence(cfg, k)
        name = f"seq_{k:04d}"
        write_precomputed(root / name, source, pairs, source_state)
        seqs.append({"name": name, "identity_seed": spec.identity_seed, "frames": len(pairs)})
    heldout = [s["name"] for s in seqs[d.n_sequences - d.n_heldout:]]
    index = {
        "format": "fadm-corpus-1",
        "sequences": seqs,
        "heldout": heldout,
        "data": cfg.to_dict()["data"],
    }
    (root / INDEX_FILE).write_text(json.dumps(index, indent=2))
    return index


def list_sequences(root: Path) -> tuple[list, list]:
    """(train names, held-out names). Without an index every directory is training data."""
    root = Path(root)
    idx = root / INDEX_FILE
    if idx.is_file():
        index = json.loads(idx.read_text())
        names = [s["name"] for s in index["sequences"]]
        held = set(index.get("heldout", []))
        return [n for n in names if n not in held], [n for n in names if n in held]
    if count_frames(root):
        return [""], []
    names = sorted(p.name for p in root.iterdir() if p.is_dir() and count_frames(p))
    return names, []


@dataclass
class PairTensors:
    """Stacked frames (N, 3, H, W) float32 and states (N, E+P)."""

    source: torch.Tensor
    driving: torch.Tensor
    coarse: torch.Tensor
    state_s: torch.Tensor
    state_d: torch.Tensor
    keys: list

    def __len__(self) -> int:
        return self.driving.shape[0]

    def subset(self, idx) -> "PairTensors":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return PairTensors(
            self.source[idx], self.driving[idx], self.coarse[idx],
            self.state_s[idx], self.state_d[idx], [self.keys[i] for i in idx.tolist()],
        )


def frames_to_tensor(frames) -> torch.Tensor:
    arr = np.stack([np.asarray(f, dtype=np.float32) for f in frames])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def tensor_to_frames(x: torch.Tensor) -> list:
    return [f for f in x.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)]


def pairs_to_tensors(pairs, keys=None) -> PairTensors:
    return PairTensors(
        source=frames_to_tensor([p.source for p in pairs]),
        driving=frames_to_tensor([p.driving for p in pairs]),
        coarse=frames_to_tensor([p.coarse for p in pairs]),
        state_s=stack_states([p.source_state for p in pairs]).float(),
        state_d=stack_states([p.driving_state for p in pairs]).float(),
        keys=list(keys) if keys is not None else list(range(len(pairs))),
    )


def load_split(root: Path, cfg: Config, split: str = "train") -> Optional[PairTensors]:
    train, held = list_sequences(root)
    names = {"train": train, "heldout": held, "all": train + held}[split]
    pairs, keys = [], []
    for name in names:
        seq = load_all(Path(root) / name, resolution=cfg.data.resolution,
                       exp_dim=cfg.data.exp_dim, pose_dim=cfg.data.pose_dim)
        pairs.extend(seq)
        keys.extend((name, i) for i in range(len(seq)))
    if not pairs:
        return None
    return pairs_to_tensors(pairs, keys)
