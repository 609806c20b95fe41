"""Frame-quality and motion-faithfulness metrics.

Frames are (H, W, 3) arrays in [0, 1]. SSIM uses an 11x11 Gaussian window
(sigma 1.5) with K1 = 0.01, K2 = 0.03, population statistics, averaged over
the valid (unpadded) region and over channels.

Neural metrics (LPIPS, FID, CSIM, and the AED identity embedding) are plugin
providers: any callable taking two frame batches and returning a float can be
registered under a name and picked up by the evaluator.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Sequence

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0


def _check(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _check(a, b)
    return float(np.abs(a - b).mean())


def mse(a, b) -> float:
    a, b = _check(a, b)
    return float(((a - b) ** 2).mean())


def psnr(a, b) -> float:
    err = mse(a, b)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(1.0 / err)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ValueError(f"frames smaller than the {window}x{window} SSIM window")
    x = torch.from_numpy(a).permute(2, 0, 1)[:, None]
    y = torch.from_numpy(b).permute(2, 0, 1)[:, None]
    w = _gaussian_window(window, sigma)[None, None]

    def filt(z):
        return F.conv2d(z, w)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = k1**2, k2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def akd(landmarks_a, landmarks_b) -> float:
    """Mean Euclidean distance between corresponding keypoints, in pixels."""
    a = np.asarray(landmarks_a, dtype=np.float64)
    b = np.asarray(landmarks_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"keypoint cardinality mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean())


def aed(embed_a, embed_b) -> float:
    """Euclidean distance between identity embeddings, averaged over a batch
    when 2-D inputs are given."""
    a = np.atleast_2d(np.asarray(embed_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(embed_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean())


FrameMetric = Callable[[np.ndarray, np.ndarray], float]
BatchMetric = Callable[[Sequence[np.ndarray], Sequence[np.ndarray]], float]

FRAME_METRICS: Dict[str, FrameMetric] = {"l1": l1, "psnr": psnr, "ssim": ssim}
_PROVIDERS: Dict[str, BatchMetric] = {}


def register_provider(name: str, fn: BatchMetric) -> None:
    """Register a batch-level metric (e.g. an LPIPS, FID or CSIM backend)."""
    if name in FRAME_METRICS:
        raise ValueError(f"{name!r} is a built-in metric")
    _PROVIDERS[name] = fn


def unregister_provider(name: str) -> None:
    _PROVIDERS.pop(name, None)


def providers() -> Dict[str, BatchMetric]:
    return dict(_PROVIDERS)


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


def evaluate_frames(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray], landmark_fn=None) -> tuple[dict, list]:
    """Per-frame built-ins plus registered providers.

    ``landmark_fn(index, frame) -> (N, 2)`` enables AKD when given.
    Returns (report {metric: {mean, std, n}}, per-frame rows).
    """
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions for {len(targets)} targets")
    rows = []
    for i, (p, t) in enumerate(zip(preds, targets)):
        row = {"index": i, **{k: fn(p, t) for k, fn in FRAME_METRICS.items()}}
        if landmark_fn is not None:
            row["akd"] = akd(landmark_fn(i, p), landmark_fn(i, t))
        rows.append(row)
    keys = [k for k in rows[0] if k != "index"] if rows else []
    report = {k: summarize([r[k] for r in rows]) for k in keys}
    for name, fn in _PROVIDERS.items():
        report[name] = {"mean": float(fn(preds, targets)), "std": 0.0, "n": len(preds)}
    return report, rows
