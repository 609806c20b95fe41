"""Coarse animation frames: a degrading re-render stub and a precomputed-frame reader.

Precomputed layout (one directory per video)::

    <dir>/source.png
    <dir>/driving/000000.png ...
    <dir>/coarse/000000.png ...
    <dir>/states/000000.json ...    {"exp": [...], "pose": [...]}
    <dir>/source.json               optional; defaults to states/000000.json

Images are 8-bit RGB and indices run contiguously from 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .agcn import MotionState
from .face3d import MissingFileError, SidecarProvider, write_sidecar
from .synth import SynthSpec, check_state, render_face


class ResolutionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DegradeSpec:
    """Severity = floor + gain * ||normalised state difference||, capped.

    Each effect magnitude is ``per_unit * severity``: blur sigma and warp
    amplitude in pixels, color shift in intensity units, ghosting as the mixing
    weight of the source frame.
    """

    floor: float = 0.4
    gain: float = 1.2
    max_severity: float = 2.5
    blur_per_unit: float = 1.0
    warp_per_unit: float = 1.5
    color_per_unit: float = 0.06
    ghost_per_unit: float = 0.08
    warp_grid: int = 5
    seed: int = 0


@dataclass
class CoarsePair:
    source: np.ndarray
    driving: np.ndarray
    coarse: np.ndarray
    source_state: MotionState
    driving_state: MotionState

    def __post_init__(self):
        shapes = {self.source.shape, self.driving.shape, self.coarse.shape}
        if len(shapes) != 1:
            raise ResolutionMismatchError(f"frames differ in shape: {sorted(shapes)}")


def motion_distance(spec: SynthSpec, state_s: MotionState, state_d: MotionState) -> float:
    lo, hi = spec.ranges()
    half = (hi - lo) / 2.0
    return float(np.linalg.norm((state_s.vector() - state_d.vector()) / half))


def severity(spec: SynthSpec, state_s: MotionState, state_d: MotionState, degrade: DegradeSpec) -> float:
    s = degrade.floor + degrade.gain * motion_distance(spec, state_s, state_d)
    return float(min(s, degrade.max_severity))


def elastic_warp(img: np.ndarray, amplitude: float, grid: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement of up to roughly ``amplitude`` pixels."""
    n = img.shape[0]
    coarse = rng.uniform(-1.0, 1.0, size=(2, grid, grid))
    field = np.stack([ndimage.zoom(c, n / grid, order=3, mode="nearest")[:n, :n] for c in coarse])
    yy, xx = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    coords = [yy + amplitude * field[0], xx + amplitude * field[1]]
    return np.stack(
        [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[2])],
        axis=-1,
    )


def degrade_frame(
    clean: np.ndarray, sev: float, degrade: DegradeSpec, source: Optional[np.ndarray] = None
) -> np.ndarray:
    """Apply ghosting, elastic warp, blur and color shift at the given severity."""
    rng = np.random.default_rng([int(degrade.seed), 104729])
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    img = clean.astype(np.float64, copy=True)
    ghost = min(degrade.ghost_per_unit * sev, 0.5)
    if source is not None and ghost > 0:
        img = (1.0 - ghost) * img + ghost * source
    amp = degrade.warp_per_unit * sev
    if amp > 0:
        img = elastic_warp(img, amp, degrade.warp_grid, rng)
    sigma = degrade.blur_per_unit * sev
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
    shift = degrade.color_per_unit * sev
    if shift > 0:
        img = img + shift * direction
    return np.clip(img, 0.0, 1.0)


def generate_coarse_stub(
    spec: SynthSpec,
    source: Optional[np.ndarray],
    state_s: MotionState,
    state_d: MotionState,
    degrade: DegradeSpec,
) -> np.ndarray:
    """Re-render the face at the driving state, then degrade it in proportion to
    how far the driving state is from the source state."""
    check_state(spec, state_s)
    clean = render_face(spec, state_d)
    return degrade_frame(clean, severity(spec, state_s, state_d, degrade), degrade, source)


# -- image and layout I/O --------------------------------------------------------

def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: Path, frame: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = frame if frame.dtype == np.uint8 else to_uint8(frame)
    Image.fromarray(arr, mode="RGB").save(path)


def read_image(path: Path, resolution: Optional[int] = None) -> np.ndarray:
    """Float image in [0, 1]; resized (bilinear) only when ``resolution`` differs."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def frame_name(index: int, ext: str) -> str:
    return f"{index:06d}.{ext}"


def write_precomputed(directory: Path, source: np.ndarray, pairs: list, source_state: Optional[MotionState] = None) -> None:
    """Write ``pairs`` of (driving, coarse, driving_state) in the precomputed layout."""
    directory = Path(directory)
    write_image(directory / "source.png", source)
    for i, (driving, coarse, state) in enumerate(pairs):
        write_image(directory / "driving" / frame_name(i, "png"), driving)
        write_image(directory / "coarse" / frame_name(i, "png"), coarse)
        write_sidecar(directory / "states" / frame_name(i, "json"), state)
    if source_state is not None:
        write_sidecar(directory / "source.json", source_state)


def count_frames(directory: Path) -> int:
    directory = Path(directory)
    n = 0
    while (directory / "driving" / frame_name(n, "png")).is_file():
        n += 1
    return n


def load_precomputed(
    directory: Path,
    index: int,
    resolution: Optional[int] = None,
    exp_dim: Optional[int] = None,
    pose_dim: Optional[int] = None,
) -> CoarsePair:
    directory = Path(directory)
    n = count_frames(directory)
    if not 0 <= index < n:
        raise IndexError(f"frame index {index} out of range for {directory} ({n} frames)")
    provider = SidecarProvider(directory / "states", exp_dim=exp_dim, pose_dim=pose_dim)
    src_json = directory / "source.json"
    source_state = provider.load_file(src_json) if src_json.is_file() else provider.get(0)
    source = read_image(directory / "source.png", resolution)
    driving = read_image(directory / "driving" / frame_name(index, "png"), resolution)
    coarse = read_image(directory / "coarse" / frame_name(index, "png"), resolution)
    if resolution is None and not (source.shape == driving.shape == coarse.shape):
        raise ResolutionMismatchError(
            f"{directory}: source {source.shape}, driving {driving.shape}, coarse {coarse.shape}"
        )
    return CoarsePair(source, driving, coarse, source_state, provider.get(index))


def load_all(directory: Path, **kw) -> list:
    return [load_precomputed(directory, i, **kw) for i in range(count_frames(directory))]


def pair_seed(base: int, sequence: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(sequence), int(index)]).generate_state(1)[0])


def with_seed(degrade: DegradeSpec, seed: int) -> DegradeSpec:
    return replace(degrade, seed=int(seed))
