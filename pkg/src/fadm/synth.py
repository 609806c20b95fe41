"""Procedural cartoon faces with exact pose / expression ground truth.

A face is drawn in canonical coordinates (image-fraction units, origin at the
image centre, +y down) and placed in the frame by the pose:

    pose = [angle (rad), tx, ty (fractions of the resolution), log_scale]
    exp  = [mouth_open, mouth_width, eye_open, brow_raise,
            smile, gaze_x, gaze_y, squint, <inert padding ...>]

Every shape is an approximate signed-distance field turned into anti-aliased
coverage, so rendering is smooth in the parameters and fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .agcn import MotionState

POSE_NAMES = ("angle", "tx", "ty", "log_scale")
EXP_NAMES = ("mouth_open", "mouth_width", "eye_open", "brow_raise", "smile", "gaze_x", "gaze_y", "squint")

DEFAULT_POSE_RANGES = ((-0.35, 0.35), (-0.12, 0.12), (-0.12, 0.12), (-0.15, 0.15))
DEFAULT_EXP_RANGES = ((0.0, 1.0),) + ((-1.0, 1.0),) * 7

SKIN_PALETTE = np.array(
    [[0.96, 0.80, 0.69], [0.89, 0.68, 0.54], [0.78, 0.57, 0.42],
     [0.62, 0.43, 0.30], [0.45, 0.31, 0.22], [0.98, 0.87, 0.78]]
)
HAIR_PALETTE = np.array(
    [[0.10, 0.08, 0.06], [0.35, 0.22, 0.12], [0.85, 0.72, 0.42],
     [0.60, 0.25, 0.12], [0.55, 0.55, 0.58]]
)
IRIS_PALETTE = np.array([[0.30, 0.18, 0.08], [0.20, 0.40, 0.75], [0.25, 0.55, 0.30], [0.45, 0.45, 0.50]])
BG_PALETTE = np.array(
    [[0.20, 0.35, 0.55], [0.55, 0.75, 0.60], [0.80, 0.80, 0.85],
     [0.60, 0.50, 0.70], [0.90, 0.75, 0.50], [0.30, 0.30, 0.35]]
)


class StateRangeError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    resolution: int = 64
    exp_dim: int = 8
    pose_dim: int = 4
    identity_seed: int = 0
    background: str = "gradient"
    pose_ranges: tuple = DEFAULT_POSE_RANGES
    exp_ranges: tuple = DEFAULT_EXP_RANGES

    def ranges(self) -> tuple[np.ndarray, np.ndarray]:
        """(low, high) arrays over the concatenated [exp, pose] vector."""
        if self.pose_dim != len(self.pose_ranges):
            raise ValueError(f"pose_dim {self.pose_dim} needs {self.pose_dim} pose ranges")
        if self.exp_dim < 1:
            raise ValueError("exp_dim must be positive")
        exp = list(self.exp_ranges[: self.exp_dim])
        exp += [(-1.0, 1.0)] * (self.exp_dim - len(exp))
        r = np.array(exp + list(self.pose_ranges), dtype=np.float64)
        return r[:, 0], r[:, 1]

    def with_identity(self, seed: int) -> "SynthSpec":
        return SynthSpec(self.resolution, self.exp_dim, self.pose_dim, int(seed),
                         self.background, self.pose_ranges, self.exp_ranges)


@dataclass(frozen=True)
class Identity:
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lips: np.ndarray
    bg_top: np.ndarray
    bg_bottom: np.ndarray
    face_rx: float
    face_ry: float
    eye_dx: float
    eye_y: float
    eye_rx: float
    eye_ry: float
    mouth_y: float
    mouth_rx: float
    fringe: float


@lru_cache(maxsize=512)
def identity(seed: int) -> Identity:
    rng = np.random.default_rng([int(seed), 7919])
    skin = SKIN_PALETTE[rng.integers(len(SKIN_PALETTE))]
    return Identity(
        skin=skin,
        hair=HAIR_PALETTE[rng.integers(len(HAIR_PALETTE))],
        iris=IRIS_PALETTE[rng.integers(len(IRIS_PALETTE))],
        lips=np.clip(skin * np.array([0.85, 0.55, 0.55]), 0, 1),
        bg_top=BG_PALETTE[rng.integers(len(BG_PALETTE))],
        bg_bottom=BG_PALETTE[rng.integers(len(BG_PALETTE))] * 0.8,
        face_rx=float(rng.uniform(0.22, 0.27)),
        face_ry=float(rng.uniform(0.28, 0.32)),
        eye_dx=float(rng.uniform(0.085, 0.105)),
        eye_y=float(rng.uniform(-0.06, -0.03)),
        eye_rx=float(rng.uniform(0.045, 0.055)),
        eye_ry=float(rng.uniform(0.028, 0.036)),
        mouth_y=float(rng.uniform(0.13, 0.16)),
        mouth_rx=float(rng.uniform(0.065, 0.085)),
        fringe=float(rng.uniform(0.35, 0.6)),
    )


def check_state(spec: SynthSpec, state: MotionState) -> None:
    if state.exp.size != spec.exp_dim or state.pose.size != spec.pose_dim:
        raise StateRangeError(
            f"state dims (exp={state.exp.size}, pose={state.pose.size}) do not match "
            f"spec (exp={spec.exp_dim}, pose={spec.pose_dim})"
        )
    lo, hi = spec.ranges()
    v = state.vector()
    bad = np.nonzero((v < lo - 1e-9) | (v > hi + 1e-9))[0]
    if bad.size:
        i = int(bad[0])
        raise StateRangeError(f"state entry {i} = {v[i]:.4f} outside [{lo[i]}, {hi[i]}]")


def _exp(state: MotionState, name: str) -> float:
    i = EXP_NAMES.index(name)
    return float(state.exp[i]) if i < state.exp.size else 0.0


def _pose(state: MotionState) -> tuple[float, float, float, float]:
    p = np.zeros(4)
    p[: min(4, state.pose.size)] = state.pose[:4]
    return float(p[0]), float(p[1]), float(p[2]), float(np.exp(p[3]))


def _ellipse(x, y, cx, cy, rx, ry):
    """Approximate signed distance (canonical units) to an axis-aligned ellipse."""
    r = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    return (r - 1.0) * min(rx, ry)


def _capsule(x, y, x0, x1, cy, radius):
    px = np.clip(x, x0, x1)
    return np.sqrt((x - px) ** 2 + (y - cy) ** 2) - radius


def _to_canonical(spec: SynthSpec, state: MotionState):
    n = spec.resolution
    coords = (np.arange(n) + 0.5) / n - 0.5
    qy, qx = np.meshgrid(coords, coords, indexing="ij")
    angle, tx, ty, scale = _pose(state)
    dx, dy = qx - tx, qy - ty
    c, s = np.cos(angle), np.sin(angle)
    # inverse rotation, then inverse scale
    x = (c * dx + s * dy) / scale
    y = (-s * dx + c * dy) / scale
    px_per_unit = n * scale
    return x, y, px_per_unit


def _face_geometry(ident: Identity, state: MotionState) -> dict:
    eye_open = _exp(state, "eye_open")
    squint = _exp(state, "squint")
    mouth_open = _exp(state, "mouth_open")
    smile = _exp(state, "smile")
    eye_scale = max(0.08, 1.0 + 0.75 * eye_open)
    return {
        "eye_ry": (
            ident.eye_ry * eye_scale * max(0.1, 1.0 - 0.35 * squint),
            ident.eye_ry * eye_scale * max(0.1, 1.0 + 0.35 * squint),
        ),
        "brow_y": ident.eye_y - ident.eye_ry - 0.03 - 0.025 * _exp(state, "brow_raise"),
        "mouth_rx": ident.mouth_rx * (1.0 + 0.3 * _exp(state, "mouth_width") + 0.1 * smile),
        "mouth_ry": 0.014 + 0.05 * mouth_open,
        "inner_ry": 0.045 * mouth_open,
        "smile_k": 2.5 * smile,
        "gaze": (0.35 * _exp(state, "gaze_x"), 0.35 * _exp(state, "gaze_y")),
    }


def _layers(spec: SynthSpec, state: MotionState):
    """Yield (coverage, rgb) pairs in painter's order; rgb may be per-pixel."""
    ident = identity(spec.identity_seed)
    geo = _face_geometry(ident, state)
    x, y, ppu = _to_canonical(spec, state)

    def cover(sdf):
        return np.clip(0.5 - sdf * ppu, 0.0, 1.0)

    face = _ellipse(x, y, 0.0, 0.0, ident.face_rx, ident.face_ry)
    hair = _ellipse(x, y, 0.0, -0.04, ident.face_rx * 1.12, ident.face_ry * 1.05)
    hair = np.maximum(hair, y - 0.08)
    yield cover(hair), ident.hair

    r2 = (x / ident.face_rx) ** 2 + (y / ident.face_ry) ** 2
    shade = (1.0 - 0.12 * np.clip(r2, 0, 1))[..., None]
    yield cover(face), ident.skin[None, None, :] * shade

    fringe_y = -ident.face_ry * ident.fringe
    yield cover(np.maximum(face, y - fringe_y)), ident.hair

    nose = _ellipse(x, y, 0.0, 0.05, 0.018, 0.03)
    yield cover(nose) * 0.6, ident.skin * 0.78

    for side, ry in zip((-1.0, 1.0), geo["eye_ry"]):
        ex = side * ident.eye_dx
        brow = _capsule(x, y, ex - 0.04, ex + 0.04, geo["brow_y"], 0.008)
        yield cover(brow), ident.hair * 0.8
        eye = _ellipse(x, y, ex, ident.eye_y, ident.eye_rx, ry)
        yield cover(eye), np.array([0.97, 0.97, 0.95])
        gx = ex + geo["gaze"][0] * ident.eye_rx
        gy = ident.eye_y + geo["gaze"][1] * ry
        iris = np.maximum(_ellipse(x, y, gx, gy, 0.022, 0.022), eye)
        yield cover(iris), ident.iris
        pupil = np.maximum(_ellipse(x, y, gx, gy, 0.009, 0.009), eye)
        yield cover(pupil), np.array([0.03, 0.03, 0.03])

    # smile bends the mouth: corners rise as smile grows
    u = x / max(geo["mouth_rx"], 1e-6)
    ym = y + geo["smile_k"] * 0.02 * (u**2)
    lips = _ellipse(x, ym, 0.0, ident.mouth_y, geo["mouth_rx"], geo["mouth_ry"])
    yield cover(lips), ident.lips
    # below ~1e-3 px the inner mouth is invisible and its SDF would overflow
    if geo["inner_ry"] > 1e-4:
        inner = _ellipse(x, ym, 0.0, ident.mouth_y, geo["mouth_rx"] * 0.8, geo["inner_ry"])
        yield cover(inner), np.array([0.25, 0.05, 0.07])


def background(spec: SynthSpec) -> np.ndarray:
    ident = identity(spec.identity_seed)
    n = spec.resolution
    if spec.background == "flat":
        return np.broadcast_to(ident.bg_top, (n, n, 3)).copy()
    if spec.background != "gradient":
        raise ValueError(f"unknown background style {spec.background!r}")
    v = ((np.arange(n) + 0.5) / n)[:, None, None]
    img = (1 - v) * ident.bg_top + v * ident.bg_bottom
    return np.broadcast_to(img, (n, n, 3)).copy()


def render_face(spec: SynthSpec, state: MotionState) -> np.ndarray:
    """(H, W, 3) float64 image in [0, 1]."""
    check_state(spec, state)
    img = background(spec)
    for cov, rgb in _layers(spec, state):
        img = img * (1.0 - cov[..., None]) + cov[..., None] * rgb
    return np.clip(img, 0.0, 1.0)


def face_mask(spec: SynthSpec, state: MotionState) -> np.ndarray:
    """Coverage of the head (face plus hair), (H, W) in [0, 1]."""
    check_state(spec, state)
    mask = np.zeros((spec.resolution, spec.resolution))
    for i, (cov, _) in enumerate(_layers(spec, state)):
        if i < 2:
            mask = np.maximum(mask, cov)
    return mask


LANDMARK_NAMES = (
    "eye_l", "eye_r", "brow_l", "brow_r", "nose", "mouth_l", "mouth_r", "mouth_top", "mouth_bottom", "chin",
)


def landmarks(spec: SynthSpec, state: MotionState) -> np.ndarray:
    """Ground-truth anchor points in pixel coordinates (x, y), shape (10, 2)."""
    check_state(spec, state)
    ident = identity(spec.identity_seed)
    geo = _face_geometry(ident, state)
    rise = geo["smile_k"] * 0.02
    pts = np.array([
        [-ident.eye_dx, ident.eye_y],
        [ident.eye_dx, ident.eye_y],
        [-ident.eye_dx, geo["brow_y"]],
        [ident.eye_dx, geo["brow_y"]],
        [0.0, 0.05],
        [-geo["mouth_rx"], ident.mouth_y - rise],
        [geo["mouth_rx"], ident.mouth_y - rise],
        [0.0, ident.mouth_y - geo["mouth_ry"]],
        [0.0, ident.mouth_y + geo["mouth_ry"]],
        [0.0, ident.face_ry],
    ])
    return canonical_to_pixels(spec, state, pts)


def canonical_to_pixels(spec: SynthSpec, state: MotionState, pts: np.ndarray) -> np.ndarray:
    angle, tx, ty, scale = _pose(state)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    q = scale * pts @ rot.T + np.array([tx, ty])
    # pixel centres sit at (k + 0.5) / n - 0.5 in image-fraction units
    return (q + 0.5) * spec.resolution - 0.5


def sample_state(spec: SynthSpec, rng: np.random.Generator, spread: float = 0.6) -> MotionState:
    """Uniform draw from the central ``spread`` fraction of every range."""
    lo, hi = spec.ranges()
    mid, half = (lo + hi) / 2, (hi - lo) / 2 * spread
    v = rng.uniform(mid - half, mid + half)
    return MotionState(exp=v[: spec.exp_dim], pose=v[spec.exp_dim:])


def sample_sequence(
    spec: SynthSpec,
    length: int,
    rng: np.random.Generator,
    step_bound: float = 0.08,
    momentum: float = 0.7,
    start: MotionState | None = None,
) -> list[tuple[np.ndarray, MotionState]]:
    """Smooth random walk in parameter space, rendered frame by frame.

    Per-step change of each parameter never exceeds ``step_bound`` times that
    parameter's range width.
    """
    if length < 2:
        raise ValueError(f"sequence length must be >= 2, got {length}")
    lo, hi = spec.ranges()
    bound = step_bound * (hi - lo)
    state = start if start is not None else sample_state(spec, rng)
    v = state.vector()
    vel = np.zeros_like(v)
    out = []
    for k in range(length):
        if k:
            vel = momentum * vel + (1.0 - momentum) * rng.uniform(-bound, bound)
            v = np.clip(v + vel, lo, hi)
        st = MotionState(exp=v[: spec.exp_dim].copy(), pose=v[spec.exp_dim:].copy())
        out.append((render_face(spec, st), st))
    return out
