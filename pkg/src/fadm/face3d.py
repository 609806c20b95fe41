"""MotionState providers: exact synthetic ground truth, or JSON sidecar files."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional

from .agcn import MotionState


class UnknownFrameError(KeyError):
    pass


class MissingFileError(FileNotFoundError):
    pass


class MalformedSidecarError(ValueError):
    pass


class DimensionMismatchError(MalformedSidecarError):
    pass


class SyntheticTruthProvider:
    """Returns the exact parameters a synthetic frame was rendered with."""

    def __init__(self, states: Optional[dict] = None):
        self._states = dict(states or {})

    def register(self, frame_id, state: MotionState) -> None:
        self._states[frame_id] = state

    def get(self, frame_id) -> MotionState:
        try:
            return self._states[frame_id]
        except KeyError:
            raise UnknownFrameError(f"no ground-truth state for frame {frame_id!r}") from None


def _vector(data: dict, key: str, path: Path, expected: Optional[int]) -> list:
    if key not in data:
        raise MalformedSidecarError(f"{path}: missing key {key!r}")
    vals = data[key]
    if not isinstance(vals, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in vals
    ):
        raise MalformedSidecarError(f"{path}: {key!r} must be a list of finite numbers")
    if expected is not None and len(vals) != expected:
        raise DimensionMismatchError(
            f"{path}: {key} dimension mismatch, expected {expected}, got {len(vals)}"
        )
    return vals


def parse_sidecar(path: Path, exp_dim: Optional[int] = None, pose_dim: Optional[int] = None) -> MotionState:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise MissingFileError(f"missing file: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedSidecarError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(data, dict):
        raise MalformedSidecarError(f"{path}: expected a JSON object")
    return MotionState(exp=_vector(data, "exp", path, exp_dim), pose=_vector(data, "pose", path, pose_dim))


def write_sidecar(path: Path, state: MotionState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state.to_json()))


class SidecarProvider:
    """Reads ``<dir>/%06d.json`` for integer frame ids."""

    def __init__(self, directory: Path, exp_dim: Optional[int] = None, pose_dim: Optional[int] = None):
        self.directory = Path(directory)
        self.exp_dim = exp_dim
        self.pose_dim = pose_dim

    def load_file(self, path: Path) -> MotionState:
        path = Path(path)
        if not path.is_file():
            raise MissingFileError(f"missing file: {path}")
        return parse_sidecar(path, self.exp_dim, self.pose_dim)

    def get(self, frame_id) -> MotionState:
        path = self.directory / f"{int(frame_id):06d}.json"
        if not path.is_file():
            raise MissingFileError(f"missing file: {path}")
        return parse_sidecar(path, self.exp_dim, self.pose_dim)


def reconstruct(frame_id, provider) -> MotionState:
    return provider.get(frame_id)
