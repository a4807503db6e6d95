"""Shared domain types for the rope tracking pipeline.

Conventions (fixed across all modules): SI units (meters, seconds,
kilograms); the manipulation plane is z = 0 with gravity along -z; pixel
coordinates have their origin at the top-left corner, +x right, +y down,
and pixel centers at integer + 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SceneValidationError(ValueError):
    """Raised by validate_scene; carries every violation found."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid scene:\n" + "\n".join(f"  - {v}" for v in violations))


def _frozen_array(values, shape=None, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class NodeChain:
    """Ordered rope centerline: N node positions plus per-segment rest length
    and per-node mass."""

    positions: np.ndarray  # (N, 3) meters
    segment_rest_length: float  # meters
    node_mass: float  # kilograms (total mass / N)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {pos.shape}")
        if pos.shape[0] < 2:
            raise ValueError(f"a chain needs at least 2 nodes, got {pos.shape[0]}")
        object.__setattr__(self, "positions", _frozen_array(pos))
        object.__setattr__(self, "segment_rest_length", float(self.segment_rest_length))
        object.__setattr__(self, "node_mass", float(self.node_mass))

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions: np.ndarray) -> "NodeChain":
        return NodeChain(positions, self.segment_rest_length, self.node_mass)


@dataclass(frozen=True)
class GripperLog:
    """Time-stamped gripper center positions. The action at step t is the
    difference of consecutive positions."""

    timestamps: np.ndarray  # (T,) seconds, strictly increasing
    positions: np.ndarray  # (T, 3) meters

    def __post_init__(self):
        ts = _frozen_array(self.timestamps, dtype=np.float64)
        pos = np.asarray(self.positions, dtype=np.float64)
        if ts.ndim != 1:
            raise ValueError("timestamps must be one-dimensional")
        if pos.shape != (ts.shape[0], 3):
            raise ValueError(
                f"positions shape {pos.shape} does not match {ts.shape[0]} timestamps"
            )
        if ts.shape[0] >= 2 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "positions", _frozen_array(pos))

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    def action(self, t: int) -> np.ndarray:
        """a^t = p_g^t - p_g^{t-1}; zero at t = 0."""
        if t == 0:
            return np.zeros(3)
        return self.positions[t] - self.positions[t - 1]


@dataclass(frozen=True)
class CameraModel:
    """Perspective camera: a 3x4 projection matrix mapping homogeneous world
    points to homogeneous pixel coordinates, plus resolution and the color
    rendered where nothing is splatted."""

    projection: np.ndarray  # (3, 4)
    width: int
    height: int
    background_color: np.ndarray  # (3,) RGB in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "projection", _frozen_array(self.projection, (3, 4)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(
            self, "background_color", _frozen_array(self.background_color, (3,))
        )


@dataclass(frozen=True)
class Frame:
    """One RGB observation: an HxW grid of channel values in [0, 1]."""

    pixels: np.ndarray  # (H, W, 3)
    camera_index: int
    timestamp: float

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must have shape (H, W, 3), got {px.shape}")
        object.__setattr__(self, "pixels", _frozen_array(px))
        object.__setattr__(self, "camera_index", int(self.camera_index))
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True)
class FrameSet:
    """Per-time-step bundle of K frames, one per camera (index k), with
    optional boolean object masks alongside."""

    frames: tuple[Frame, ...]
    masks: tuple[np.ndarray, ...] | None = None  # each (H, W) bool

    def __post_init__(self):
        frames = tuple(self.frames)
        for k, fr in enumerate(frames):
            if fr.camera_index != k:
                raise ValueError(
                    f"frame at position {k} has camera_index {fr.camera_index}"
                )
        object.__setattr__(self, "frames", frames)
        if self.masks is not None:
            masks = tuple(np.asarray(m, dtype=bool) for m in self.masks)
            if len(masks) != len(frames):
                raise ValueError(
                    f"{len(masks)} masks for {len(frames)} frames"
                )
            object.__setattr__(self, "masks", masks)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class PhysicsParams:
    """Parameters of the position-based dynamics prediction step."""

    gravity: float = 9.81  # m/s^2, along -z
    friction_coefficient: float = 0.3  # dimensionless
    dt: float = 0.1  # seconds
    constraint_iterations: int = 20
    damping: float = 0.99  # velocity retention factor in [0, 1]
    smoothness: float = 0.1  # Laplacian smoothing weight in [0, 1]
    regrasp_per_step: bool = False  # re-select the grasped node every step


@dataclass(frozen=True)
class SplatConfig:
    """Appearance model configuration: d Gaussians per chain segment, sized
    by the rope diameter."""

    gaussians_per_segment: int = 3
    rope_diameter: float = 0.008  # meters
    opacity: float = 0.9  # in (0, 1]
    colors: np.ndarray | None = None  # (3,) shared or (M, 3) per-Gaussian

    def __post_init__(self):
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64)
            if col.shape != (3,) and not (col.ndim == 2 and col.shape[1] == 3):
                raise ValueError(f"colors must be (3,) or (M, 3), got {col.shape}")
            object.__setattr__(self, "colors", _frozen_array(col))


@dataclass(frozen=True)
class SceneDescriptor:
    """A chain/camera/physics bundle that passed validate_scene."""

    chain: NodeChain
    cameras: tuple[CameraModel, ...]
    params: PhysicsParams


def validate_scene(
    chain: NodeChain,
    cameras,
    params: PhysicsParams,
) -> SceneDescriptor:
    """Check every type invariant and aggregate all violations.

    Returns a SceneDescriptor when everything holds; otherwise raises
    SceneValidationError listing each violation with the offending field.
    """
    violations: list[str] = []

    bad = np.flatnonzero(~np.all(np.isfinite(chain.positions), axis=1))
    for i in bad:
        violations.append(f"chain.positions: node {i} has a non-finite coordinate")
    if chain.n_nodes < 2:
        violations.append(f"chain: N = {chain.n_nodes} < 2")
    if not (np.isfinite(chain.segment_rest_length) and chain.segment_rest_length > 0):
        violations.append(
            f"chain.segment_rest_length: must be > 0, got {chain.segment_rest_length}"
        )
    if not (np.isfinite(chain.node_mass) and chain.node_mass > 0):
        violations.append(f"chain.node_mass: must be > 0, got {chain.node_mass}")

    cameras = tuple(cameras)
    if not cameras:
        violations.append("cameras: at least one camera is required")
    for k, cam in enumerate(cameras):
        if not np.all(np.isfinite(cam.projection)):
            violations.append(f"cameras[{k}].projection: non-finite entries")
        elif np.linalg.norm(cam.projection[2, :3]) == 0.0:
            violations.append(
                f"cameras[{k}].projection: third row cannot be all-zero"
            )
        if cam.width < 1:
            violations.append(f"cameras[{k}].width: must be >= 1, got {cam.width}")
        if cam.height < 1:
            violations.append(f"cameras[{k}].height: must be >= 1, got {cam.height}")
        bg = cam.background_color
        if not (np.all(np.isfinite(bg)) and np.all(bg >= 0) and np.all(bg <= 1)):
            violations.append(
                f"cameras[{k}].background_color: channels must lie in [0, 1]"
            )

    if not (np.isfinite(params.dt) and params.dt > 0):
        violations.append(f"params.dt: must be > 0, got {params.dt}")
    if not (np.isfinite(params.friction_coefficient) and params.friction_coefficient >= 0):
        violations.append(
            f"params.friction_coefficient: must be >= 0, got {params.friction_coefficient}"
        )
    if params.constraint_iterations < 1:
        violations.append(
            f"params.constraint_iterations: must be >= 1, got {params.constraint_iterations}"
        )
    if not (0.0 <= params.damping <= 1.0):
        violations.append(f"params.damping: must lie in [0, 1], got {params.damping}")
    if not (0.0 <= params.smoothness <= 1.0):
        violations.append(
            f"params.smoothness: must lie in [0, 1], got {params.smoothness}"
        )
    if not (np.isfinite(params.gravity) and params.gravity >= 0):
        violations.append(f"params.gravity: must be >= 0, got {params.gravity}")

    if violations:
        raise SceneValidationError(violations)
    return SceneDescriptor(chain=chain, cameras=cameras, params=params)


def validate_splat_config(config: SplatConfig) -> list[str]:
    """Violation messages for a splat configuration (empty when valid)."""
    violations = []
    if config.gaussians_per_segment < 1:
        violations.append(
            f"splat.gaussians_per_segment: must be >= 1, got {config.gaussians_per_segment}"
        )
    if not (np.isfinite(config.rope_diameter) and config.rope_diameter > 0):
        violations.append(
            f"splat.rope_diameter: must be > 0, got {config.rope_diameter}"
        )
    if not (0.0 < config.opacity <= 1.0):
        violations.append(f"splat.opacity: must lie in (0, 1], got {config.opacity}")
    return violations
