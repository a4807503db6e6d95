"""Synthetic scenes: scripted gripper motions integrated to ground-truth
rope trajectories, rendered to multi-camera image sequences.

Ground truth comes from the same dynamics code run at a finer timestep, so
a tracker running at the coarse step sees genuine prediction error. Frames
are rendered with the brute-force oracle renderer to stay independent of
the tiled rasterizer under test.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import pbd, splat
from .model import CameraModel, Frame, FrameSet, GripperLog, NodeChain, PhysicsParams, SplatConfig

PRESET_SCRIPTS = ("drag", "lift", "cross")


@dataclass(frozen=True)
class MotionScript:
    """Waypointed gripper trajectory; positions between waypoints are linear
    interpolations, clamped at the ends."""

    name: str
    times: np.ndarray  # (W,) seconds, strictly increasing from 0
    waypoints: np.ndarray  # (W, 3) meters
    grasp_node_hint: int | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        pts = np.asarray(self.waypoints, dtype=np.float64)
        if times.ndim != 1 or times.shape[0] < 1:
            raise ValueError("a script needs at least one waypoint")
        if pts.shape != (times.shape[0], 3):
            raise ValueError(
                f"waypoints shape {pts.shape} does not match {times.shape[0]} times"
            )
        if times[0] != 0.0:
            raise ValueError(f"waypoint times must start at 0, got {times[0]}")
        if times.shape[0] >= 2 and not np.all(np.diff(times) > 0):
            raise ValueError("waypoint times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "waypoints", pts)

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def position(self, t: float) -> np.ndarray:
        return np.array(
            [np.interp(t, self.times, self.waypoints[:, i]) for i in range(3)]
        )


@dataclass(frozen=True)
class Scene:
    """A complete synthetic setup: initial chain, cameras, physics and the
    ground-truth appearance configuration."""

    chain0: NodeChain
    cameras: tuple[CameraModel, ...]
    physics: PhysicsParams
    splat_config: SplatConfig

    @property
    def rope_mass(self) -> float:
        return self.chain0.node_mass * self.chain0.n_nodes


def look_at_camera(
    eye,
    target,
    focal: float,
    width: int,
    height: int,
    background,
) -> CameraModel:
    """Pinhole camera at `eye` looking at `target`, world +z up, image +y
    down; principal point at the image center."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    x_cam = np.cross(forward, up)
    nx = np.linalg.norm(x_cam)
    if nx < 1e-12:
        x_cam = np.array([1.0, 0.0, 0.0])
    else:
        x_cam = x_cam / nx
    y_cam = np.cross(forward, x_cam)
    rot = np.stack([x_cam, y_cam, forward])
    trans = -rot @ eye
    intrinsics = np.array(
        [
            [focal, 0.0, width / 2.0],
            [0.0, focal, height / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    projection = intrinsics @ np.hstack([rot, trans[:, None]])
    return CameraModel(
        projection=projection, width=width, height=height, background_color=background
    )


def straight_chain(
    n_nodes: int = 30, length: float = 0.6, mass: float = 0.05
) -> NodeChain:
    """Equally spaced straight chain on the plane, centered on the origin
    along +x."""
    xs = np.linspace(-length / 2.0, length / 2.0, n_nodes)
    positions = np.stack([xs, np.zeros(n_nodes), np.zeros(n_nodes)], axis=1)
    return NodeChain(
        positions=positions,
        segment_rest_length=length / (n_nodes - 1),
        node_mass=mass / n_nodes,
    )


def preset_scene(
    n_nodes: int = 30,
    rope_length: float = 0.6,
    rope_mass: float = 0.05,
    rope_diameter: float = 0.008,
    width: int = 640,
    height: int = 480,
    n_cameras: int = 3,
) -> Scene:
    """Desk-scale default: a 0.6 m rope of 30 nodes on the plane, viewed by
    three 640x480 cameras on a quarter circle, 45 degrees above, dt 0.1 s
    (matching a 10 Hz gripper log)."""
    chain0 = straight_chain(n_nodes, rope_length, rope_mass)
    background = np.array([0.12, 0.12, 0.14])
    radius = 1.1
    elevation = np.deg2rad(45.0)
    cameras = []
    azimuths = np.linspace(0.0, np.pi / 2.0, n_cameras)
    for az in azimuths:
        eye = radius * np.array(
            [np.cos(elevation) * np.cos(az), np.cos(elevation) * np.sin(az), np.sin(elevation)]
        )
        cameras.append(
            look_at_camera(eye, [0.0, 0.0, 0.0], 600.0 * width / 640.0, width, height, background)
        )
    physics = PhysicsParams(dt=0.1)
    config = SplatConfig(
        gaussians_per_segment=3,
        rope_diameter=rope_diameter,
        opacity=0.9,
        colors=np.array([0.85, 0.25, 0.2]),
    )
    return Scene(chain0=chain0, cameras=tuple(cameras), physics=physics, splat_config=config)


def preset_script(name: str, chain0: NodeChain, duration: float | None = None) -> MotionScript:
    """Built-in gripper motions, all grasping the first node (a rope tip).

    The cross move runs slower and wider than drag/lift: fast tight sweeps
    tow the whole chain hard enough that the residual stretch after the
    fixed constraint iterations exceeds the length budget."""
    tip = chain0.positions[0]
    if name == "drag":
        # Pull the tip away from the rope body: the chain trails taut.
        # Pushing a rope buckles it, which no tracker benchmark should
        # depend on.
        duration = 3.0 if duration is None else duration
        times = [0.0, duration]
        points = [tip, tip + [-0.3, 0.0, 0.0]]
    elif name == "lift":
        duration = 3.0 if duration is None else duration
        times = [0.0, duration]
        points = [tip, tip + [0.0, 0.0, 0.3]]
    elif name == "cross":
        # Sweep the grasped tip up and over the rope body to form a loop,
        # then carry it across the loop region (kinematic approximation of a
        # crossing move; no self-collision handling).
        duration = 4.0 if duration is None else duration
        times = np.array([0.0, 0.32, 0.6, 0.85, 1.0]) * duration
        points = [
            tip,
            tip + [0.14, 0.15, 0.07],
            tip + [0.30, 0.02, 0.06],
            tip + [0.16, -0.15, 0.05],
            tip + [0.02, -0.07, 0.04],
        ]
    else:
        raise ValueError(f"unknown preset script {name!r}; options: {PRESET_SCRIPTS}")
    return MotionScript(
        name=name,
        times=np.asarray(times, dtype=np.float64),
        waypoints=np.asarray(points, dtype=np.float64),
        grasp_node_hint=0,
    )


def generate_ground_truth(
    chain0: NodeChain,
    script: MotionScript,
    physics: PhysicsParams,
    substeps: int = 20,
    duration: float | None = None,
):
    """Integrate the dynamics at dt/substeps under the scripted gripper and
    emit states plus the gripper log on the coarse dt grid. The default
    substep count keeps the per-substep gravity sag small enough that the
    fixed constraint iterations hold segment stretch well under 1%.

    Returns (states (S, N, 3) with states[0] = chain0, GripperLog)."""
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    duration = script.duration if duration is None else duration
    n_coarse = int(round(duration / physics.dt))
    fine_dt = physics.dt / substeps
    fine_params = replace(physics, dt=fine_dt)

    grasp = script.grasp_node_hint
    if grasp is None:
        grasp = pbd.find_grasped_node(chain0.positions, script.position(0.0))
    state = pbd.DynamicsState.at_rest(chain0, grasped_index=grasp)

    states = np.zeros((n_coarse + 1, chain0.n_nodes, 3))
    states[0] = chain0.positions
    for s in range(n_coarse):
        for k in range(substeps):
            # advancing into fine time tau uses the gripper sample at tau
            # and the action ending there (same alignment as the tracker)
            tau = (s * substeps + k + 1) * fine_dt
            p_g = script.position(tau)
            action = p_g - script.position(tau - fine_dt)
            x, state = pbd.predict(
                state, p_g, action, fine_params, chain0.node_mass, chain0.segment_rest_length
            )
        states[s + 1] = x

    coarse_times = np.arange(n_coarse + 1) * physics.dt
    gripper_positions = np.stack([script.position(t) for t in coarse_times])
    log = GripperLog(timestamps=coarse_times, positions=gripper_positions)
    return states, log


def ground_truth_splats(
    positions: np.ndarray, chain0: NodeChain, config: SplatConfig
) -> splat.SplatSet:
    """Splat set of one ground-truth state (generator-side appearance)."""
    chain = NodeChain(positions, chain0.segment_rest_length, chain0.node_mass)
    return splat.build_splats(chain, config)


def render_dataset(
    states: np.ndarray,
    cameras,
    chain0: NodeChain,
    splat_config: SplatConfig,
    noise_std: float = 0.0,
    seed: int = 0,
):
    """Render every state with the oracle renderer; masks mark pixels whose
    accumulated splat weight exceeds 0.5. Optional additive Gaussian pixel
    noise (clamped to [0, 1]) is applied after mask extraction.

    Returns a list of FrameSet, one per state."""
    if splat_config.colors is None:
        raise ValueError("dataset rendering needs ground-truth splat colors")
    cameras = tuple(cameras)
    rng = np.random.default_rng(seed)
    framesets = []
    times = np.arange(len(states))
    for s, positions in enumerate(states):
        splats = ground_truth_splats(positions, chain0, splat_config)
        frames = []
        masks = []
        for k, cam in enumerate(cameras):
            image, _, weight = splat.oracle_render_arrays(splats, cam)
            masks.append(weight > 0.5)
            if noise_std > 0.0:
                image = image + rng.normal(0.0, noise_std, image.shape)
                np.clip(image, 0.0, 1.0, out=image)
            frames.append(Frame(pixels=image, camera_index=k, timestamp=float(times[s])))
        framesets.append(FrameSet(frames=tuple(frames), masks=tuple(masks)))
    return framesets
