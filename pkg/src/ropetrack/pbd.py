"""Position-based dynamics prediction for the node chain.

One prediction step: Verlet-integrate each node under gravity, plane normal
force and plane friction; pin the grasped node to the gripper; project the
segment-length constraints with Gauss-Seidel sweeps; apply a Laplacian
smoothness correction; clamp nodes below the manipulation plane back onto it.
All functions are pure: they return new arrays and never mutate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NodeChain, PhysicsParams

# Segments shorter than this are treated as degenerate; their constraint
# direction comes from a caller-supplied fallback (or +x).
COINCIDENT_EPS = 1e-9


@dataclass(frozen=True)
class DynamicsState:
    """Current and previous node positions; velocity is implicit as their
    difference over dt."""

    current: np.ndarray  # (N, 3)
    previous: np.ndarray  # (N, 3)
    grasped_index: int | None = None

    def __post_init__(self):
        cur = np.asarray(self.current, dtype=np.float64)
        prev = np.asarray(self.previous, dtype=np.float64)
        if cur.shape != prev.shape or cur.ndim != 2 or cur.shape[1] != 3:
            raise ValueError(
                f"current {cur.shape} and previous {prev.shape} must both be (N, 3)"
            )
        if self.grasped_index is not None and not (0 <= self.grasped_index < cur.shape[0]):
            raise ValueError(
                f"grasped_index {self.grasped_index} out of range for N = {cur.shape[0]}"
            )
        object.__setattr__(self, "current", cur.copy())
        object.__setattr__(self, "previous", prev.copy())

    @classmethod
    def at_rest(cls, chain: NodeChain, grasped_index: int | None = None) -> "DynamicsState":
        return cls(chain.positions, chain.positions, grasped_index)


def find_grasped_node(positions: np.ndarray, gripper: np.ndarray) -> int:
    """Index of the node nearest the gripper center; ties go to the lowest
    index (argmin returns the first minimum)."""
    positions = np.asarray(positions, dtype=np.float64)
    gripper = np.asarray(gripper, dtype=np.float64)
    if positions.shape[0] < 1:
        raise ValueError("need at least one node")
    if not np.all(np.isfinite(gripper)):
        raise ValueError("gripper position must be finite")
    d2 = np.sum((positions - gripper) ** 2, axis=1)
    return int(np.argmin(d2))


def external_forces(
    positions: np.ndarray,
    velocities: np.ndarray,
    params: PhysicsParams,
    node_mass: float,
) -> np.ndarray:
    """Per-node force: gravity, plane normal force, and plane friction.

    Contact at node i means z_i <= 0. The normal force exactly cancels
    gravity for contact nodes. Friction acts on the in-plane velocity
    (z component zeroed) of contact nodes and is clamped so the friction
    impulse cannot reverse the in-plane motion within one step.
    """
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    if positions.shape != velocities.shape:
        raise ValueError("positions and velocities must have matching shapes")
    n = positions.shape[0]
    m = float(node_mass)
    g = params.gravity

    forces = np.zeros((n, 3))
    forces[:, 2] -= m * g

    contact = positions[:, 2] <= 0.0
    forces[contact, 2] += m * g

    # Friction coefficient on velocity, clamped: the half-impulse applied by
    # the Verlet step is 0.5*c*|v|*dt^2 and must not exceed the damped
    # velocity displacement damping*|v|*dt.
    c = params.friction_coefficient * g
    c_max = 2.0 * params.damping / params.dt
    c = min(c, c_max)
    v_xy = velocities.copy()
    v_xy[:, 2] = 0.0
    forces[contact] -= c * m * v_xy[contact]
    return forces


def verlet_step(
    state: DynamicsState, forces: np.ndarray, params: PhysicsParams, node_mass: float
) -> np.ndarray:
    """Position Verlet with velocity damping:
    x' = x + damping*(x - x_prev) + 0.5*(F/m)*dt^2."""
    forces = np.asarray(forces, dtype=np.float64)
    if not np.all(np.isfinite(forces)):
        raise ValueError("forces must be finite")
    accel = forces / float(node_mass)
    return (
        state.current
        + params.damping * (state.current - state.previous)
        + 0.5 * accel * params.dt**2
    )


def apply_grasp(
    positions: np.ndarray,
    grasped_index: int,
    gripper: np.ndarray,
    action: np.ndarray,
    params: PhysicsParams,
) -> np.ndarray:
    """Pin the grasped node to gripper + action*dt; other nodes unchanged."""
    positions = np.asarray(positions, dtype=np.float64)
    if not (0 <= grasped_index < positions.shape[0]):
        raise IndexError(
            f"grasped index {grasped_index} out of range for N = {positions.shape[0]}"
        )
    out = positions.copy()
    out[grasped_index] = np.asarray(gripper, dtype=np.float64) + np.asarray(
        action, dtype=np.float64
    ) * params.dt
    return out


def project_length_constraints(
    positions: np.ndarray,
    rest_length: float,
    iterations: int,
    pinned: int | None = None,
    fallback_dirs: np.ndarray | None = None,
) -> np.ndarray:
    """Gauss-Seidel sweeps enforcing |x_{i+1} - x_i| = rest_length.

    Per segment the correction is split half/half between the endpoints; a
    pinned endpoint receives nothing and its half transfers to the partner.
    Degenerate (near-coincident) segments take their direction from
    fallback_dirs (unit vectors per segment) or +x.
    """
    x = np.asarray(positions, dtype=np.float64).copy()
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 nodes")
    if rest_length <= 0:
        raise ValueError(f"rest_length must be > 0, got {rest_length}")
    if fallback_dirs is not None:
        fallback_dirs = np.asarray(fallback_dirs, dtype=np.float64)

    for _ in range(iterations):
        for i in range(n - 1):
            d = x[i + 1] - x[i]
            dist = float(np.linalg.norm(d))
            if dist < COINCIDENT_EPS:
                if fallback_dirs is not None:
                    direction = fallback_dirs[i]
                else:
                    direction = np.array([1.0, 0.0, 0.0])
            else:
                direction = d / dist
            lam = 0.5 * (rest_length - dist)
            if pinned == i:
                x[i + 1] += 2.0 * lam * direction
            elif pinned == i + 1:
                x[i] -= 2.0 * lam * direction
            else:
                x[i] -= lam * direction
                x[i + 1] += lam * direction
    return x


def smooth_and_damp(
    positions: np.ndarray, pinned: int | None, smoothness: float
) -> np.ndarray:
    """Move each interior non-pinned node toward the midpoint of its
    neighbors by the smoothness factor. Endpoints stay put. Updates are
    simultaneous (computed from the input snapshot)."""
    x = np.asarray(positions, dtype=np.float64)
    if not (0.0 <= smoothness <= 1.0):
        raise ValueError(f"smoothness must lie in [0, 1], got {smoothness}")
    if x.shape[0] < 3 or smoothness == 0.0:
        return x.copy()
    out = x.copy()
    mid = 0.5 * (x[:-2] + x[2:])
    out[1:-1] = (1.0 - smoothness) * x[1:-1] + smoothness * mid
    if pinned is not None and 0 < pinned < x.shape[0] - 1:
        out[pinned] = x[pinned]
    return out


def resolve_plane_contact(positions: np.ndarray) -> np.ndarray:
    """Clamp nodes below the manipulation plane back to z = 0."""
    out = np.asarray(positions, dtype=np.float64).copy()
    np.clip(out[:, 2], 0.0, None, out=out[:, 2])
    return out


def predict(
    state: DynamicsState,
    gripper: np.ndarray,
    action: np.ndarray,
    params: PhysicsParams,
    node_mass: float,
    rest_length: float,
) -> tuple[np.ndarray, DynamicsState]:
    """One full prediction step; returns the predicted positions and the
    advanced dynamics state.

    The grasped node is selected on the first call (or every step with
    regrasp_per_step) and then kept: re-selection mid-grasp causes index
    jitter under a continuous grasp.
    """
    if state.grasped_index is None or params.regrasp_per_step:
        g_idx = find_grasped_node(state.current, gripper)
    else:
        g_idx = state.grasped_index

    velocities = (state.current - state.previous) / params.dt
    forces = external_forces(state.current, velocities, params, node_mass)
    x = verlet_step(state, forces, params, node_mass)
    x = apply_grasp(x, g_idx, gripper, action, params)

    seg = state.current[1:] - state.current[:-1]
    seg_len = np.linalg.norm(seg, axis=1, keepdims=True)
    safe = seg_len[:, 0] >= COINCIDENT_EPS
    fallback = np.tile(np.array([1.0, 0.0, 0.0]), (seg.shape[0], 1))
    fallback[safe] = seg[safe] / seg_len[safe]

    x = project_length_constraints(
        x, rest_length, params.constraint_iterations, pinned=g_idx, fallback_dirs=fallback
    )
    x = smooth_and_damp(x, g_idx, params.smoothness)
    x = resolve_plane_contact(x)

    return x, DynamicsState(current=x, previous=state.current, grasped_index=g_idx)


def max_length_violation(positions: np.ndarray, rest_length: float) -> float:
    """max_i | |x_{i+1} - x_i| - L | over the chain segments (meters)."""
    lengths = np.linalg.norm(np.diff(np.asarray(positions), axis=0), axis=1)
    return float(np.max(np.abs(lengths - rest_length)))
