"""Quantitative comparison of estimated trajectories against ground truth,
plus physics-sanity statistics. Estimated node i compares to true node i:
generator and tracker share the chain parameterization, so no
correspondence search is needed."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def mean_node_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Mean over nodes of the Euclidean node distance (meters)."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: estimate {estimate.shape} vs truth {truth.shape}")
    return float(np.mean(np.linalg.norm(estimate - truth, axis=-1)))


def tip_error(estimate: np.ndarray, truth: np.ndarray, grasped_index: int) -> float:
    """Euclidean distance at the grasped node (meters)."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: estimate {estimate.shape} vs truth {truth.shape}")
    if not (0 <= grasped_index < estimate.shape[0]):
        raise IndexError(f"grasped index {grasped_index} out of range for N = {estimate.shape[0]}")
    return float(np.linalg.norm(estimate[grasped_index] - truth[grasped_index]))


def length_violation(positions: np.ndarray, rest_length: float):
    """(max, mean) of |l_i - L| / L over the chain segments."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        raise ValueError("need at least 2 nodes")
    lengths = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    frac = np.abs(lengths - rest_length) / rest_length
    return float(np.max(frac)), float(np.mean(frac))


@dataclass
class EvalReport:
    """Per-step metric rows plus summary statistics."""

    timestamps: np.ndarray
    mean_errors: np.ndarray  # per-step mean node error (m)
    tip_errors: np.ndarray  # per-step grasped-node error (m)
    max_violations: np.ndarray  # per-step max fractional length violation
    losses: np.ndarray
    millis: np.ndarray
    summary: dict = field(default_factory=dict)


def report(
    trajectory: np.ndarray,
    truth: np.ndarray,
    losses: np.ndarray,
    millis: np.ndarray,
    timestamps: np.ndarray,
    rest_length: float,
    grasped_index: int = 0,
    baseline_mean_error: float | None = None,
) -> EvalReport:
    """Full evaluation of a tracked trajectory against ground truth.

    With a baseline (e.g. the prediction-only rollout's sequence-mean node
    error) the summary includes the error-reduction ratio
    1 - mean_error / baseline."""
    trajectory = np.asarray(trajectory, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if trajectory.shape[0] == 0:
        raise ValueError("empty trajectory")
    if trajectory.shape != truth.shape:
        raise ValueError(
            f"trajectory shape {trajectory.shape} does not align with truth {truth.shape}"
        )
    losses = np.asarray(losses, dtype=np.float64)
    millis = np.asarray(millis, dtype=np.float64)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    n = trajectory.shape[0]
    for name, arr in (("losses", losses), ("millis", millis), ("timestamps", timestamps)):
        if arr.shape[0] != n:
            raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")

    mean_errors = np.array([mean_node_error(trajectory[t], truth[t]) for t in range(n)])
    tip_errors = np.array(
        [tip_error(trajectory[t], truth[t], grasped_index) for t in range(n)]
    )
    max_violations = np.array(
        [length_violation(trajectory[t], rest_length)[0] for t in range(n)]
    )

    total_ms = float(np.sum(millis))
    summary = {
        "steps": int(n),
        "mean_node_error": float(np.mean(mean_errors)),
        "max_node_error": float(np.max(mean_errors)),
        "mean_tip_error": float(np.mean(tip_errors)),
        "max_tip_error": float(np.max(tip_errors)),
        "max_length_violation": float(np.max(max_violations)),
        "mean_loss": float(np.mean(losses)),
        "steps_per_second": float(n / (total_ms / 1e3)) if total_ms > 0 else float("inf"),
    }
    if baseline_mean_error is not None:
        summary["baseline_mean_error"] = float(baseline_mean_error)
        summary["error_reduction_ratio"] = (
            1.0 - summary["mean_node_error"] / baseline_mean_error
            if baseline_mean_error > 0
            else 0.0
        )
    return EvalReport(
        timestamps=timestamps,
        mean_errors=mean_errors,
        tip_errors=tip_errors,
        max_violations=max_violations,
        losses=losses,
        millis=millis,
        summary=summary,
    )
