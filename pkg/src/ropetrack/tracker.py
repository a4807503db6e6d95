"""Prediction-update filter: PBD prediction, rendering-loss correction.

Each step predicts the chain with position-based dynamics, then minimizes
the multi-view rendering loss over a per-node correction with momentum
gradient descent starting from zero correction. The corrected positions
feed back into the dynamics (both position and implicit velocity), letting
the filter absorb model error.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import pbd, splat
from .model import FrameSet, NodeChain, PhysicsParams, SplatConfig


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs of the rendering-loss descent over the node correction."""

    learning_rate: float = 1e-5  # meters per unit gradient
    iterations: int = 50
    momentum: float = 0.9
    convergence_tol: float = 1e-4  # stop when relative loss decrease is below
    # Per-node correction cap (meters); None resolves to a quarter of the
    # segment rest length. The update fixes one step's worth of model error,
    # so node-sized jumps are never legitimate and mostly encode tangential
    # sliding, which corrupts segment lengths.
    max_correction: float | None = None
    mask_loss: bool = False  # restrict the loss to dilated object masks
    mask_dilation: int = 4  # pixels
    reproject: bool = True  # re-run length projection when SGD stretched the chain
    reproject_threshold: float = 0.02  # fraction of rest length
    pixel_subsample: float = 0.0  # fraction of pixels kept in the loss; 0 = all

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class FilterState:
    """Everything the filter carries between steps."""

    dynamics: pbd.DynamicsState
    splats: splat.SplatSet
    rest_length: float
    node_mass: float
    step_index: int
    config: OptimizerConfig

    def current_chain(self) -> NodeChain:
        return NodeChain(self.dynamics.current, self.rest_length, self.node_mass)


@dataclass
class StepInfo:
    loss: float
    iterations: int
    millis: float
    first_grad_norm: float


def init(
    chain0: NodeChain,
    frames0: FrameSet,
    cameras,
    splat_config: SplatConfig,
    masks=None,
    config: OptimizerConfig | None = None,
    gripper0: np.ndarray | None = None,
) -> FilterState:
    """Build the initial filter state: zero velocity, splats attached to the
    initial chain, colors fitted from the masked first frames unless the
    splat config pins them.

    The grasped node is selected here, against the initial gripper sample;
    later steps keep it (a persistent grasp; re-selection mid-grasp causes
    index jitter once the gripper moves off the node)."""
    cameras = tuple(cameras)
    if splat_config.colors is None:
        if masks is None:
            masks = frames0.masks
        if masks is None:
            raise ValueError(
                "initial color fitting requires object masks (or preset colors)"
            )
        color = splat.fit_colors(frames0, masks)
        splat_config = replace(splat_config, colors=color)
    splats = splat.build_splats(chain0, splat_config)
    grasped = None
    if gripper0 is not None:
        grasped = pbd.find_grasped_node(chain0.positions, gripper0)
    return FilterState(
        dynamics=pbd.DynamicsState.at_rest(chain0, grasped_index=grasped),
        splats=splats,
        rest_length=chain0.segment_rest_length,
        node_mass=chain0.node_mass,
        step_index=0,
        config=config if config is not None else OptimizerConfig(),
    )


def _build_contexts(frames: FrameSet, cameras, opt: OptimizerConfig, rng=None):
    contexts = []
    for k, cam in enumerate(cameras):
        mask = None
        if opt.mask_loss:
            if frames.masks is None:
                raise ValueError("mask_loss requires masks in the frame set")
            mask = splat.dilate_mask(frames.masks[k], opt.mask_dilation)
        if opt.pixel_subsample > 0.0 and rng is not None:
            keep = rng.random((cam.height, cam.width)) < opt.pixel_subsample
            mask = keep if mask is None else (mask & keep)
        contexts.append(splat.CameraContext.build(cam, frames.frames[k].pixels, mask))
    return contexts


def _loss_and_grad(positions, splats, contexts, pool=None):
    if pool is None or len(contexts) <= 1:
        return splat.loss_and_gradient_from_contexts(positions, splats, contexts)
    means = splat.attached_means(splats, positions)
    results = list(
        pool.map(
            lambda ctx: splat._camera_loss_and_means_grad(means, splats, ctx), contexts
        )
    )
    total_loss = 0.0
    d_means = np.zeros_like(means)
    for loss_k, grad_k in results:  # fixed camera order: deterministic reduction
        total_loss += loss_k
        d_means += grad_k
    grad = splat._scatter_to_nodes(splats, d_means, positions.shape[0])
    return total_loss, grad


def update(
    x_pred: np.ndarray,
    frames: FrameSet,
    cameras,
    splats: splat.SplatSet,
    opt: OptimizerConfig,
    rest_length: float,
    pool=None,
    subsample_rng=None,
):
    """Minimize the multi-view rendering loss over a node correction.

    Momentum gradient descent from zero correction; per-node corrections are
    norm-clamped; the best iterate seen is returned, so the final loss never
    exceeds the loss of the uncorrected prediction.

    Returns (corrected positions, StepInfo).
    """
    x_pred = np.asarray(x_pred, dtype=np.float64)
    contexts = _build_contexts(frames, cameras, opt, subsample_rng)
    cap = opt.max_correction if opt.max_correction is not None else 0.25 * rest_length

    t0 = time.perf_counter()
    delta = np.zeros_like(x_pred)
    vel = np.zeros_like(x_pred)
    best_delta = delta.copy()
    best_loss = np.inf
    first_grad_norm = 0.0
    iters_run = 0
    stall = 0

    for it in range(opt.iterations):
        loss, grad = _loss_and_grad(x_pred + delta, splats, contexts, pool)
        iters_run = it + 1
        if it == 0:
            first_grad_norm = float(np.linalg.norm(grad))
        # Convergence: stop once the best loss has not improved by the
        # relative tolerance for a few iterations. Momentum makes single
        # iterations non-monotone, so a one-step check stops far too early.
        if loss < best_loss * (1.0 - opt.convergence_tol) or it == 0:
            stall = 0
        else:
            stall += 1
        if loss < best_loss:
            best_loss = loss
            best_delta = delta.copy()
        if stall >= 5:
            break

        vel = opt.momentum * vel - opt.learning_rate * grad
        delta = delta + vel
        norms = np.linalg.norm(delta, axis=1)
        over = norms > cap
        if np.any(over):
            delta[over] *= (cap / norms[over])[:, None]

    millis = (time.perf_counter() - t0) * 1e3
    return x_pred + best_delta, StepInfo(
        loss=float(best_loss),
        iterations=iters_run,
        millis=millis,
        first_grad_norm=first_grad_norm,
    )


def step(
    state: FilterState,
    gripper: np.ndarray,
    action: np.ndarray,
    frames: FrameSet,
    cameras,
    physics: PhysicsParams,
    predict_only: bool = False,
    pool=None,
    subsample_rng=None,
):
    """One filter step: predict, correct against the frames, advance.

    Returns (new state, estimate (N, 3), StepInfo)."""
    cameras = tuple(cameras)
    if len(frames) != len(cameras):
        for k in range(max(len(frames), len(cameras))):
            if k >= len(frames):
                raise ValueError(f"missing frame for camera {k}")
        raise ValueError(f"{len(frames)} frames for {len(cameras)} cameras")

    x_pred, dyn_pred = pbd.predict(
        state.dynamics, gripper, action, physics, state.node_mass, state.rest_length
    )
    t0 = time.perf_counter()
    if predict_only:
        x_corr = x_pred
        contexts = _build_contexts(frames, cameras, state.config)
        loss, _ = _loss_and_grad(x_pred, state.splats, contexts, pool)
        info = StepInfo(loss=loss, iterations=0, millis=0.0, first_grad_norm=0.0)
    else:
        x_corr, info = update(
            x_pred,
            frames,
            cameras,
            state.splats,
            state.config,
            state.rest_length,
            pool,
            subsample_rng,
        )
        if state.config.reproject:
            # repeat projection rounds until the chain is back inside the
            # violation budget (a badly stretched chain needs more than one)
            for _ in range(5):
                violation = pbd.max_length_violation(x_corr, state.rest_length)
                if violation <= state.config.reproject_threshold * state.rest_length:
                    break
                x_corr = pbd.project_length_constraints(
                    x_corr,
                    state.rest_length,
                    physics.constraint_iterations,
                    pinned=dyn_pred.grasped_index,
                )
    info = replace(info, millis=(time.perf_counter() - t0) * 1e3)

    dynamics = pbd.DynamicsState(
        current=x_corr,
        previous=state.dynamics.current,
        grasped_index=dyn_pred.grasped_index,
    )
    new_chain = NodeChain(x_corr, state.rest_length, state.node_mass)
    new_state = FilterState(
        dynamics=dynamics,
        splats=splat.reattach(state.splats, new_chain),
        rest_length=state.rest_length,
        node_mass=state.node_mass,
        step_index=state.step_index + 1,
        config=state.config,
    )
    return new_state, x_corr, info


@dataclass
class TrackResult:
    timestamps: np.ndarray  # (T,)
    estimates: np.ndarray  # (T, N, 3)
    losses: np.ndarray  # (T,)
    iterations: np.ndarray  # (T,) int
    millis: np.ndarray  # (T,)


def track(
    dataset,
    opt: OptimizerConfig | None = None,
    physics: PhysicsParams | None = None,
    splat_config: SplatConfig | None = None,
    predict_only: bool = False,
    threads: int = 1,
) -> TrackResult:
    """Run the filter over a loaded dataset (see dataio.load_dataset).

    threads: worker threads for per-camera rendering work; 0 picks one per
    camera. The thread count never changes the results."""
    opt = opt if opt is not None else OptimizerConfig()
    physics = physics if physics is not None else dataset.physics
    splat_config = splat_config if splat_config is not None else dataset.splat_config

    chain0 = dataset.initial_chain()
    n_steps = dataset.n_steps
    cameras = dataset.cameras

    frames0 = dataset.frameset(0)
    state = init(
        chain0,
        frames0,
        cameras,
        splat_config,
        config=opt,
        gripper0=dataset.gripper.positions[0],
    )
    subsample_rng = np.random.default_rng(0) if opt.pixel_subsample > 0 else None

    n_workers = len(cameras) if threads == 0 else threads
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        timestamps = dataset.timestamps
        estimates = np.zeros((n_steps, chain0.n_nodes, 3))
        losses = np.zeros(n_steps)
        iters = np.zeros(n_steps, dtype=np.int64)
        millis = np.zeros(n_steps)

        estimates[0] = chain0.positions
        contexts0 = _build_contexts(frames0, cameras, opt)
        losses[0], _ = _loss_and_grad(chain0.positions, state.splats, contexts0, pool)

        gripper = dataset.gripper
        for t in range(1, n_steps):
            t0 = time.perf_counter()
            p_g = gripper.positions[t]
            a = gripper.action(t)
            state, x_est, info = step(
                state,
                p_g,
                a,
                dataset.frameset(t),
                cameras,
                physics,
                predict_only=predict_only,
                pool=pool,
                subsample_rng=subsample_rng,
            )
            estimates[t] = x_est
            losses[t] = info.loss
            iters[t] = info.iterations
            millis[t] = (time.perf_counter() - t0) * 1e3
    finally:
        if pool is not None:
            pool.shutdown()

    return TrackResult(
        timestamps=np.asarray(timestamps, dtype=np.float64),
        estimates=estimates,
        losses=losses,
        iterations=iters,
        millis=millis,
    )
