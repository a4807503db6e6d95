"""Spherical-Gaussian appearance model and the differentiable renderer.

The rope's appearance is a set of equal-size spherical 3D Gaussians pinned
to the chain segments; only the node positions are optimized, so rendering
needs no per-Gaussian rotations or scale updates. Rendering projects each
Gaussian to a 2D splat (mean by perspective projection, covariance by the
local-affine Jacobian approximation), depth-sorts them, and composites
front to back with alpha blending over the camera background color.

The photometric loss is the L2 norm of the residual image per camera,
summed over cameras. Its gradient with respect to node positions is exact
on the smooth branch: it chains through the blending products, the alpha
exponent, the projected mean AND the projected covariance (which depends
on depth), and the linear segment attachment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import CameraModel, Frame, FrameSet, NodeChain, SplatConfig

TILE = 16
DEPTH_MIN = 1e-6  # meters; Gaussians at or behind this are culled
COV_FLOOR = 1e-6  # px^2 added to the projected covariance diagonal


@dataclass(frozen=True)
class SplatSet:
    """M spherical Gaussians attached to chain segments.

    Attachment fixes each Gaussian at parameter s along segment i, so its
    mean is (1-s)*x_i + s*x_{i+1}; means deform with the chain through
    reattach()."""

    means: np.ndarray  # (M, 3) meters
    sigma_world: float  # shared isotropic standard deviation, meters
    colors: np.ndarray  # (M, 3) RGB in [0, 1]
    opacities: np.ndarray  # (M,) in (0, 1]
    seg_index: np.ndarray  # (M,) int, segment i
    seg_param: np.ndarray  # (M,) float, s in [0, 1]

    def __post_init__(self):
        m = self.means.shape[0]
        for name, arr, shape in (
            ("means", self.means, (m, 3)),
            ("colors", self.colors, (m, 3)),
            ("opacities", self.opacities, (m,)),
            ("seg_index", self.seg_index, (m,)),
            ("seg_param", self.seg_param, (m,)),
        ):
            if np.asarray(arr).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")

    @property
    def count(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class Projected2D:
    """One Gaussian on the image plane: projected mean (pixels), projected
    2x2 covariance (pixels^2), camera-frame depth (meters) and the
    axis-aligned pixel rectangle covering the 3-sigma ellipse."""

    mean2d: np.ndarray  # (2,)
    cov2d: np.ndarray  # (2, 2)
    depth: float
    footprint: tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open


def attachment_params(d: int) -> np.ndarray:
    """Interpolation parameters for d equally spaced Gaussians per segment:
    s_q = (q + 1/2) / d, never coincident with the nodes."""
    return (np.arange(d) + 0.5) / d


def build_splats(chain: NodeChain, config: SplatConfig) -> SplatSet:
    """Place (N-1)*d Gaussians along the chain segments."""
    n = chain.n_nodes
    d = config.gaussians_per_segment
    if d < 1:
        raise ValueError(f"gaussians_per_segment must be >= 1, got {d}")
    s = attachment_params(d)
    seg_index = np.repeat(np.arange(n - 1), d)
    seg_param = np.tile(s, n - 1)
    m = seg_index.shape[0]

    if config.colors is None:
        colors = np.full((m, 3), 0.5)
    else:
        colors = np.asarray(config.colors, dtype=np.float64)
        if colors.shape == (3,):
            colors = np.tile(colors, (m, 1))
        elif colors.shape != (m, 3):
            raise ValueError(f"colors shape {colors.shape} does not match M = {m}")

    splats = SplatSet(
        means=np.zeros((m, 3)),
        sigma_world=config.rope_diameter / 2.0,
        colors=colors.copy(),
        opacities=np.full(m, float(config.opacity)),
        seg_index=seg_index,
        seg_param=seg_param,
    )
    return reattach(splats, chain)


def attached_means(splats: SplatSet, positions: np.ndarray) -> np.ndarray:
    """Means implied by the attachment for the given node positions."""
    positions = np.asarray(positions, dtype=np.float64)
    i = splats.seg_index
    if i.size and i.max() + 1 >= positions.shape[0]:
        raise ValueError("attachment segment index out of range for chain")
    s = splats.seg_param[:, None]
    return (1.0 - s) * positions[i] + s * positions[i + 1]


def reattach(splats: SplatSet, chain: NodeChain) -> SplatSet:
    """Recompute means from the attachment; everything else unchanged."""
    return SplatSet(
        means=attached_means(splats, chain.positions),
        sigma_world=splats.sigma_world,
        colors=splats.colors,
        opacities=splats.opacities,
        seg_index=splats.seg_index,
        seg_param=splats.seg_param,
    )


def fit_colors(frames: FrameSet, masks) -> np.ndarray:
    """Shared splat color: the mean RGB over all masked pixels across all
    cameras (each pixel weighs equally, so cameras weigh by mask size)."""
    gathered = []
    for frame, mask in zip(frames.frames, masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != frame.pixels.shape[:2]:
            raise ValueError(
                f"mask shape {mask.shape} does not match frame {frame.pixels.shape[:2]}"
            )
        gathered.append(frame.pixels[mask])
    stacked = np.concatenate(gathered, axis=0) if gathered else np.zeros((0, 3))
    if stacked.shape[0] == 0:
        raise ValueError("cannot fit colors: all masks are empty")
    return stacked.mean(axis=0)


# ---------------------------------------------------------------------------
# projection


def project_points(camera: CameraModel, points: np.ndarray):
    """Perspective projection. Returns (uv (M, 2) pixels, depth (M,) meters);
    uv is garbage where depth <= 0 (callers cull)."""
    points = np.asarray(points, dtype=np.float64)
    p = camera.projection
    ph = points @ p[:, :3].T + p[:, 3]
    depth = ph[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = ph[:, :2] / depth[:, None]
    return uv, depth


def projection_jacobians(camera: CameraModel, uv: np.ndarray, depth: np.ndarray):
    """Exact 2x3 Jacobian of the projection at each point:
    row a = (P[a,:3] - uv_a * P[2,:3]) / depth."""
    p = camera.projection
    num = p[None, :2, :3] - uv[:, :, None] * p[None, 2, :3]
    return num / depth[:, None, None]


def _cov2d_packed(jac: np.ndarray, sigma_world: float):
    """Projected covariance J (sigma^2 I) J^T with the diagonal floor,
    packed as (c00, c01, c11)."""
    s2 = sigma_world * sigma_world
    c00 = s2 * np.sum(jac[:, 0, :] * jac[:, 0, :], axis=1) + COV_FLOOR
    c01 = s2 * np.sum(jac[:, 0, :] * jac[:, 1, :], axis=1)
    c11 = s2 * np.sum(jac[:, 1, :] * jac[:, 1, :], axis=1) + COV_FLOOR
    return c00, c01, c11


def _conic(c00, c01, c11):
    det = c00 * c11 - c01 * c01
    return np.stack([c11 / det, -c01 / det, c00 / det], axis=1)


def _footprints(uv, c00, c11, width, height):
    """Half-open pixel rectangles covering the 3-sigma ellipses; pixel p is
    included iff its center p + 0.5 lies within the axis-aligned extents."""
    rx = 3.0 * np.sqrt(c00)
    ry = 3.0 * np.sqrt(c11)
    x0 = np.ceil(uv[:, 0] - rx - 0.5)
    x1 = np.floor(uv[:, 0] + rx - 0.5) + 1.0
    y0 = np.ceil(uv[:, 1] - ry - 0.5)
    y1 = np.floor(uv[:, 1] + ry - 0.5) + 1.0
    rects = np.stack([x0, y0, x1, y1], axis=1)
    np.nan_to_num(rects, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
    rects = np.clip(rects, [0, 0, 0, 0], [width, height, width, height])
    return rects.astype(np.int32)


@dataclass
class ProjectedBatch:
    """Visible Gaussians of one camera, depth-sorted (nearest first)."""

    ids: np.ndarray  # (Mv,) original splat indices
    mean2d: np.ndarray  # (Mv, 2)
    conic: np.ndarray  # (Mv, 3) inverse covariance packed (a, b, c)
    depth: np.ndarray  # (Mv,)
    rects: np.ndarray  # (Mv, 4) int32
    jac: np.ndarray  # (Mv, 2, 3)
    tile_start: np.ndarray  # CSR over tiles
    tile_items: np.ndarray
    tiles_x: int
    tiles_y: int


def build_tile_lists(rects: np.ndarray, width: int, height: int):
    """CSR tile lists: for each 16x16 tile, the (sorted) Gaussian positions
    whose footprint rectangle intersects it."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    counts = np.zeros((tiles_y, tiles_x), dtype=np.int64)
    m = rects.shape[0]
    spans = []
    for j in range(m):
        x0, y0, x1, y1 = rects[j]
        if x0 >= x1 or y0 >= y1:
            spans.append(None)
            continue
        tx0, tx1 = x0 // TILE, (x1 - 1) // TILE + 1
        ty0, ty1 = y0 // TILE, (y1 - 1) // TILE + 1
        counts[ty0:ty1, tx0:tx1] += 1
        spans.append((tx0, tx1, ty0, ty1))
    tile_start = np.zeros(tiles_x * tiles_y + 1, dtype=np.int32)
    np.cumsum(counts.ravel(), out=tile_start[1:])
    tile_items = np.zeros(int(tile_start[-1]), dtype=np.int32)
    cursor = tile_start[:-1].copy()
    for j in range(m):
        if spans[j] is None:
            continue
        tx0, tx1, ty0, ty1 = spans[j]
        for ty in range(ty0, ty1):
            base = ty * tiles_x
            for tx in range(tx0, tx1):
                t = base + tx
                tile_items[cursor[t]] = j
                cursor[t] += 1
    return tile_start, tile_items, tiles_x, tiles_y


def project_splats(means: np.ndarray, sigma_world: float, camera: CameraModel) -> ProjectedBatch:
    """Project, cull, depth-sort, and tile a full splat set for one camera."""
    uv, depth = project_points(camera, means)
    in_front = depth > DEPTH_MIN
    uv_safe = np.where(in_front[:, None], uv, 0.0)
    jac = projection_jacobians(camera, uv_safe, np.where(in_front, depth, 1.0))
    c00, c01, c11 = _cov2d_packed(jac, sigma_world)
    rects = _footprints(uv_safe, c00, c11, camera.width, camera.height)
    on_image = (rects[:, 0] < rects[:, 2]) & (rects[:, 1] < rects[:, 3])
    visible = in_front & on_image

    ids = np.flatnonzero(visible)
    order = np.argsort(depth[ids], kind="stable")
    ids = ids[order]
    conic = _conic(c00[ids], c01[ids], c11[ids])
    tile_start, tile_items, tiles_x, tiles_y = build_tile_lists(
        rects[ids], camera.width, camera.height
    )
    return ProjectedBatch(
        ids=ids,
        mean2d=np.ascontiguousarray(uv[ids]),
        conic=np.ascontiguousarray(conic),
        depth=depth[ids],
        rects=np.ascontiguousarray(rects[ids]),
        jac=jac[ids],
        tile_start=tile_start,
        tile_items=tile_items,
        tiles_x=tiles_x,
        tiles_y=tiles_y,
    )


def project_gaussian(
    mean: np.ndarray, sigma_world: float, camera: CameraModel
) -> Projected2D | None:
    """Project a single Gaussian; None when culled (behind the near plane or
    footprint off-image)."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 3)
    uv, depth = project_points(camera, mean)
    if depth[0] <= DEPTH_MIN:
        return None
    jac = projection_jacobians(camera, uv, depth)
    c00, c01, c11 = _cov2d_packed(jac, sigma_world)
    rects = _footprints(uv, c00, c11, camera.width, camera.height)
    x0, y0, x1, y1 = (int(v) for v in rects[0])
    if x0 >= x1 or y0 >= y1:
        return None
    cov = np.array([[c00[0], c01[0]], [c01[0], c11[0]]])
    return Projected2D(mean2d=uv[0], cov2d=cov, depth=float(depth[0]), footprint=(x0, y0, x1, y1))


def alpha_at(g: Projected2D, opacity: float, u: np.ndarray) -> float:
    """Blending alpha of one projected Gaussian at pixel position u: opacity
    times the Gaussian falloff, clamped at ALPHA_MAX and truncated to zero
    outside the 3-sigma ellipse."""
    delta = np.asarray(u, dtype=np.float64) - g.mean2d
    inv = np.linalg.inv(g.cov2d)
    q = float(delta @ inv @ delta)
    if q > kernels.Q_CUTOFF:
        return 0.0
    return min(float(opacity) * float(np.exp(-0.5 * q)), kernels.ALPHA_MAX)


# ---------------------------------------------------------------------------
# rendering


def _render_arrays(splats: SplatSet, camera: CameraModel):
    batch = project_splats(splats.means, splats.sigma_world, camera)
    bg = np.ascontiguousarray(camera.background_color)
    image, trans, weight = kernels.forward_image(
        batch.mean2d,
        batch.conic,
        np.ascontiguousarray(splats.opacities[batch.ids]),
        np.ascontiguousarray(splats.colors[batch.ids]),
        batch.rects,
        batch.tile_start,
        batch.tile_items,
        batch.tiles_x,
        batch.tiles_y,
        camera.width,
        camera.height,
        bg,
    )
    return image, trans, weight


def render(
    splats: SplatSet, camera: CameraModel, camera_index: int = 0, timestamp: float = 0.0
) -> Frame:
    """Tiled rasterization of the splat set for one camera."""
    image, _, _ = _render_arrays(splats, camera)
    np.clip(image, 0.0, 1.0, out=image)
    return Frame(pixels=image, camera_index=camera_index, timestamp=timestamp)


def render_with_stats(splats: SplatSet, camera: CameraModel):
    """Rendering plus per-pixel transmittance and accumulated splat weight
    (used by mask generation and the blending-normalization checks)."""
    image, trans, weight = _render_arrays(splats, camera)
    np.clip(image, 0.0, 1.0, out=image)
    return image, trans, weight


def oracle_render_arrays(splats: SplatSet, camera: CameraModel):
    """Brute-force rendering pass: every pixel considers every depth-sorted
    visible Gaussian, with no tiles and no footprint rectangles. Shares only
    the mathematical definition with the tiled path: the 3-sigma cutoff, the
    alpha clamp and the transmittance stop.

    Returns (image, transmittance, weight)."""
    uv, depth = project_points(camera, splats.means)
    visible = depth > DEPTH_MIN
    ids = np.flatnonzero(visible)
    ids = ids[np.argsort(depth[ids], kind="stable")]

    h, w = camera.height, camera.width
    jac = projection_jacobians(camera, uv[ids], depth[ids])
    c00, c01, c11 = _cov2d_packed(jac, splats.sigma_world)
    conic = _conic(c00, c01, c11)

    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    color_acc = np.zeros((h, w, 3))
    weight = np.zeros((h, w))
    trans = np.ones((h, w))
    for k, j in enumerate(ids):
        dx = xs[None, :] - uv[j, 0]
        dy = ys[:, None] - uv[j, 1]
        q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
        contrib = (q <= kernels.Q_CUTOFF) & (trans >= kernels.T_STOP)
        alpha = np.where(
            contrib,
            np.minimum(splats.opacities[j] * np.exp(-0.5 * q), kernels.ALPHA_MAX),
            0.0,
        )
        aw = alpha * trans
        color_acc += aw[:, :, None] * splats.colors[j]
        weight += aw
        trans = trans * (1.0 - alpha)
    image = color_acc + trans[:, :, None] * camera.background_color
    np.clip(image, 0.0, 1.0, out=image)
    return image, trans, weight


def render_oracle(
    splats: SplatSet, camera: CameraModel, camera_index: int = 0, timestamp: float = 0.0
) -> Frame:
    """Independent correctness oracle for render(); see oracle_render_arrays."""
    image, _, _ = oracle_render_arrays(splats, camera)
    return Frame(pixels=image, camera_index=camera_index, timestamp=timestamp)


def render_loss(observed, rendered) -> float:
    """L2 norm of the residual image (square root of the sum of squared
    per-channel differences)."""
    obs = observed.pixels if isinstance(observed, Frame) else np.asarray(observed)
    ren = rendered.pixels if isinstance(rendered, Frame) else np.asarray(rendered)
    if obs.shape != ren.shape:
        raise ValueError(f"image shapes differ: {obs.shape} vs {ren.shape}")
    diff = obs - ren
    return float(np.sqrt(np.sum(diff * diff)))


# ---------------------------------------------------------------------------
# loss gradient with respect to node positions


@dataclass
class CameraContext:
    """Static per-camera data reused across optimizer iterations."""

    camera: CameraModel
    observed: np.ndarray  # (H, W, 3) C-contiguous
    mask: np.ndarray  # (H, W) uint8; all-ones when the loss is unmasked
    base: float  # sum over mask of |observed - background|^2

    @classmethod
    def build(cls, camera: CameraModel, observed: np.ndarray, mask: np.ndarray | None):
        observed = np.ascontiguousarray(observed, dtype=np.float64)
        if observed.shape != (camera.height, camera.width, 3):
            raise ValueError(
                f"observed image shape {observed.shape} does not match camera "
                f"({camera.height}, {camera.width}, 3)"
            )
        if mask is None:
            mask_u8 = np.ones((camera.height, camera.width), dtype=np.uint8)
        else:
            mask_u8 = np.ascontiguousarray(np.asarray(mask, dtype=bool).astype(np.uint8))
        d_bg = observed - camera.background_color
        base = float(np.sum(np.sum(d_bg * d_bg, axis=2)[mask_u8.astype(bool)]))
        return cls(camera=camera, observed=observed, mask=mask_u8, base=base)


def _cov_chain_to_mean(camera: CameraModel, depth, jac, g_cov, sigma_world):
    """Chain d(loss)/d(projected covariance) back to the 3D mean.

    The projected covariance is sigma^2 J J^T; J varies with the mean, with
    dJ[a,n]/dx_m = -(J[a,m] P2[n] + J[a,n] P2[m]) / depth for the third
    projection row P2."""
    p2 = camera.projection[2, :3]
    s2 = sigma_world * sigma_world
    j0 = jac[:, 0, :]
    j1 = jac[:, 1, :]
    pb0 = j0 @ p2
    pb1 = j1 @ p2
    jj00 = np.sum(j0 * j0, axis=1)
    jj01 = np.sum(j0 * j1, axis=1)
    jj11 = np.sum(j1 * j1, axis=1)
    inv_w = 1.0 / depth
    d00 = -2.0 * s2 * (j0 * pb0[:, None] + jj00[:, None] * p2) * inv_w[:, None]
    d01 = -s2 * (j0 * pb1[:, None] + j1 * pb0[:, None] + 2.0 * jj01[:, None] * p2) * inv_w[:, None]
    d11 = -2.0 * s2 * (j1 * pb1[:, None] + jj11[:, None] * p2) * inv_w[:, None]
    return (
        g_cov[:, 0:1] * d00 + g_cov[:, 1:2] * d01 + g_cov[:, 2:3] * d11
    )


def _camera_loss_and_means_grad(means, splats, ctx: CameraContext):
    """Per-camera loss and d(loss)/d(3D means). Returns (loss, grad (M, 3))."""
    batch = project_splats(means, splats.sigma_world, ctx.camera)
    bg = np.ascontiguousarray(ctx.camera.background_color)
    m_total = means.shape[0]
    grad = np.zeros((m_total, 3))
    if batch.ids.size == 0:
        return float(np.sqrt(max(ctx.base, 0.0))), grad

    opac = np.ascontiguousarray(splats.opacities[batch.ids])
    cols = np.ascontiguousarray(splats.colors[batch.ids])
    args = (
        batch.mean2d,
        batch.conic,
        opac,
        cols,
        batch.rects,
        batch.tile_start,
        batch.tile_items,
        batch.tiles_x,
        batch.tiles_y,
        ctx.camera.width,
        ctx.camera.height,
        bg,
        ctx.observed,
        ctx.mask,
    )
    delta = kernels.loss_forward(*args)
    sq = max(ctx.base + delta, 0.0)
    loss = float(np.sqrt(sq))
    if loss <= 0.0:
        return loss, grad
    inv_loss = 1.0 / loss
    g_mean2d, g_cov2d = kernels.loss_backward(*args, inv_loss)
    d_mean = np.einsum("ma,man->mn", g_mean2d, batch.jac)
    d_mean += _cov_chain_to_mean(
        ctx.camera, batch.depth, batch.jac, g_cov2d, splats.sigma_world
    )
    grad[batch.ids] = d_mean
    return loss, grad


def _scatter_to_nodes(splats: SplatSet, d_means: np.ndarray, n_nodes: int) -> np.ndarray:
    grad = np.zeros((n_nodes, 3))
    s = splats.seg_param[:, None]
    np.add.at(grad, splats.seg_index, (1.0 - s) * d_means)
    np.add.at(grad, splats.seg_index + 1, s * d_means)
    return grad


def loss_and_gradient_from_contexts(
    positions: np.ndarray, splats: SplatSet, contexts: list[CameraContext]
):
    """Summed multi-camera loss and its exact gradient w.r.t. node positions,
    with per-camera observation data prepared once by the caller."""
    means = attached_means(splats, positions)
    total_loss = 0.0
    d_means = np.zeros_like(means)
    for ctx in contexts:
        loss_k, grad_k = _camera_loss_and_means_grad(means, splats, ctx)
        total_loss += loss_k
        d_means += grad_k
    grad_nodes = _scatter_to_nodes(splats, d_means, positions.shape[0])
    return total_loss, grad_nodes


def loss_gradient_nodes(
    chain: NodeChain,
    splats: SplatSet,
    frames: FrameSet,
    cameras,
    mask_loss: bool = False,
    mask_dilation: int = 4,
):
    """Loss and gradient of the summed multi-camera rendering loss with
    respect to the chain's node positions.

    With mask_loss the residual is restricted to the dilated object masks
    carried by the frame set (default: full image)."""
    cameras = list(cameras)
    if len(frames) != len(cameras):
        raise ValueError(f"{len(frames)} frames for {len(cameras)} cameras")
    contexts = []
    for k, cam in enumerate(cameras):
        mask = None
        if mask_loss:
            if frames.masks is None:
                raise ValueError("mask_loss requires masks in the frame set")
            mask = dilate_mask(frames.masks[k], mask_dilation)
        contexts.append(CameraContext.build(cam, frames.frames[k].pixels, mask))
    return loss_and_gradient_from_contexts(chain.positions, splats, contexts)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a square structuring element of the given radius."""
    from scipy.ndimage import binary_dilation

    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask
    return binary_dilation(mask, iterations=radius)
