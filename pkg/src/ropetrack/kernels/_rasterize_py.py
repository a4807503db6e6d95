"""Pure-numpy rasterization kernels.

Reference implementation of the compositing kernels; the Cython module
`_rasterize_cy` implements the identical per-pixel semantics. Gaussians
arrive depth-sorted (nearest first). Per pixel, a Gaussian contributes iff
the remaining transmittance is at least T_STOP and its squared Mahalanobis
distance is at most Q_CUTOFF; alpha is clamped at ALPHA_MAX.

This backend iterates Gaussians over their footprint rectangles instead of
tile lists. Per pixel that yields the same contributor set in the same
order, so results match the tiled kernel to the last few ulps.
"""

from __future__ import annotations

import numpy as np

Q_CUTOFF = 9.0  # 3-standard-deviation truncation
ALPHA_MAX = 0.99
T_STOP = 1e-4  # stop compositing once transmittance falls below this

BACKEND = "python"


def _alpha_block(mean2d, conic, opacity, rect, trans):
    """Alpha over a footprint rectangle, zeroed where the Gaussian does not
    contribute. Returns (alpha, clamped_mask)."""
    x0, y0, x1, y1 = rect
    dx = (np.arange(x0, x1) + 0.5) - mean2d[0]
    dy = (np.arange(y0, y1) + 0.5) - mean2d[1]
    dx = dx[None, :]
    dy = dy[:, None]
    q = conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
    contrib = (q <= Q_CUTOFF) & (trans >= T_STOP)
    raw = opacity * np.exp(-0.5 * q)
    clamped = contrib & (raw > ALPHA_MAX)
    alpha = np.where(contrib, np.minimum(raw, ALPHA_MAX), 0.0)
    return alpha, clamped


def forward_image(
    mean2d,
    conic,
    opacity,
    color,
    rects,
    tile_start,
    tile_items,
    tiles_x,
    tiles_y,
    width,
    height,
    background,
):
    """Composite sorted Gaussians over the full image.

    Returns (image, transmittance, weight): the composited RGB image
    (background already blended in), the per-pixel residual transmittance,
    and the per-pixel accumulated splat weight sum(alpha_j * T_j).
    """
    color_acc = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    weight = np.zeros((height, width))
    for j in range(mean2d.shape[0]):
        x0, y0, x1, y1 = rects[j]
        if x0 >= x1 or y0 >= y1:
            continue
        tblk = trans[y0:y1, x0:x1]
        alpha, _ = _alpha_block(mean2d[j], conic[j], opacity[j], rects[j], tblk)
        w = alpha * tblk
        color_acc[y0:y1, x0:x1] += w[:, :, None] * color[j]
        weight[y0:y1, x0:x1] += w
        trans[y0:y1, x0:x1] = tblk * (1.0 - alpha)
    image = color_acc + trans[:, :, None] * background
    return image, trans, weight


def loss_forward(
    mean2d,
    conic,
    opacity,
    color,
    rects,
    tile_start,
    tile_items,
    tiles_x,
    tiles_y,
    width,
    height,
    background,
    observed,
    mask,
):
    """sum over masked pixels of |rendered - observed|^2 - |background - observed|^2.

    Pixels no Gaussian touches render exactly as background, so their terms
    cancel; adding this to the precomputed background residual gives the
    squared image loss without an explicit full-image pass in the caller.
    """
    image, _, _ = forward_image(
        mean2d, conic, opacity, color, rects, tile_start, tile_items,
        tiles_x, tiles_y, width, height, background,
    )
    d_render = image - observed
    d_bg = background[None, None, :] - observed
    per_pixel = np.sum(d_render * d_render - d_bg * d_bg, axis=2)
    return float(np.sum(per_pixel[mask.astype(bool)]))


def loss_backward(
    mean2d,
    conic,
    opacity,
    color,
    rects,
    tile_start,
    tile_items,
    tiles_x,
    tiles_y,
    width,
    height,
    background,
    observed,
    mask,
    inv_loss,
):
    """Gradient of the L2 image loss w.r.t. projected means and covariances.

    Returns (g_mean2d (M, 2), g_cov2d (M, 3)) in the sorted Gaussian order;
    g_cov2d is packed as (d/dS00, d/dS01, d/dS11) for the symmetric 2x2
    projected covariance.
    """
    m = mean2d.shape[0]
    color_acc = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    saved = []
    for j in range(m):
        x0, y0, x1, y1 = rects[j]
        if x0 >= x1 or y0 >= y1:
            saved.append(None)
            continue
        tblk = trans[y0:y1, x0:x1]
        alpha, clamped = _alpha_block(mean2d[j], conic[j], opacity[j], rects[j], tblk)
        saved.append((alpha, tblk.copy(), clamped))
        w = alpha * tblk
        color_acc[y0:y1, x0:x1] += w[:, :, None] * color[j]
        trans[y0:y1, x0:x1] = tblk * (1.0 - alpha)
    image = color_acc + trans[:, :, None] * background

    # dL/d(pixel); outside the mask nothing flows back
    r = (image - observed) * inv_loss
    r[~mask.astype(bool)] = 0.0

    # Suffix S: per pixel, contributions of everything behind the current
    # Gaussian (starts as the background term).
    suffix = trans[:, :, None] * background
    g_mean2d = np.zeros((m, 2))
    g_cov2d = np.zeros((m, 3))
    for j in range(m - 1, -1, -1):
        if saved[j] is None:
            continue
        alpha, tj, clamped = saved[j]
        x0, y0, x1, y1 = rects[j]
        rblk = r[y0:y1, x0:x1]
        sblk = suffix[y0:y1, x0:x1]
        one_m = 1.0 - alpha
        front = color[j][None, None, :] * tj[:, :, None]
        dl_dalpha = np.sum(rblk * (front - sblk / one_m[:, :, None]), axis=2)
        # Geometry gradient vanishes where alpha sits at the clamp.
        geom = np.where(clamped, 0.0, alpha)
        common = dl_dalpha * geom
        dx = (np.arange(x0, x1) + 0.5) - mean2d[j, 0]
        dy = (np.arange(y0, y1) + 0.5) - mean2d[j, 1]
        dx = dx[None, :]
        dy = dy[:, None]
        w0 = conic[j, 0] * dx + conic[j, 1] * dy
        w1 = conic[j, 1] * dx + conic[j, 2] * dy
        g_mean2d[j, 0] = np.sum(common * w0)
        g_mean2d[j, 1] = np.sum(common * w1)
        g_cov2d[j, 0] = 0.5 * np.sum(common * w0 * w0)
        g_cov2d[j, 1] = np.sum(common * w0 * w1)
        g_cov2d[j, 2] = 0.5 * np.sum(common * w1 * w1)
        suffix[y0:y1, x0:x1] += (alpha * tj)[:, :, None] * color[j]
    return g_mean2d, g_cov2d
