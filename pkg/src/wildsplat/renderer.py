"""Forward rasterization of a Gaussian cloud into a view and its analytic backward pass.

Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)`` in pixel
coordinates; a world point ``x`` lands at ``diag(W, H) (A x + t)``.
Gaussians are composited front to back by ``(depth, index)`` over a black
background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from wildsplat import _backend
from wildsplat.core import GaussianCloud, GradientBundle, View, build_covariance


@dataclass
class RenderSettings:
    cutoff_sigma: float = 3.0
    w_max: float = 0.999
    tile_size: int = 16
    max_condition: float = 1e12
    backend: str | None = None  # None -> module chosen at import

    @property
    def kernel(self):
        return _backend.kernel if self.backend is None else _backend.load(self.backend)


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class Projection:
    means: np.ndarray  # (N, 2) pixels
    cov: np.ndarray  # (N, 2, 2) pixels²
    conics: np.ndarray  # (N, 3) q00, q01, q11 of cov⁻¹
    radius: np.ndarray  # (N,) 3·sqrt(λ_max)
    valid: np.ndarray  # (N,) bool, False for degenerate covariances
    M: np.ndarray  # (2, 2) world -> pixel linear map


@dataclass
class RenderOutput:
    image: np.ndarray
    final_T: np.ndarray
    visible: np.ndarray
    projected_radius: np.ndarray
    n_degenerate: int
    projection: Projection = field(repr=False)
    tiles: tuple = field(repr=False)
    alphas: np.ndarray = field(repr=False)

    @property
    def visible_set(self) -> np.ndarray:
        return np.flatnonzero(self.visible)


def project(cloud: GaussianCloud, view: View, settings: RenderSettings = DEFAULT_SETTINGS) -> Projection:
    h, w = view.shape
    M = view.pixel_affine
    means = cloud.positions @ M.T + np.array([w, h]) * view.t
    cov = M @ build_covariance(cloud.log_scales, cloud.rotations) @ M.T
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_max, lam_min = mid + rad, mid - rad
    det = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        valid = (
            np.isfinite(means).all(axis=1)
            & np.isfinite(lam_max)
            & (lam_min > 0)
            & (det > 0)
            & (lam_max <= settings.max_condition * lam_min)
        )
        inv_det = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
    conics = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    return Projection(means, cov, conics, radius, valid, M)


def depth_order(cloud: GaussianCloud) -> np.ndarray:
    """Front-to-back order: ascending depth, ties broken by index."""
    return np.lexsort((np.arange(len(cloud)), cloud.depths))


def bin_tiles(proj: Projection, order: np.ndarray, height: int, width: int, settings: RenderSettings):
    """CSR lists of the Gaussians whose cutoff ellipse may touch each tile, in depth order."""
    ts = settings.tile_size
    tiles_x, tiles_y = -(-width // ts), -(-height // ts)
    order = order[proj.valid[order]]
    m = proj.means[order]
    rx = settings.cutoff_sigma * np.sqrt(proj.cov[order, 0, 0])
    ry = settings.cutoff_sigma * np.sqrt(proj.cov[order, 1, 1])
    c_lo = np.floor(m[:, 0] - rx - 0.5)
    c_hi = np.ceil(m[:, 0] + rx - 0.5)
    r_lo = np.floor(m[:, 1] - ry - 0.5)
    r_hi = np.ceil(m[:, 1] + ry - 0.5)
    onscreen = (c_hi >= 0) & (c_lo <= width - 1) & (r_hi >= 0) & (r_lo <= height - 1)
    order, c_lo, c_hi, r_lo, r_hi = (v[onscreen] for v in (order, c_lo, c_hi, r_lo, r_hi))
    tx0 = np.clip(c_lo, 0, width - 1).astype(np.int64) // ts
    tx1 = np.clip(c_hi, 0, width - 1).astype(np.int64) // ts
    ty0 = np.clip(r_lo, 0, height - 1).astype(np.int64) // ts
    ty1 = np.clip(r_hi, 0, height - 1).astype(np.int64) // ts
    wx = tx1 - tx0 + 1
    counts = wx * (ty1 - ty0 + 1)
    rank = np.repeat(np.arange(len(order)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile = (ty0[rank] + local // wx[rank]) * tiles_x + tx0[rank] + local % wx[rank]
    perm = np.lexsort((rank, tile))
    tile_ids = np.ascontiguousarray(order[rank[perm]], dtype=np.int64)
    tile_ptr = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=tiles_x * tiles_y), out=tile_ptr[1:])
    return tile_ptr, tile_ids


def _kernel_args(proj, alphas, colors, tiles, height, width, settings):
    return (
        np.ascontiguousarray(proj.means),
        np.ascontiguousarray(proj.conics),
        np.ascontiguousarray(alphas),
        np.ascontiguousarray(colors, dtype=np.float64),
        tiles[0],
        tiles[1],
        settings.tile_size,
        height,
        width,
        float(settings.cutoff_sigma) ** 2,
        float(settings.w_max),
    )


def rasterize_forward(cloud: GaussianCloud, view: View, settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    h, w = view.shape
    proj = project(cloud, view, settings)
    tiles = bin_tiles(proj, depth_order(cloud), h, w, settings)
    alphas = cloud.opacities
    image, final_T, visible = settings.kernel.forward(*_kernel_args(proj, alphas, cloud.colors, tiles, h, w, settings))
    return RenderOutput(
        image=image,
        final_T=final_T,
        visible=np.asarray(visible, dtype=bool),
        projected_radius=np.where(proj.valid, proj.radius, 0.0),
        n_degenerate=int((~proj.valid).sum()),
        projection=proj,
        tiles=tiles,
        alphas=alphas,
    )


def rasterize_backward(
    cloud: GaussianCloud,
    view: View,
    dL_dimage: np.ndarray,
    render: RenderOutput | None = None,
    settings: RenderSettings = DEFAULT_SETTINGS,
) -> GradientBundle:
    """Exact gradients of ``sum(dL_dimage * image)`` w.r.t. the stored parameters."""
    h, w = view.shape
    dL_dimage = np.asarray(dL_dimage, dtype=np.float64)
    if dL_dimage.shape != (h, w, 3):
        raise ValueError(f"dL/dimage has shape {dL_dimage.shape}, expected {(h, w, 3)}")
    if render is None:
        render = rasterize_forward(cloud, view, settings)
    proj = render.projection
    d_colors, d_alphas, d_means, d_conics = settings.kernel.backward(
        *_kernel_args(proj, render.alphas, cloud.colors, render.tiles, h, w, settings),
        np.ascontiguousarray(dL_dimage),
    )
    M = proj.M
    alphas = render.alphas

    # conic (inverse covariance) -> projected covariance: dΣ' = -Q dQ Q
    q = proj.conics
    Q = np.stack([np.stack([q[:, 0], q[:, 1]], -1), np.stack([q[:, 1], q[:, 2]], -1)], -2)
    gQ = np.stack(
        [np.stack([d_conics[:, 0], 0.5 * d_conics[:, 1]], -1), np.stack([0.5 * d_conics[:, 1], d_conics[:, 2]], -1)], -2
    )
    g_cov_view = -Q @ gQ @ Q
    g_cov = M.T @ g_cov_view @ M

    c, s = np.cos(cloud.rotations), np.sin(cloud.rotations)
    var = np.exp(2.0 * cloud.log_scales)
    r0 = np.stack([c, s], -1)
    r1 = np.stack([-s, c], -1)
    d_log_scales = np.stack(
        [
            2.0 * var[:, 0] * np.einsum("ni,nij,nj->n", r0, g_cov, r0),
            2.0 * var[:, 1] * np.einsum("ni,nij,nj->n", r1, g_cov, r1),
        ],
        -1,
    )
    # d/dθ of R D Rᵀ contracted with symmetric g_cov: 2 tr(g R' D Rᵀ)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    dR = np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)
    D = np.zeros_like(R)
    D[:, 0, 0], D[:, 1, 1] = var[:, 0], var[:, 1]
    d_rot = 2.0 * np.einsum("nij,nji->n", g_cov, dR @ D @ np.swapaxes(R, 1, 2))

    return GradientBundle(
        per_attribute={
            "position": d_means @ M,
            "scale": d_log_scales,
            "rotation": d_rot,
            "opacity": d_alphas * alphas * (1.0 - alphas),
            "color": d_colors,
        },
        view_space_pos=d_means,
    )


def render_image(cloud: GaussianCloud, view: View, settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    return rasterize_forward(cloud, view, settings).image

