"""Pure numpy rasterization kernels (fallback for the compiled ``_kernel``).

Both backends share one calling convention:

    forward(means, conics, alphas, colors, tile_ptr, tile_ids, tile_size,
            height, width, cutoff2, w_max) -> (image, final_T, visible)
    backward(..., dL_dimage) -> (d_colors, d_alphas, d_means, d_conics)

``conics`` rows are (q00, q01, q11) of the inverse projected covariance.
``tile_ids[tile_ptr[t]:tile_ptr[t+1]]`` lists the Gaussians touching tile
``t`` in front-to-back order. A Gaussian contributes to a pixel iff its
squared Mahalanobis distance from the pixel center is <= ``cutoff2``.
``d_conics`` is the gradient w.r.t. (q00, q01, q11) with q01 treated as a
single symmetric parameter.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _tile_pixels(t, tile_size, height, width):
    tiles_x = (width + tile_size - 1) // tile_size
    ty, tx = divmod(t, tiles_x)
    rows = np.arange(ty * tile_size, min((ty + 1) * tile_size, height))
    cols = np.arange(tx * tile_size, min((tx + 1) * tile_size, width))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return rr.ravel(), cc.ravel()


def _tile_weights(ids, rr, cc, means, conics, alphas, cutoff2, w_max):
    dx = (cc + 0.5)[:, None] - means[ids, 0][None, :]
    dy = (rr + 0.5)[:, None] - means[ids, 1][None, :]
    q = conics[ids]
    m2 = q[:, 0] * dx * dx + 2.0 * q[:, 1] * dx * dy + q[:, 2] * dy * dy
    inside = m2 <= cutoff2
    G = np.where(inside, np.exp(-0.5 * m2), 0.0)
    a = alphas[ids][None, :] * G
    w = np.where(a < w_max, a, w_max) * inside
    T = np.cumprod(1.0 - w, axis=1)
    T = np.concatenate([np.ones((len(rr), 1)), T[:, :-1]], axis=1)
    return dx, dy, q, inside, G, a, w, T


def forward(means, conics, alphas, colors, tile_ptr, tile_ids, tile_size, height, width, cutoff2, w_max):
    n = len(means)
    image = np.zeros((height, width, 3))
    final_T = np.ones((height, width))
    visible = np.zeros(n, dtype=bool)
    for t in range(len(tile_ptr) - 1):
        ids = tile_ids[tile_ptr[t] : tile_ptr[t + 1]]
        if len(ids) == 0:
            continue
        rr, cc = _tile_pixels(t, tile_size, height, width)
        _, _, _, inside, _, _, w, T = _tile_weights(ids, rr, cc, means, conics, alphas, cutoff2, w_max)
        image[rr, cc] = (w * T) @ colors[ids]
        final_T[rr, cc] = T[:, -1] * (1.0 - w[:, -1])
        visible[ids[inside.any(axis=0)]] = True
    return image, final_T, visible


def backward(means, conics, alphas, colors, tile_ptr, tile_ids, tile_size, height, width, cutoff2, w_max, dL_dimage):
    n = len(means)
    d_colors = np.zeros((n, 3))
    d_alphas = np.zeros(n)
    d_means = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    for t in range(len(tile_ptr) - 1):
        ids = tile_ids[tile_ptr[t] : tile_ptr[t + 1]]
        if len(ids) == 0:
            continue
        rr, cc = _tile_pixels(t, tile_size, height, width)
        dx, dy, q, inside, G, a, w, T = _tile_weights(ids, rr, cc, means, conics, alphas, cutoff2, w_max)
        gC = dL_dimage[rr, cc]  # (P, 3)
        contrib = w * T
        c = colors[ids]
        layer = contrib[:, :, None] * c[None, :, :]
        # color composited strictly behind each layer
        behind = np.cumsum(layer[:, ::-1], axis=1)[:, ::-1] - layer
        dLdw = np.einsum("pc,pnc->pn", gC, T[:, :, None] * c[None] - behind / (1.0 - w)[:, :, None])
        dLdw *= inside
        np.add.at(d_colors, ids, contrib.T @ gC)
        live = inside & (a < w_max)
        g_alpha = np.where(live, dLdw * G, 0.0)
        g_pow = g_alpha * alphas[ids][None, :]
        np.add.at(d_alphas, ids, g_alpha.sum(axis=0))
        gx = (g_pow * (q[:, 0] * dx + q[:, 1] * dy)).sum(axis=0)
        gy = (g_pow * (q[:, 1] * dx + q[:, 2] * dy)).sum(axis=0)
        np.add.at(d_means, ids, np.stack([gx, gy], axis=1))
        gq = np.stack(
            [(-0.5 * g_pow * dx * dx).sum(axis=0), (-g_pow * dx * dy).sum(axis=0), (-0.5 * g_pow * dy * dy).sum(axis=0)],
            axis=1,
        )
        np.add.at(d_conics, ids, gq)
    return d_colors, d_alphas, d_means, d_conics
