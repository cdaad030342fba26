"""Masked L1 + DSSIM reconstruction objective with exact image-space gradients."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@lru_cache(maxsize=None)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


@lru_cache(maxsize=64)
def _band_matrix(n: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """(n-size+1)×n matrix whose rows are shifted copies of the window ('valid' correlation)."""
    k = gaussian_window(size, sigma)
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i : i + size] = k
    return m


def _apply(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # rows @ x @ colsᵀ over the two leading axes, trailing axes untouched
    h, w = x.shape[:2]
    tail = x.shape[2:]
    y = (rows @ x.reshape(h, -1)).reshape(rows.shape[0], w, *tail)
    y = np.moveaxis(y, 1, 0).reshape(w, -1)
    y = (cols @ y).reshape(cols.shape[0], rows.shape[0], *tail)
    return np.moveaxis(y, 0, 1)


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian 'valid' correlation over the two leading axes."""
    return _apply(x, _band_matrix(x.shape[0]), _band_matrix(x.shape[1]))


def _filter_adjoint(y: np.ndarray) -> np.ndarray:
    """Adjoint of ``_filter_valid`` (maps the valid grid back to the full image)."""
    h, w = y.shape[0] + SSIM_WINDOW - 1, y.shape[1] + SSIM_WINDOW - 1
    return _apply(y, _band_matrix(h).T, _band_matrix(w).T)


def masked_images(image, gt, mask):
    image = np.asarray(image, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape != gt.shape or mask.shape != image.shape[:2]:
        raise ValueError(f"shape mismatch: image {image.shape}, gt {gt.shape}, mask {mask.shape}")
    m = mask[..., None]
    return m * image, m * gt


def ssim(a, b, with_grad: bool = True):
    """Mean SSIM of two H×W×C images in [0, 1] and, optionally, dSSIM/da.

    11×11 Gaussian window (σ = 1.5), no padding, averaged over channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        value, grad = ssim(a[..., None], b[..., None], with_grad)
        return value, (None if grad is None else grad[..., 0])
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")
    mu_a, mu_b, e_aa, e_bb, e_ab = _filter_valid(np.stack([a, b, a * a, b * b, a * b]).transpose(1, 2, 0, 3)).transpose(
        2, 0, 1, 3
    )
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    A1 = 2.0 * mu_a * mu_b + SSIM_C1
    A2 = 2.0 * cov + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not with_grad:
        return value, None
    n = smap.size
    d_var = -smap / B2
    d_cov = 2.0 * A1 / (B1 * B2)
    d_mu = 2.0 * mu_b * A2 / (B1 * B2) - smap * 2.0 * mu_a / B1 - 2.0 * mu_a * d_var - mu_b * d_cov
    f_mu, f_var, f_cov = _filter_adjoint(np.stack([d_mu, d_var, d_cov]).transpose(1, 2, 0, 3)).transpose(2, 0, 1, 3)
    grad = (f_mu + 2.0 * a * f_var + b * f_cov) / n
    return value, grad


def reconstruction_loss(render, gt, mask, lambda_rec: float = 0.25, dssim_halved: bool = False):
    """``(1-λ)·mean|M⊙render - M⊙gt| + λ·DSSIM(M⊙render, M⊙gt)``.

    Returns ``(loss, dL/drender, parts)``; ``parts`` has the unweighted
    ``l1`` and ``dssim`` terms. DSSIM is ``1 - SSIM`` unless ``dssim_halved``.
    """
    if not 0.0 <= lambda_rec <= 1.0:
        raise ValueError("lambda_rec must lie in [0, 1]")
    rm, gm = masked_images(render, gt, mask)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    diff = rm - gm
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_rec) * np.sign(diff) * m / diff.size
    scale = 0.5 if dssim_halved else 1.0
    if lambda_rec > 0.0:
        s, ds = ssim(rm, gm)
        grad = grad - lambda_rec * scale * ds * m
    else:
        s, _ = ssim(rm, gm, with_grad=False)
    dssim = scale * (1.0 - s)
    loss = (1.0 - lambda_rec) * l1 + lambda_rec * dssim
    return loss, grad, {"l1": l1, "dssim": dssim}
