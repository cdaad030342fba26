"""Consistency-guided masking: per-cell reliability scale σ, consistency score, final mask.

The default feature backend is a deterministic patch-statistics extractor
(no pretrained network). Per ``grid_scale``×``grid_scale`` patch it emits 12
features, each multiplied by a fixed constant:

    0-2   channel means                      × 1
    3-5   channel standard deviations        × 2
    6-11  RMS luminance-gradient magnitude
          in 6 orientation bins over [0, π)  × 2

Images whose sides are not multiples of ``grid_scale`` are reflect-padded
up to the next multiple; score maps are cropped back to the image size.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wildsplat.optim import Adam

GRID_SCALE = 8
N_ORIENT = 6
FEATURE_SCALES = np.array([1.0] * 3 + [2.0] * 3 + [2.0] * N_ORIENT)
HIDDEN = 16
DELTA0 = math.log(math.e - 1.0)


@dataclass
class FeatureGrid:
    features: np.ndarray  # (C, H', W')
    grid_scale: int = GRID_SCALE

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


def _pad_to_grid(image: np.ndarray, g: int) -> np.ndarray:
    h, w = image.shape[:2]
    ph, pw = (-h) % g, (-w) % g
    if ph == 0 and pw == 0:
        return image
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (image.ndim - 2)
    return np.pad(image, pad, mode="reflect")


def downsample(image: np.ndarray, g: int = GRID_SCALE) -> np.ndarray:
    """Area-mean pooling to the feature grid; (H, W, ...) -> (H/g, W/g, ...)."""
    x = _pad_to_grid(np.asarray(image, dtype=np.float64), g)
    h, w = x.shape[:2]
    return x.reshape(h // g, g, w // g, g, *x.shape[2:]).mean(axis=(1, 3))


def extract_features(image, grid_scale: int = GRID_SCALE) -> FeatureGrid:
    img = _pad_to_grid(np.asarray(image, dtype=np.float64), grid_scale)
    g = grid_scale
    h, w = img.shape[:2]
    hp, wp = h // g, w // g
    patches = img.reshape(hp, g, wp, g, 3)
    means = patches.mean(axis=(1, 3))
    stds = np.sqrt(np.maximum((patches**2).mean(axis=(1, 3)) - means**2, 0.0))
    lum = img.mean(axis=2)
    gy, gx = np.gradient(lum)
    energy = gx * gx + gy * gy
    orient = np.mod(np.arctan2(gy, gx), math.pi)
    bins = np.minimum((orient / (math.pi / N_ORIENT)).astype(np.int64), N_ORIENT - 1)
    onehot = (bins[..., None] == np.arange(N_ORIENT)) * energy[..., None]
    grad_feat = np.sqrt(onehot.reshape(hp, g, wp, g, N_ORIENT).mean(axis=(1, 3)))
    feats = np.concatenate([means, stds, grad_feat], axis=2) * FEATURE_SCALES
    return FeatureGrid(np.ascontiguousarray(feats.transpose(2, 0, 1)), grid_scale)


# Feature file: b"WSFEAT01", then <u4 C, H', W', grid_scale, then C·H'·W' <f8 (C-order).
FEATURE_MAGIC = b"WSFEAT01"


def save_features(path, grid: FeatureGrid) -> None:
    c, h, w = grid.features.shape
    Path(path).write_bytes(
        FEATURE_MAGIC + struct.pack("<4I", c, h, w, grid.grid_scale) + grid.features.astype("<f8").tobytes()
    )


def load_features(path) -> FeatureGrid:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature grid file")
    c, h, w, g = struct.unpack("<4I", data[8:24])
    if len(data) != 24 + 8 * c * h * w:
        raise ValueError(f"{path}: truncated feature grid")
    feats = np.frombuffer(data, dtype="<f8", offset=24).reshape(c, h, w).astype(np.float64)
    return FeatureGrid(feats, g)


def softplus(x):
    return np.logaddexp(0.0, x)


class Predictor:
    """Location-wise MLP ``C -> 16 (tanh) -> 1``; output layer starts at zero."""

    def __init__(self, in_features: int = len(FEATURE_SCALES), hidden: int = HIDDEN, seed: int = 0, lr: float = 1e-3):
        rng = np.random.default_rng(seed)
        limit = math.sqrt(6.0 / (in_features + hidden))
        self.params = {
            "w1": rng.uniform(-limit, limit, (in_features, hidden)),
            "b1": np.zeros(hidden),
            "w2": np.zeros(hidden),
            "b2": np.zeros(1),
        }
        self.optimizer = Adam({"w1": lr, "b1": lr, "w2": lr, "b2": lr})

    @property
    def in_features(self) -> int:
        return self.params["w1"].shape[0]

    def raw(self, grid: FeatureGrid):
        c, h, w = grid.features.shape
        if c != self.in_features:
            raise ValueError(f"feature width {c} does not match predictor input {self.in_features}")
        x = grid.features.reshape(c, -1).T
        hid = np.tanh(x @ self.params["w1"] + self.params["b1"])
        out = hid @ self.params["w2"] + self.params["b2"][0]
        return out.reshape(h, w), (x, hid)

    def backward(self, cache, d_raw: np.ndarray) -> dict[str, np.ndarray]:
        x, hid = cache
        d_out = d_raw.reshape(-1)
        d_hid = np.outer(d_out, self.params["w2"]) * (1.0 - hid**2)
        return {
            "w1": x.T @ d_hid,
            "b1": d_hid.sum(axis=0),
            "w2": hid.T @ d_out,
            "b2": np.array([d_out.sum()]),
        }

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.optimizer.step(self.params, grads)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in ("w1", "b1", "w2", "b2")])

    def set_flat(self, flat: np.ndarray) -> None:
        off = 0
        for k in ("w1", "b1", "w2", "b2"):
            n = self.params[k].size
            self.params[k] = np.array(flat[off : off + n], dtype=np.float64).reshape(self.params[k].shape)
            off += n
        if off != len(flat):
            raise ValueError(f"predictor weight vector has {len(flat)} entries, expected {off}")


def predict_sigma(predictor: Predictor, grid: FeatureGrid, delta0: float = DELTA0, return_cache: bool = False):
    """σ = softplus(f(F) + δ0) on the feature grid."""
    raw, cache = predictor.raw(grid)
    sigma = softplus(raw + delta0)
    if return_cache:
        return sigma, (cache, raw + delta0)
    return sigma


def sigma_backward(predictor: Predictor, cache, d_sigma: np.ndarray) -> dict[str, np.ndarray]:
    mlp_cache, pre = cache
    d_raw = d_sigma * 0.5 * (1.0 + np.tanh(0.5 * pre))  # softplus' = sigmoid
    return predictor.backward(mlp_cache, d_raw)


def cosine_distance(fa: FeatureGrid, fb: FeatureGrid) -> np.ndarray:
    """Per-cell ``1 - cos`` over channels; 0 if both cells are zero, 1 if exactly one is."""
    a, b = fa.features, fb.features
    if a.shape != b.shape:
        raise ValueError(f"feature grid mismatch: {a.shape} vs {b.shape}")
    na2, nb2 = (a * a).sum(axis=0), (b * b).sum(axis=0)
    dot = (a * b).sum(axis=0)
    both = (na2 > 0) & (nb2 > 0)
    # sqrt of the product (not a product of norms) so identical cells give exactly cos = 1
    cos = np.where(both, dot / np.sqrt(np.where(both, na2 * nb2, 1.0)), np.where((na2 == 0) & (nb2 == 0), 1.0, 0.0))
    return 1.0 - np.clip(cos, -1.0, 1.0)


def residual_target(render, gt, features_render: FeatureGrid, features_gt: FeatureGrid, s_sem: float = 0.5):
    """Semantically gated photometric residual on the feature grid (a constant target)."""
    if s_sem <= 0:
        raise ValueError("s_sem must be > 0")
    g = features_gt.grid_scale
    photometric = np.abs(downsample(render, g) - downsample(gt, g)).sum(axis=-1)
    dcos = cosine_distance(features_render, features_gt)
    if photometric.shape != dcos.shape:
        raise ValueError(f"grid mismatch: {photometric.shape} vs {dcos.shape}")
    return np.minimum(1.0, dcos / s_sem) * photometric


def predictor_loss(sigma, E, lambda_inc: float = 0.5, eps: float = 1e-6):
    sigma = np.asarray(sigma, dtype=np.float64)
    denom = 2.0 * sigma**2 + eps
    loss = float(np.mean(E / denom + lambda_inc * np.log(sigma + eps)))
    grad = (-4.0 * sigma * E / denom**2 + lambda_inc / (sigma + eps)) / sigma.size
    return loss, grad


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows interpolate ``n_in`` samples onto ``n_out`` (half-pixel centers, edge clamp)."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(grid: np.ndarray, out_shape: tuple[int, int], grid_scale: int = GRID_SCALE) -> np.ndarray:
    """Bilinear (align_corners=False) upsampling by ``grid_scale``, cropped to ``out_shape``."""
    hp, wp = grid.shape
    up = _bilinear_matrix(hp * grid_scale, hp) @ grid @ _bilinear_matrix(wp * grid_scale, wp).T
    return up[: out_shape[0], : out_shape[1]]


def consistency_score(sigma, c_sigma: float = 0.2, out_shape=None, grid_scale: int = GRID_SCALE):
    """``exp(-σ²/c_σ)`` on the grid, then upsampled to ``out_shape`` (kept at grid resolution if None)."""
    if c_sigma <= 0:
        raise ValueError("c_sigma must be > 0")
    S = np.exp(-(np.asarray(sigma, dtype=np.float64) ** 2) / c_sigma)
    if out_shape is not None:
        S = upsample_bilinear(S, out_shape, grid_scale)
    return S


def combine_mask(S, M_bin, eta_s: float = 1.2, eta_t: float = 3.0):
    S = np.asarray(S, dtype=np.float64)
    M_bin = np.asarray(M_bin, dtype=np.float64)
    if S.shape != M_bin.shape:
        raise ValueError(f"shape mismatch: S {S.shape} vs mask {M_bin.shape}")
    return M_bin * S**eta_s + (1.0 - M_bin) * S**eta_t


@dataclass
class ConsistencyField:
    sigma: np.ndarray
    S: np.ndarray
    M: np.ndarray
