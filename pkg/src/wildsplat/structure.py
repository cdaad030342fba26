"""Conflict-aware densification, conflict EMA with periodic opacity decay, and pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from wildsplat.core import GaussianCloud, GradientBundle, logit, sigmoid

SPLIT_SCALE_DIVISOR = 1.6
CLONE_OFFSET = 0.01  # fraction of the unit scene extent
DEPTH_JITTER = 1e-6
MIN_OPACITY = 1e-6
EPS_NORM = 1e-12


class EmptyCloudError(RuntimeError):
    pass


@dataclass
class StructureEdit:
    """Row bookkeeping for a densify/prune: new row ``i`` came from old row ``source[i]``."""

    source: np.ndarray
    fresh: np.ndarray
    clones: int = 0
    splits: int = 0
    prunes: int = 0
    n_before: int = 0
    n_after: int = 0
    extra: dict = field(default_factory=dict)


def accumulate_densify_stats(cloud: GaussianCloud, renders, bundles, taus) -> None:
    """Fold one iteration's views into ``r_max``, ``grad_accum`` and ``count`` (in place).

    ``taus[i]`` scales view ``i``'s view-space position gradient; pass 1.0
    for unmodulated statistics.
    """
    n = len(cloud)
    for render, bundle, tau in zip(renders, bundles, taus):
        if bundle.n != n or len(render.visible) != n:
            raise ValueError(f"bundle/render size does not match cloud ({n})")
        vis = render.visible
        cloud.densify_r_max[vis] = np.maximum(cloud.densify_r_max[vis], render.projected_radius[vis])
        norms = np.linalg.norm(tau * bundle.view_space_pos, axis=1)
        cloud.densify_grad_accum[vis] += norms[vis]
        cloud.densify_count[vis] += 1


def densify(
    cloud: GaussianCloud,
    grad_threshold: float,
    size_threshold: float,
    rng: np.random.Generator,
    direction: np.ndarray | None = None,
    max_gaussians: int | None = None,
) -> tuple[GaussianCloud, StructureEdit]:
    """Clone small high-gradient Gaussians and split large ones.

    A Gaussian qualifies when its mean accumulated view-space gradient norm
    exceeds ``grad_threshold``. Those with ``r_max <= size_threshold``
    (pixels) are cloned, offset along ``-direction``; the rest are replaced
    by two children sampled from the parent with scales divided by 1.6.
    ``max_gaussians`` caps growth, keeping the highest-gradient candidates.
    All densification statistics are reset afterwards.
    """
    n = len(cloud)
    count = cloud.densify_count
    avg = np.where(count > 0, cloud.densify_grad_accum / np.maximum(count, 1), 0.0)
    selected = np.flatnonzero(avg > grad_threshold)
    if max_gaussians is not None:
        big = cloud.densify_r_max[selected] > size_threshold
        budget = max(0, max_gaussians - n)
        # clones cost one slot, splits one net slot
        if len(selected) > budget:
            rank = np.lexsort((selected, -avg[selected]))
            selected = np.sort(selected[rank[:budget]])
            big = cloud.densify_r_max[selected] > size_threshold
    else:
        big = cloud.densify_r_max[selected] > size_threshold
    clone_idx = selected[~big]
    split_idx = selected[big]

    kept_idx = np.setdiff1d(np.arange(n), split_idx)
    parts = [cloud.take(kept_idx)]
    source = [kept_idx]

    if len(clone_idx):
        clones = cloud.take(clone_idx)
        if direction is not None:
            d = np.asarray(direction, dtype=np.float64)[clone_idx]
            norm = np.linalg.norm(d, axis=1, keepdims=True)
            unit = np.where(norm > EPS_NORM, -d / np.where(norm > EPS_NORM, norm, 1.0), 0.0)
            clones.positions += CLONE_OFFSET * unit
        clones.depths += rng.uniform(-DEPTH_JITTER, DEPTH_JITTER, len(clone_idx))
        parts.append(clones)
        source.append(clone_idx)

    if len(split_idx):
        parent_idx = np.repeat(split_idx, 2)
        children = cloud.take(parent_idx)
        c, s = np.cos(children.rotations), np.sin(children.rotations)
        z = rng.standard_normal((len(parent_idx), 2)) * children.scales
        children.positions += np.stack([c * z[:, 0] - s * z[:, 1], s * z[:, 0] + c * z[:, 1]], axis=1)
        children.log_scales -= math.log(SPLIT_SCALE_DIVISOR)
        children.depths += rng.uniform(-DEPTH_JITTER, DEPTH_JITTER, len(parent_idx))
        parts.append(children)
        source.append(parent_idx)

    out = GaussianCloud.concat(parts)
    out.reset_densify_stats()
    fresh = np.zeros(len(out), dtype=bool)
    fresh[len(kept_idx):] = True
    edit = StructureEdit(
        source=np.concatenate(source),
        fresh=fresh,
        clones=len(clone_idx),
        splits=len(split_idx),
        n_before=n,
        n_after=len(out),
    )
    return out, edit


def _pairwise_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na >= EPS_NORM) & (nb >= EPS_NORM)
    cos = np.where(ok, (a * b).sum(axis=1) / np.where(ok, na * nb, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def instantaneous_conflict(bundle1: GradientBundle, bundle2: GradientBundle) -> np.ndarray:
    """Per-Gaussian ``max over {position, opacity} of max(0, -cos(g1, g2))``."""
    if bundle1.n != bundle2.n:
        raise ValueError(f"bundle size mismatch: {bundle1.n} vs {bundle2.n}")
    p1, p2 = bundle1.per_gaussian, bundle2.per_gaussian
    c_pos = np.maximum(0.0, -_pairwise_cos(p1["position"], p2["position"]))
    c_op = np.maximum(0.0, -_pairwise_cos(p1["opacity"], p2["opacity"]))
    return np.maximum(c_pos, c_op)


def update_conflict_ema_and_decay(
    cloud: GaussianCloud,
    C: np.ndarray,
    gamma: float = 0.99,
    lambda_prune: float = 0.3,
    iteration: int = 0,
    decay_interval: int = 100,
) -> bool:
    """EMA-update ``conflict_ema`` in place; every ``decay_interval`` iterations
    (iteration > 0) scale opacity by ``exp(-λ·H)``. Returns whether decay ran."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    cloud.conflict_ema[:] = gamma * cloud.conflict_ema + (1.0 - gamma) * np.asarray(C, dtype=np.float64)
    np.clip(cloud.conflict_ema, 0.0, 1.0, out=cloud.conflict_ema)
    if iteration <= 0 or iteration % decay_interval != 0:
        return False
    rows = cloud.conflict_ema > 0
    alpha = sigmoid(cloud.opacity_logits[rows]) * np.exp(-lambda_prune * cloud.conflict_ema[rows])
    cloud.opacity_logits[rows] = logit(np.clip(alpha, MIN_OPACITY, 1.0 - MIN_OPACITY))
    return True


def prune(cloud: GaussianCloud, opacity_threshold: float = 0.005) -> tuple[GaussianCloud, StructureEdit]:
    keep = np.flatnonzero(sigmoid(cloud.opacity_logits) >= opacity_threshold)
    if len(keep) == 0:
        raise EmptyCloudError("empty cloud: pruning would remove every Gaussian")
    edit = StructureEdit(
        source=keep,
        fresh=np.zeros(len(keep), dtype=bool),
        prunes=len(cloud) - len(keep),
        n_before=len(cloud),
        n_after=len(keep),
    )
    return cloud.take(keep), edit
