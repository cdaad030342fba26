"""Dual-view gradient harmonization.

Two conflicting gradients (negative inner product) are rotated toward each
other inside ``span(g1, g2)`` until orthogonal, keeping their norms. The
total correction ``θ - π/2`` is split as ``β = ρ(θ - π/2)`` for ``g1`` and
the remainder for ``g2``. The summed result is re-expressed as
``τ1·g1 + τ2·g2``, which is what the trainer applies per attribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from wildsplat.core import ATTRIBUTES, GEOMETRIC_ATTRIBUTES, GradientBundle

EPS_NORM = 1e-12
EPS_THETA = 1e-6


@dataclass(frozen=True)
class HarmonizationResult:
    tau1: float = 1.0
    tau2: float = 1.0
    theta: float = 0.0
    beta: float = 0.0
    cos_theta: float = 0.0
    conflicted: bool = False
    degenerate: bool = False
    lambda_geo: float = 1.0


def detect_conflict(g1, g2) -> tuple[float, bool]:
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    if g1.shape != g2.shape:
        raise ValueError(f"gradient length mismatch: {g1.size} vs {g2.size}")
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 < EPS_NORM or n2 < EPS_NORM:
        return 0.0, False
    dot = float(g1 @ g2)
    return float(np.clip(dot / (n1 * n2), -1.0, 1.0)), dot < 0.0


def _unit_orthogonal(u1: np.ndarray, v: np.ndarray) -> np.ndarray:
    # Gram-Schmidt with one re-orthogonalization pass
    r = v - (v @ u1) * u1
    r -= (r @ u1) * u1
    return r / np.linalg.norm(r)


def _probe_direction(u1: np.ndarray) -> np.ndarray:
    """Unit vector ⟂ u1 from the standard basis vector least aligned with u1."""
    probe = np.zeros_like(u1)
    probe[int(np.argmin(np.abs(u1)))] = 1.0
    return _unit_orthogonal(u1, probe)


def _plane(g1, g2):
    """Orthonormal basis of span(g1, g2) with ``u1 ∥ g1``, plus the angle between them."""
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    u1 = g1 / n1
    cos_t = float(np.clip((g1 @ g2) / (n1 * n2), -1.0, 1.0))
    resid = g2 - (g2 @ u1) * u1
    sin_t = float(np.linalg.norm(resid) / n2)
    degenerate = sin_t < EPS_THETA
    u2 = _probe_direction(u1) if degenerate else _unit_orthogonal(u1, g2)
    theta = math.pi if degenerate and cos_t < 0 else math.atan2(sin_t, cos_t)
    return u1, u2, n1, n2, theta, cos_t, degenerate


def tau_coefficients(norm1: float, norm2: float, theta: float, beta: float) -> tuple[float, float]:
    """Coefficients with ``τ1 g1 + τ2 g2 = g̃1 + g̃2``; needs ``sin θ ≥ EPS_THETA``."""
    s = math.sin(theta)
    if s < EPS_THETA or norm1 <= 0 or norm2 <= 0:
        raise ValueError("tau coefficients undefined for collinear or zero gradients")
    tau1 = math.sin(theta - beta) / s - norm2 * math.cos(theta - beta) / (norm1 * s)
    tau2 = norm1 * math.sin(beta) / (norm2 * s) + math.cos(beta) / s
    return tau1, tau2


def geometric_attenuation(cos_theta: float, k: float) -> float:
    return math.exp(-k * max(0.0, -cos_theta))


def harmonize_pair(g1, g2, rho: float = 0.5):
    """Rotate conflicting ``g1, g2`` into an orthogonal pair.

    Returns ``(g̃1, g̃2, HarmonizationResult)``. Non-conflicting (or zero)
    inputs are returned unchanged with ``τ1 = τ2 = 1``.

    Exactly antiparallel inputs leave ``u2`` undefined; it is then taken
    from a deterministic standard-basis probe and the recorded τ become the
    cosines between each rotated gradient and its original.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    cos_t, conflicted = detect_conflict(g1, g2)
    if not conflicted:
        return g1.copy(), g2.copy(), HarmonizationResult(cos_theta=cos_t, theta=math.acos(cos_t))
    shape = g1.shape
    u1, u2, n1, n2, theta, cos_t, degenerate = _plane(g1.ravel(), g2.ravel())
    beta = rho * (theta - math.pi / 2)
    cb, sb = math.cos(beta), math.sin(beta)
    h1 = n1 * (cb * u1 + sb * u2)
    h2 = n2 * (-sb * u1 + cb * u2)
    if degenerate:
        tau1, tau2 = cb, math.cos((1.0 - rho) * (theta - math.pi / 2))
    else:
        tau1, tau2 = tau_coefficients(n1, n2, theta, beta)
    result = HarmonizationResult(tau1, tau2, theta, beta, cos_t, True, degenerate)
    return h1.reshape(shape), h2.reshape(shape), result


def combine_pair(g1, g2, rho: float = 0.5, k: float = 0.0, geometric: bool = False, enabled: bool = True):
    """Summed update for one attribute: ``λ_geo (τ1 g1 + τ2 g2)``."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    cos_t, conflicted = detect_conflict(g1, g2)
    if not (enabled and conflicted):
        return g1 + g2, HarmonizationResult(cos_theta=cos_t, theta=math.acos(cos_t), conflicted=conflicted)
    h1, h2, res = harmonize_pair(g1, g2, rho)
    combined = h1 + h2 if res.degenerate else res.tau1 * g1 + res.tau2 * g2
    lam = geometric_attenuation(cos_t, k) if geometric else 1.0
    if lam != 1.0:
        combined = lam * combined
    return combined, HarmonizationResult(
        res.tau1, res.tau2, res.theta, res.beta, res.cos_theta, True, res.degenerate, lam
    )


def harmonize_bundles(bundle1: GradientBundle, bundle2: GradientBundle, rho: float = 0.5, k: float = 0.5,
                      enabled: bool = True):
    """Harmonize every attribute independently over its flattened all-Gaussian vector.

    With ``enabled=False`` the gradients are simply summed (conflict flags
    are still reported).
    """
    if bundle1.n != bundle2.n:
        raise ValueError(f"bundle size mismatch: {bundle1.n} vs {bundle2.n}")
    combined, results = {}, {}
    for attr in ATTRIBUTES:
        a1, a2 = bundle1.per_attribute[attr], bundle2.per_attribute[attr]
        if a1.shape != a2.shape:
            raise ValueError(f"{attr}: shape mismatch {a1.shape} vs {a2.shape}")
        g, res = combine_pair(a1.ravel(), a2.ravel(), rho, k, attr in GEOMETRIC_ATTRIBUTES, enabled)
        combined[attr] = g.reshape(a1.shape)
        results[attr] = res
    return combined, results
