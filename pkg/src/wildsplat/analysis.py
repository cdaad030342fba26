"""Metrics, cross-view conflict statistics, and view-pair coverage math."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wildsplat.core import ATTRIBUTES, GaussianCloud, View
from wildsplat.loss import ssim
from wildsplat.renderer import DEFAULT_SETTINGS, RenderSettings, render_image

PSNR_CAP = 99.0
COVERAGE_TARGETS = (0.5, 0.8, 0.95, 0.99, 0.999)


class LogFormatError(ValueError):
    pass


def psnr(a, b) -> float:
    """``10 log10(1/MSE)`` for images in [0, 1]; zero MSE gives the 99 dB sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_metric(a, b) -> float:
    return ssim(a, b, with_grad=False)[0]


# ---------------------------------------------------------------------------
# Conflict statistics


def read_log(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise LogFormatError(f"{path}:{lineno}: not JSON ({err.msg})") from None
    return records


def conflict_probabilities(records) -> dict[str, float]:
    """Fraction of iterations whose two per-view gradients had negative inner product, per attribute.

    Every logged dual-view iteration counts; single-view records are rejected.
    """
    if isinstance(records, (str, Path)):
        records = read_log(records)
    counts = dict.fromkeys(ATTRIBUTES, 0)
    n = 0
    for i, rec in enumerate(records):
        flags = rec.get("conflicted") if isinstance(rec, dict) else None
        if not isinstance(flags, dict) or any(a not in flags for a in ATTRIBUTES):
            raise LogFormatError(f"record {i}: missing per-attribute conflict flags")
        if len(rec.get("views", ())) != 2:
            raise LogFormatError(f"record {i}: not a dual-view iteration")
        n += 1
        for a in ATTRIBUTES:
            counts[a] += bool(flags[a])
    if n == 0:
        raise LogFormatError("log has no iterations")
    return {a: counts[a] / n for a in ATTRIBUTES}


@dataclass
class ConflictReport:
    runs: dict[str, dict[str, float]] = field(default_factory=dict)

    def table(self) -> str:
        labels = list(self.runs)
        head = f"{'attribute':<10}" + "".join(f"{lab:>16}" for lab in labels)
        rows = [head, "-" * len(head)]
        for a in ATTRIBUTES:
            rows.append(f"{a:<10}" + "".join(f"{self.runs[lab][a]:>16.4f}" for lab in labels))
        return "\n".join(rows)

    def write_csv(self, path) -> None:
        """Columns: run, attribute, conflict_probability."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "attribute", "conflict_probability"])
            for lab, probs in self.runs.items():
                for a in ATTRIBUTES:
                    w.writerow([lab, a, repr(probs[a])])


def conflict_statistics(runs: dict) -> ConflictReport:
    """``runs`` maps a label (e.g. ``masked``/``unmasked``) to a log path or record list."""
    return ConflictReport({label: conflict_probabilities(src) for label, src in runs.items()})


# ---------------------------------------------------------------------------
# Pair coverage


def num_pairs(num_views: int) -> int:
    return num_views * (num_views - 1) // 2


def pair_coverage(M: int, T: int) -> tuple[float, float]:
    """Probability a fixed unordered pair is drawn at least once in ``T`` uniform draws
    among ``M`` pairs: exact ``1-(1-1/M)^T`` and the approximation ``1-exp(-T/M)``."""
    if M < 1 or T < 0:
        raise ValueError("need M >= 1 and T >= 0")
    exact = -math.expm1(T * math.log1p(-1.0 / M)) if M > 1 else (1.0 if T >= 1 else 0.0)
    return exact, -math.expm1(-T / M)


def coverage_iterations(M: int, q: float) -> tuple[int, float]:
    """Smallest ``T`` with coverage ≥ ``q``, plus the approximation ``M ln(1/(1-q))``."""
    if not 0.0 < q < 1.0:
        raise ValueError("target q must lie in (0, 1)")
    if M < 1:
        raise ValueError("need M >= 1")
    approx = M * -math.log1p(-q)
    if M == 1:
        return 1, approx
    T = max(1, math.ceil(math.log1p(-q) / math.log1p(-1.0 / M)))
    # guard the ceiling against rounding in the log ratio
    while T > 1 and pair_coverage(M, T - 1)[0] >= q:
        T -= 1
    while pair_coverage(M, T)[0] < q:
        T += 1
    return T, approx


def rule_coefficient(q: float, digits: int = 2) -> float:
    """``ln(1/(1-q))`` rounded to ``digits`` significant figures (3.0 for q = 0.95)."""
    c = -math.log1p(-q)
    return float(f"{c:.{digits}g}")


def rule_iterations(M: int, q: float) -> int:
    """Rule-of-thumb iteration count ``round(coef·M)`` with the rounded coefficient (570 for M=190, q=0.95)."""
    return round(rule_coefficient(q) * M)


def coverage_table(num_views: int, targets=COVERAGE_TARGETS) -> list[dict]:
    M = num_pairs(num_views)
    out = []
    for q in targets:
        T, approx = coverage_iterations(M, q)
        out.append({"q": q, "M": M, "exact_T": T, "approx_T": approx, "coefficient": -math.log1p(-q),
                    "rule_coefficient": rule_coefficient(q), "rule_T": rule_iterations(M, q)})
    return out


def monte_carlo_coverage(num_views: int, T: int, trials: int, seed: int = 0, chunk: int = 2000) -> float:
    """Empirical probability that pair 0 appears among ``T`` uniformly drawn pairs."""
    M = num_pairs(num_views)
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        draws = rng.integers(0, M, size=(b, T))
        hits += int(np.any(draws == 0, axis=1).sum())
        done += b
    return hits / trials


# ---------------------------------------------------------------------------
# Evaluation


class EvaluationError(ValueError):
    pass


def evaluate(cloud: GaussianCloud, heldout: list[View], tag: str = "", settings: RenderSettings = DEFAULT_SETTINGS) -> dict:
    """Render every held-out view and score it against its clean reference.

    The ``lpips`` column is reserved (always null) for externally computed values.
    """
    if not heldout:
        raise EvaluationError("dataset has no held-out views")
    rows = []
    for v in heldout:
        img = render_image(cloud, v, settings)
        rows.append({"view": int(v.view_id), "psnr": psnr(img, v.gt_image), "ssim": ssim_metric(img, v.gt_image),
                     "lpips": None})
    return {
        "tag": tag,
        "n_gaussians": len(cloud),
        "views": rows,
        "mean": {
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "lpips": None,
        },
    }


def format_report(report: dict) -> str:
    lines = [f"tag: {report['tag'] or '-'}   gaussians: {report['n_gaussians']}",
             f"{'view':>6}{'psnr':>10}{'ssim':>10}{'lpips':>8}"]
    for r in report["views"]:
        lines.append(f"{r['view']:>6}{r['psnr']:>10.3f}{r['ssim']:>10.4f}{'-':>8}")
    m = report["mean"]
    lines.append(f"{'mean':>6}{m['psnr']:>10.3f}{m['ssim']:>10.4f}{'-':>8}")
    return "\n".join(lines)


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
