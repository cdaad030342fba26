"""Dual-view training loop.

Per iteration: render both views, build masks, masked losses, two backward
passes, conflict EMA, harmonize, one Adam step on the combined gradient,
predictor update, densification statistics, then the scheduled
densify / opacity-decay / prune.

Harmonization acts on raw loss gradients; Adam moments accumulate the
harmonized result.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from wildsplat.core import (
    ATTRIBUTES,
    Checkpoint,
    GaussianCloud,
    GradientBundle,
    TrainConfig,
    View,
    logit,
    save_checkpoint,
)
from wildsplat.harmonizer import HarmonizationResult, harmonize_bundles
from wildsplat.masking import (
    ConsistencyField,
    Predictor,
    combine_mask,
    consistency_score,
    extract_features,
    predict_sigma,
    predictor_loss,
    residual_target,
    sigma_backward,
)
from wildsplat.optim import Adam
from wildsplat.renderer import RenderSettings, rasterize_backward, rasterize_forward, render_image
from wildsplat.loss import reconstruction_loss
from wildsplat.structure import (
    accumulate_densify_stats,
    densify,
    instantaneous_conflict,
    prune,
    update_conflict_ema_and_decay,
)


class TrainingDivergedError(RuntimeError):
    pass


def sample_view_pair(rng: np.random.Generator, num_views: int) -> tuple[int, int]:
    """Uniform unordered pair ``i < j``."""
    if num_views < 2:
        raise ValueError("need at least 2 views to sample a pair")
    i, j = rng.choice(num_views, size=2, replace=False)
    return (int(i), int(j)) if i < j else (int(j), int(i))


def view_footprint_bounds(views: list[View]) -> tuple[np.ndarray, np.ndarray]:
    """World-space bounding box of every view's image rectangle."""
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pts = np.concatenate([(corners - v.t) @ np.linalg.inv(v.A).T for v in views])
    return pts.min(axis=0), pts.max(axis=0)


def initialize_cloud(views: list[View], config: TrainConfig, rng: np.random.Generator) -> GaussianCloud:
    """Stratified-jittered positions over the views' joint footprint; colors from view 0."""
    k = config.init_gaussians
    lo, hi = view_footprint_bounds(views)
    g = math.ceil(math.sqrt(k))
    cells = np.stack(np.meshgrid(np.arange(g), np.arange(g), indexing="ij"), -1).reshape(-1, 2)
    cells = cells[np.sort(rng.permutation(len(cells))[:k])]
    unit = (cells + rng.uniform(0.0, 1.0, cells.shape)) / g
    positions = lo + unit * (hi - lo)

    first = views[0]
    h, w = first.shape
    pix = (positions @ first.A.T + first.t) * [w, h]
    cols = np.clip(np.floor(pix[:, 0]).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor(pix[:, 1]).astype(np.int64), 0, h - 1)
    colors = first.gt_image[rows, cols].astype(np.float64)

    return GaussianCloud(
        positions=positions,
        log_scales=np.full((k, 2), math.log(config.init_scale)),
        rotations=np.zeros(k),
        opacity_logits=np.full(k, logit(config.init_opacity)),
        colors=colors,
        depths=rng.uniform(0.0, 1.0, k),
    )


def _lrs(config: TrainConfig) -> dict[str, float]:
    return {
        "position": config.lr_position,
        "scale": config.lr_scale,
        "rotation": config.lr_rotation,
        "opacity": config.lr_opacity,
        "color": config.lr_color,
    }


@dataclass
class StepReport:
    iteration: int
    views: tuple
    losses: list
    l_inc: float | None
    cos: dict
    conflicted: dict
    tau1: dict
    tau2: dict
    lambda_geo: dict
    n_gaussians: int
    mask_mean: list
    conflict_mean: float
    events: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "iteration": self.iteration,
            "views": list(self.views),
            "losses": self.losses,
            "l_inc": self.l_inc,
            "cos": self.cos,
            "conflicted": self.conflicted,
            "tau1": self.tau1,
            "tau2": self.tau2,
            "lambda_geo": self.lambda_geo,
            "n": self.n_gaussians,
            "mask_mean": self.mask_mean,
            "conflict_mean": self.conflict_mean,
            "events": self.events,
        }


class Trainer:
    """Holds the optimizable state; ``step`` runs one iteration.

    ``gradient_hooks`` are called with the combined per-attribute gradient
    dict immediately before the optimizer consumes it.
    """

    def __init__(self, views: list[View], config: TrainConfig | None = None, cloud: GaussianCloud | None = None):
        config = config or TrainConfig()
        errs = config.validate()
        if errs:
            raise ValueError("invalid config: " + "; ".join(errs))
        if len(views) < 2:
            raise ValueError("dataset must contain at least 2 views")
        self.views = views
        self.config = config
        self.settings = RenderSettings(cutoff_sigma=config.cutoff_sigma, w_max=config.w_max)
        self.rng = np.random.default_rng(config.seed)
        self.cloud = cloud.copy() if cloud is not None else initialize_cloud(views, config, self.rng)
        self.optimizer = Adam(_lrs(config), config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.predictor = Predictor(seed=config.seed, lr=config.lr_predictor)
        self.iteration = 0
        self.gradient_hooks: list[Callable[[dict], None]] = []
        self._features = {}

    # -- helpers ----------------------------------------------------------

    def _gt_features(self, view: View):
        key = view.view_id
        if key not in self._features:
            self._features[key] = extract_features(view.gt_image)
        return self._features[key]

    @property
    def uses_predictor(self) -> bool:
        return self.config.mask_mode in ("full", "score")

    def consistency(self, view: View, iteration: int | None = None):
        """Mask for ``view`` at ``iteration`` (defaults to the next one) plus σ and its cache."""
        cfg = self.config
        it = self.iteration if iteration is None else iteration
        h, w = view.shape
        warm = it < cfg.warmup_iters
        ones = np.ones((h, w))
        prior = view.prior_mask if view.prior_mask is not None else ones
        sigma = cache = S = None
        if self.uses_predictor:
            sigma, cache = predict_sigma(self.predictor, self._gt_features(view), cfg.delta0, return_cache=True)
            S = consistency_score(sigma, cfg.c_sigma, (h, w))
        mode = cfg.mask_mode
        if mode == "none":
            M = ones
        elif mode == "bin":
            M = prior
        elif mode == "full":
            M = prior if warm else combine_mask(S, prior, cfg.eta_s, cfg.eta_t)
        else:  # score
            M = ones if warm else combine_mask(S, ones, cfg.eta_s, cfg.eta_t)
        return ConsistencyField(sigma, S, M), cache

    def _view_pass(self, view: View):
        cfg = self.config
        render = rasterize_forward(self.cloud, view, self.settings)
        field_, cache = self.consistency(view)
        loss, d_img, _ = reconstruction_loss(render.image, view.gt_image, field_.M, cfg.lambda_rec, cfg.dssim_halved)
        bundle = rasterize_backward(self.cloud, view, d_img, render, self.settings)
        pred_grads, l_inc = None, None
        if self.uses_predictor:
            E = residual_target(render.image, view.gt_image, extract_features(render.image), self._gt_features(view),
                                cfg.s_sem)
            l_inc, d_sigma = predictor_loss(field_.sigma, E, cfg.lambda_inc, cfg.eps_inc)
            pred_grads = sigma_backward(self.predictor, cache, d_sigma)
        return render, field_, loss, bundle, pred_grads, l_inc

    def _diagnose(self, views, losses):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {self.iteration + 1}: views={list(views)} losses={losses}"
        )

    # -- one iteration ----------------------------------------------------

    def step(self, pair: tuple[int, ...] | None = None) -> StepReport:
        cfg = self.config
        if pair is None:
            if cfg.dual_view:
                pair = sample_view_pair(self.rng, len(self.views))
            else:
                pair = (int(self.rng.integers(len(self.views))),)
        passes = [self._view_pass(self.views[i]) for i in pair]
        losses = [p[2] for p in passes]
        if not all(math.isfinite(x) for x in losses):
            self._diagnose(pair, losses)
        it = self.iteration + 1
        renders = [p[0] for p in passes]
        bundles = [p[3] for p in passes]

        if len(bundles) == 2:
            combined, results = harmonize_bundles(bundles[0], bundles[1], cfg.rho, cfg.k_geo, cfg.harmonize)
            C = instantaneous_conflict(bundles[0], bundles[1])
        else:
            combined = {a: bundles[0].per_attribute[a].copy() for a in ATTRIBUTES}
            results = {a: HarmonizationResult() for a in ATTRIBUTES}
            C = None

        for hook in self.gradient_hooks:
            hook(combined)
        params = {a: self.cloud.param(a) for a in ATTRIBUTES}
        self.optimizer.step(params, combined)
        np.clip(self.cloud.colors, 0.0, 1.0, out=self.cloud.colors)

        l_inc = None
        if self.uses_predictor:
            grads = [p[4] for p in passes]
            total = {k: sum(g[k] for g in grads) for k in grads[0]}
            self.predictor.step(total)
            l_inc = float(sum(p[5] for p in passes))

        if cfg.conflict_structure and len(bundles) == 2:
            pos = results["position"]
            taus = (pos.tau1, pos.tau2) if pos.conflicted else (1.0, 1.0)
        else:
            taus = (1.0,) * len(bundles)
        accumulate_densify_stats(self.cloud, renders, bundles, taus)

        events = {}
        # decay and pruning share the densification window; the EMA runs throughout
        structural = it <= cfg.densify_stop
        if cfg.conflict_structure and C is not None:
            decay_at = it if structural else 0
            if update_conflict_ema_and_decay(self.cloud, C, cfg.gamma, cfg.lambda_prune, decay_at, cfg.decay_interval):
                events["decay"] = True
        if cfg.densify_start <= it <= cfg.densify_stop and it % cfg.densify_interval == 0:
            grad_dir = combined["position"]
            self.cloud, edit = densify(
                self.cloud,
                cfg.densify_grad_threshold,
                cfg.densify_size_fraction * max(self.views[0].shape),
                self.rng,
                direction=grad_dir,
                max_gaussians=cfg.max_gaussians,
            )
            self.optimizer.remap_rows(edit.source, edit.fresh)
            events["clones"], events["splits"] = edit.clones, edit.splits
        if structural and it % cfg.densify_interval == 0:
            self.cloud, edit = prune(self.cloud, cfg.prune_opacity)
            self.optimizer.remap_rows(edit.source, edit.fresh)
            self.cloud.reset_densify_stats()
            events["prunes"] = edit.prunes

        self.iteration = it
        report = StepReport(
            iteration=it,
            views=tuple(pair),
            losses=[float(x) for x in losses],
            l_inc=l_inc,
            cos={a: r.cos_theta for a, r in results.items()},
            conflicted={a: bool(r.conflicted) for a, r in results.items()},
            tau1={a: r.tau1 for a, r in results.items()},
            tau2={a: r.tau2 for a, r in results.items()},
            lambda_geo={a: r.lambda_geo for a, r in results.items()},
            n_gaussians=len(self.cloud),
            mask_mean=[float(p[1].M.mean()) for p in passes],
            conflict_mean=float(C.mean()) if C is not None else 0.0,
            events=events,
        )
        return report

    # -- persistence ------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        opt = self.optimizer.state_dict("gauss/")
        opt.update(self.predictor.optimizer.state_dict("pred/"))
        state = self.rng.bit_generator.state
        return Checkpoint(
            iteration=self.iteration,
            cloud=self.cloud.copy(),
            predictor_weights=self.predictor.get_flat(),
            optimizer_state={k: np.array(v, copy=True) for k, v in opt.items()},
            rng_state={"seed": self.config.seed, "bit_generator": state},
            config=self.config.to_dict(),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, views: list[View], config: TrainConfig | None = None) -> "Trainer":
        config = config or TrainConfig().update(ckpt.config)
        tr = cls(views, config, cloud=ckpt.cloud)
        tr.iteration = ckpt.iteration
        if ckpt.predictor_weights is not None and len(ckpt.predictor_weights):
            tr.predictor.set_flat(ckpt.predictor_weights)
        if ckpt.optimizer_state:
            tr.optimizer.load_state_dict(ckpt.optimizer_state, "gauss/")
            if "pred/step" in ckpt.optimizer_state:
                tr.predictor.optimizer.load_state_dict(ckpt.optimizer_state, "pred/")
        if ckpt.rng_state and "bit_generator" in ckpt.rng_state:
            tr.rng.bit_generator.state = ckpt.rng_state["bit_generator"]
        return tr


def _dump_diagnostics(trainer: Trainer, run_dir: Path, err: Exception) -> None:
    diag = run_dir / "diagnostics"
    diag.mkdir(parents=True, exist_ok=True)
    save_checkpoint(diag / "state.ckpt", trainer.checkpoint())
    (diag / "error.txt").write_text(str(err) + "\n")


def train(
    views: list[View],
    config: TrainConfig,
    run_dir=None,
    heldout: list[View] | None = None,
    progress: Callable[[StepReport], None] | None = None,
) -> Trainer:
    """Run ``config.total_iters`` iterations.

    With ``run_dir`` set, writes ``log.jsonl`` (one record per iteration),
    ``checkpoints/`` (every ``checkpoint_every`` iterations plus ``final.ckpt``)
    and ``renders/`` (held-out views as .npy).
    """
    trainer = Trainer(views, config)
    root = Path(run_dir) if run_dir is not None else None
    log = None
    if root is not None:
        (root / "checkpoints").mkdir(parents=True, exist_ok=True)
        log = open(root / "log.jsonl", "w")
    try:
        for _ in range(config.total_iters):
            try:
                report = trainer.step()
            except TrainingDivergedError as err:
                if root is not None:
                    _dump_diagnostics(trainer, root, err)
                raise
            if log is not None:
                log.write(json.dumps(report.to_record(), sort_keys=True) + "\n")
            if progress is not None:
                progress(report)
            if root is not None and config.checkpoint_every and trainer.iteration % config.checkpoint_every == 0:
                save_checkpoint(root / "checkpoints" / f"iter_{trainer.iteration:06d}.ckpt", trainer.checkpoint())
    finally:
        if log is not None:
            log.close()
    if root is not None:
        save_checkpoint(root / "checkpoints" / "final.ckpt", trainer.checkpoint())
        if heldout:
            (root / "renders").mkdir(exist_ok=True)
            for v in heldout:
                np.save(root / "renders" / f"{v.view_id:03d}.npy", render_image(trainer.cloud, v, trainer.settings))
    return trainer


# ---------------------------------------------------------------------------
# Self-test: delayed conflict on a quadratic two-objective toy.


@dataclass
class TaylorProbe:
    eta: float
    actual: float  # L_j(θ - η g_i) - L_j(θ)
    predicted: float  # -η g_jᵀ g_i
    curvature: float  # ½ η² g_iᵀ H_j g_i (exact remainder for a quadratic)

    @property
    def residual(self) -> float:
        return self.actual - self.predicted


def quadratic_toy(dim: int = 6, seed: int = 0):
    """Two convex quadratics ``L_k(θ) = ½ (θ-a_k)ᵀ H_k (θ-a_k)`` with conflicting gradients at θ=0."""
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(2):
        B = rng.standard_normal((dim, dim))
        mats.append(B @ B.T / dim + np.eye(dim))
    a1 = rng.standard_normal(dim)
    a2 = -a1 + 0.3 * rng.standard_normal(dim)  # roughly opposite minima
    theta = np.zeros(dim)

    def loss(k, x):
        a, H = (a1, mats[0]) if k == 0 else (a2, mats[1])
        d = x - a
        return 0.5 * d @ H @ d

    def grad(k, x):
        a, H = (a1, mats[0]) if k == 0 else (a2, mats[1])
        return H @ (x - a)

    return theta, loss, grad, mats


def taylor_self_test(etas=(1e-2, 5e-3), dim: int = 6, seed: int = 0) -> list[TaylorProbe]:
    """Step along ``-η g_1`` and measure the change of ``L_2`` against its first-order prediction."""
    theta, loss, grad, mats = quadratic_toy(dim, seed)
    g1, g2 = grad(0, theta), grad(1, theta)
    out = []
    for eta in etas:
        actual = loss(1, theta - eta * g1) - loss(1, theta)
        out.append(TaylorProbe(eta, float(actual), float(-eta * g2 @ g1), float(0.5 * eta**2 * g1 @ mats[1] @ g1)))
    return out
