"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (one JSON line on stderr with
``error`` and ``message`` keys), 2 usage error.

Run directory written by ``train``::

    config.ini        effective configuration
    log.jsonl         one record per iteration
    checkpoints/      iter_XXXXXX.ckpt and final.ckpt
    renders/          held-out renders (PNG)
    report.json       written by ``eval``
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from wildsplat import analysis
from wildsplat.core import TrainConfig, View, load_checkpoint, load_config, save_config
from wildsplat.renderer import RenderSettings, render_image
from wildsplat.synth import OCCLUSION_LEVELS, ILLUMINATION_LEVELS, make_dataset, read_dataset, write_dataset
from wildsplat.trainer import Trainer, train

ABLATIONS = {
    "no_mask": ("--no-mask", {"mask_mode": "none"}),
    "bin_mask_only": ("--bin-mask-only", {"mask_mode": "bin"}),
    "score_mask_only": ("--score-mask-only", {"mask_mode": "score"}),
    "no_harmonize": ("--no-harmonize", {"harmonize": False}),
    "no_conflict_structure": ("--no-conflict-structure", {"conflict_structure": False}),
    "single_view": ("--single-view", {"dual_view": False}),
}
# set through the global flags instead
_GLOBAL_FIELDS = {"seed", "deterministic"}


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="random seed")
    p.add_argument("--config", default=d, help="config file ([train] section, key = value)")
    p.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="sequential execution, bitwise reproducible")


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        if f.name in _GLOBAL_FIELDS:
            continue
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.type.upper() if isinstance(f.type, str) else "V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wildsplat", description="2D Gaussian splatting with dual-view harmonization")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_globals(s, suppress=True)
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--heldout", type=int, default=4)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--occlusion", choices=list(OCCLUSION_LEVELS), default="high")
    s.add_argument("--illumination", choices=list(ILLUMINATION_LEVELS), default="strong")
    s.add_argument("--no-float-sidecars", action="store_true")

    t = sub.add_parser("train", help="train on a dataset directory")
    _add_globals(t, suppress=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--iters", type=int, default=None, help="alias for --total-iters")
    for dest, (flag, _) in ABLATIONS.items():
        t.add_argument(flag, dest=dest, action="store_true")
    _config_flags(t)

    r = sub.add_parser("render", help="render a checkpoint at a dataset view")
    _add_globals(r, suppress=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--view", type=int, required=True, help="view id (training or held-out)")
    r.add_argument("--out", required=True, help="output PNG")

    e = sub.add_parser("eval", help="score a checkpoint on held-out views")
    _add_globals(e, suppress=True)
    e.add_argument("--checkpoint", help="defaults to RUN/checkpoints/final.ckpt")
    e.add_argument("--run", help="run directory; the report is written there")
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="report path (default RUN/report.json)")
    e.add_argument("--dump-masks", action="store_true",
                   help="also write σ / S / M per training view to masks/ next to the report")

    a = sub.add_parser("analyze", help="conflict statistics and coverage math")
    _add_globals(a, suppress=True)
    asub = a.add_subparsers(dest="analysis", required=True)
    c = asub.add_parser("conflicts", help="per-attribute conflict probability from training logs")
    c.add_argument("logs", nargs="+", help="LABEL=PATH or PATH (label = parent directory name)")
    c.add_argument("--csv", help="write plot data (run, attribute, conflict_probability)")
    v = asub.add_parser("coverage", help="view-pair coverage thresholds")
    v.add_argument("--views", type=int, required=True)
    v.add_argument("--target", type=float, action="append", help="coverage target q (repeatable)")
    return parser


def effective_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        val = getattr(args, f"cfg_{f.name}", None)
        if val is not None:
            overrides[f.name] = val
    if getattr(args, "iters", None) is not None:
        overrides["total_iters"] = args.iters
    for dest, (_, values) in ABLATIONS.items():
        if getattr(args, dest, False):
            overrides.update(values)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    cfg = cfg.update(overrides)
    errs = cfg.validate()
    if errs:
        raise ValueError("invalid config: " + "; ".join(errs))
    return cfg


def _save_png(path, image) -> None:
    Image.fromarray(np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)).save(path, format="PNG")


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    ds = make_dataset(seed, args.views, args.occlusion, args.illumination, args.resolution, args.heldout)
    write_dataset(ds, args.out, float_sidecars=not args.no_float_sidecars)
    print(f"wrote {len(ds.views)} views + {len(ds.heldout)} held-out to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = effective_config(args)
    ds = read_dataset(args.data)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.ini")
    heldout = ds.heldout_views()
    trainer = train(ds.training_views(), cfg, run, heldout=heldout)
    for v in heldout:
        _save_png(run / "renders" / f"{v.view_id:03d}.png", np.load(run / "renders" / f"{v.view_id:03d}.npy"))
    print(f"trained {trainer.iteration} iterations [{cfg.ablation_tag}], {len(trainer.cloud)} gaussians -> {run}")
    return 0


def _find_view(ds, view_id: int) -> View:
    for v in ds.training_views() + ds.heldout_views():
        if v.view_id == view_id:
            return v
    raise KeyError(f"view {view_id} not in dataset")


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = TrainConfig().update(ckpt.config) if ckpt.config else TrainConfig()
    view = _find_view(read_dataset(args.data), args.view)
    img = render_image(ckpt.cloud, view, RenderSettings(cutoff_sigma=cfg.cutoff_sigma, w_max=cfg.w_max))
    _save_png(args.out, img)
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint and not args.run:
        raise ValueError("eval needs --checkpoint or --run")
    ckpt_path = Path(args.checkpoint) if args.checkpoint else Path(args.run) / "checkpoints" / "final.ckpt"
    ckpt = load_checkpoint(ckpt_path)
    cfg = TrainConfig().update(ckpt.config) if ckpt.config else TrainConfig()
    ds = read_dataset(args.data)
    report = analysis.evaluate(ckpt.cloud, ds.heldout_views(), cfg.ablation_tag,
                               RenderSettings(cutoff_sigma=cfg.cutoff_sigma, w_max=cfg.w_max))
    report["checkpoint"] = str(ckpt_path)
    report["iteration"] = ckpt.iteration
    out = args.out or (Path(args.run) / "report.json" if args.run else None)
    if out:
        analysis.write_report(report, out)
    if args.dump_masks:
        dump_masks(ckpt, ds, (Path(out).parent if out else Path(".")) / "masks")
    print(analysis.format_report(report))
    return 0


def dump_masks(ckpt, ds, directory: Path) -> None:
    """Consistency fields of every training view as the checkpoint's predictor sees them.

    Writes ``NNN_sigma.npy`` (feature grid), ``NNN_S.npy`` and ``NNN_M.npy``
    (image resolution) and an 8-bit ``NNN_M.png``.
    """
    directory.mkdir(parents=True, exist_ok=True)
    views = ds.training_views()
    cfg = TrainConfig().update(ckpt.config) if ckpt.config else TrainConfig()
    trainer = Trainer.from_checkpoint(ckpt, views, cfg)
    for v in views:
        field_, _ = trainer.consistency(v, ckpt.iteration)
        name = f"{v.view_id:03d}"
        for key in ("sigma", "S", "M"):
            arr = getattr(field_, key)
            if arr is not None:
                np.save(directory / f"{name}_{key}.npy", arr)
        _save_png(directory / f"{name}_M.png", field_.M)


def cmd_analyze(args) -> int:
    if args.analysis == "coverage":
        M = analysis.num_pairs(args.views)
        if M < 1:
            raise ValueError("need at least 2 views")
        targets = args.target or list(analysis.COVERAGE_TARGETS)
        for q in targets:
            T, approx = analysis.coverage_iterations(M, q)
            print(f"views={args.views} M={M} q={q} exact_T={T} approx_T={analysis.rule_iterations(M, q)} "
                  f"({analysis.rule_coefficient(q):g}M) continuous_T={approx:.2f} coef={-np.log1p(-q):.4f}")
        return 0
    runs = {}
    for item in args.logs:
        label, sep, path = item.partition("=")
        if not sep:
            path = label
            label = Path(path).parent.name or path
        runs[label] = path
    report = analysis.conflict_statistics(runs)
    print(report.table())
    if args.csv:
        report.write_csv(args.csv)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "analyze": cmd_analyze}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - reported as one parsable line
        msg = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
