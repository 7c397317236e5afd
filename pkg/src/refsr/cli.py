"""Operator entry points: one binary, one seeded generator per run.

Subcommands: toy-data, prepare-data, train, eval, robustness, param-count.
Every run writes its fully resolved configuration beside its outputs, exits
nonzero on hard failure and never leaves a checkpoint without a ``.partial``
suffix while it is being written.
"""

from __future__ import annotations

import glob
import math
import os
import sys

import click
import numpy as np

from . import dataset as ds
from . import robustness as rb
from .checkpoint import build_model_from_checkpoint, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .metrics import y_metrics
from .model import RefSRModel, count_parameters
from .numerics import no_grad
from .training import train_loop


@click.group()
def main():
    """Reference-based super-resolution engine."""


def _fail(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@main.command("toy-data")
@click.argument("out_dir", type=click.Path())
@click.option("--count", default=8, show_default=True)
@click.option("--size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_toy_data(out_dir, count, size, seed):
    """Generate synthetic textured HR images for desk-scale runs."""
    paths = ds.make_toy_images(out_dir, count=count, extent=size, seed=seed)
    click.echo(f"wrote {len(paths)} images to {out_dir}")


@main.command("prepare-data")
@click.argument("hr_dir", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--ref-mode", type=click.Choice(["self", "cycle"]), default="self", show_default=True)
@click.option("--hr-size", default=None, type=int, help="Resize HR images to this extent first.")
def cmd_prepare_data(hr_dir, out_dir, seed, ref_mode, hr_size):
    """Degrade HR images x4 by bicubic resampling and write pairs + manifest."""
    hr_paths = sorted(glob.glob(os.path.join(hr_dir, "*.png")))
    if not hr_paths:
        _fail(f"no PNG images in {hr_dir}")
    try:
        manifest = ds.prepare_pairs(hr_paths, out_dir, seed=seed, ref_mode=ref_mode, hr_size=hr_size)
    except ValueError as exc:
        _fail(str(exc))
    cfg = RunConfig({"manifest": manifest, "out": out_dir, "seed": seed})
    cfg.write(os.path.join(out_dir, "resolved_config.txt"))
    click.echo(f"manifest: {manifest}")


def _load_run_config(config, seed, ablation, steps, out):
    try:
        cfg = load_config(config)
        cfg = cfg.override(seed=seed, steps=steps, out=out)
        if ablation is not None:
            cfg = cfg.override(ablation=ablation)
        cfg.model_config()  # validate early for a clean diagnostic
        cfg.train_config()
        return cfg
    except (ConfigError, ValueError) as exc:
        _fail(str(exc))


@main.command("train")
@click.option("--config", type=click.Path(exists=True), default=None, help="Key-value config file.")
@click.option("--seed", type=int, default=None)
@click.option("--ablation", type=click.Choice(["full", "frozen-gate", "self-only", "cross-only"]), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--resume", type=click.Path(exists=True), default=None, help="Checkpoint to resume from.")
def cmd_train(config, seed, ablation, steps, out, resume):
    """Train on a prepared manifest; writes checkpoint, log and resolved config."""
    cfg = _load_run_config(config, seed, ablation, steps, out)
    if not cfg["manifest"]:
        _fail("config is missing 'manifest'")
    if not cfg["out"]:
        _fail("config is missing 'out'")
    os.makedirs(cfg["out"], exist_ok=True)
    cfg.write(os.path.join(cfg["out"], "resolved_config.txt"))

    try:
        pairs = ds.load_manifest(cfg["manifest"])
    except (OSError, ValueError) as exc:
        _fail(f"cannot load manifest: {exc}")

    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    log_path = os.path.join(cfg["out"], "train_log.tsv")
    ckpt_path = os.path.join(cfg["out"], "model.ckpt")
    if not resume and os.path.exists(log_path):
        os.remove(log_path)  # fresh run truncates; resume appends

    model = RefSRModel(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    start_step, optimizer = 0, None
    if resume:
        from .training import OptimizerState

        ckpt = load_checkpoint(resume)
        from .checkpoint import restore_model

        restore_model(model, ckpt)
        optimizer = OptimizerState(model.parameters())
        if ckpt.optimizer is not None:
            optimizer.t = ckpt.optimizer["t"]
            for name in optimizer.m:
                optimizer.m[name] = ckpt.arrays[f"optim_m:{name}"].astype(optimizer.m[name].dtype)
                optimizer.v[name] = ckpt.arrays[f"optim_v:{name}"].astype(optimizer.v[name].dtype)
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        start_step = ckpt.step or 0

    try:
        result = train_loop(model, pairs, train_cfg, log_path=log_path, ckpt_path=ckpt_path,
                            rng=rng, start_step=start_step, optimizer=optimizer)
    except FloatingPointError as exc:
        _fail(f"training aborted: {exc} (last periodic checkpoint retained)")
    click.echo(f"trained {len(result.history)} steps; checkpoint: {result.checkpoint_path}")


EVAL_COLUMNS = ["image", "psnr_db", "ssim", "psnr_bicubic_db", "ssim_bicubic"]


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Directory for the metrics table.")
@click.option("--border", default=4, show_default=True, help="Border crop before Y-channel metrics.")
def cmd_eval(checkpoint, manifest, out, border):
    """Per-image and mean PSNR/SSIM (Y channel) plus the bicubic x4 baseline."""
    try:
        ckpt = load_checkpoint(checkpoint)
        model = build_model_from_checkpoint(ckpt)
        pairs = ds.load_manifest(manifest)
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    rows = []
    for pair in pairs:
        if pair.lr.shape[0] != model.cfg.lr_input_size:
            _fail(
                f"pair {pair.name!r} LR extent {pair.lr.shape[0]} does not match "
                f"checkpoint config {model.cfg.lr_input_size}"
            )
        with no_grad():
            sr = model.forward(pair.lr, pair.ref).data
        p, s = y_metrics(sr, pair.hr, border=border)
        base = ds.bicubic_resize(pair.lr, pair.hr.shape[:2])
        pb, sb = y_metrics(base, pair.hr, border=border)
        rows.append((pair.name, p, s, pb, sb))

    def fmt(x):
        return "inf" if math.isinf(x) else f"{x:.6f}"

    mean = ("mean",) + tuple(
        math.inf if any(math.isinf(r[i]) for r in rows) else sum(r[i] for r in rows) / len(rows)
        for i in range(1, 5)
    )
    all_rows = rows + [mean]
    lines = ["\t".join(EVAL_COLUMNS)]
    lines += ["\t".join([r[0]] + [fmt(v) for v in r[1:]]) for r in all_rows]
    table = "\n".join(lines) + "\n"
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "metrics.tsv"), "w") as f:
            f.write(table)
        RunConfig({"manifest": manifest, "out": out}).write(os.path.join(out, "resolved_config.txt"))
    widths = [max(len(str(line.split("\t")[i])) for line in lines) for i in range(len(EVAL_COLUMNS))]
    for line in lines:
        cells = line.split("\t")
        click.echo("  ".join(c.ljust(w) for c, w in zip(cells, widths)))


ROBUSTNESS_COLUMNS = ["kind", "level", "magnitude", "aee_oracle", "aee_model", "psnr_db"]


@main.command("robustness")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--kind", type=click.Choice(["scale", "rotation"]), default="rotation", show_default=True)
@click.option("--levels", default="small,medium,large", show_default=True)
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", default=0, show_default=True)
def cmd_robustness(checkpoint, manifest, kind, levels, out, seed):
    """AEE/PSNR across transform levels, references transformed at inference only."""
    try:
        ckpt = load_checkpoint(checkpoint)
        model = build_model_from_checkpoint(ckpt)
        pairs = ds.load_manifest(manifest)
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    if model.cfg.ablation_mode == "self-only":
        _fail("self-only ablation checkpoints have no cross-attention branch for correspondences")
    level_list = [lv.strip() for lv in levels.split(",") if lv.strip()]
    for lv in level_list:
        if lv not in rb.LEVELS:
            _fail(f"unknown level {lv!r}")

    rows = []
    for level_idx, (level, kind_eff) in enumerate([("identity", "identity")] + [(lv, kind) for lv in level_list]):
        aee_o, aee_m, psnrs = [], [], []
        for pair in pairs:
            if kind_eff == "identity":
                ref_t, flow = pair.hr.copy(), np.zeros(pair.hr.shape[:2] + (2,))
                magnitude = 0.0
            else:
                ref_t, flow = rb.affine_augment(pair.hr, level, kind_eff, seed=seed)
                magnitude = rb.level_magnitude(kind_eff, level)
            aee_o.append(rb.oracle_aee(pair.hr, ref_t, flow))
            probe = ds.ImagePair(lr=pair.lr, ref=ref_t, hr=pair.hr, name=pair.name)
            aee_m.append(rb.correspondence_aee(model, probe, flow))
            with no_grad():
                sr = model.forward(pair.lr, ref_t).data
            psnrs.append(y_metrics(sr, pair.hr)[0])
        rows.append((kind_eff if kind_eff != "identity" else kind, str(level_idx),
                     f"{magnitude:.4f}", f"{np.mean(aee_o):.6f}", f"{np.mean(aee_m):.6f}",
                     f"{np.mean(psnrs):.6f}"))

    lines = ["\t".join(ROBUSTNESS_COLUMNS)] + ["\t".join(r) for r in rows]
    table = "\n".join(lines) + "\n"
    click.echo(table.rstrip())
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, f"robustness_{kind}.tsv"), "w") as f:
            f.write(table)
        RunConfig({"manifest": manifest, "out": out, "seed": seed}).write(
            os.path.join(out, "resolved_config.txt")
        )


@main.command("param-count")
@click.option("--config", type=click.Path(exists=True), default=None)
def cmd_param_count(config):
    """Trainable-parameter total with a per-module breakdown."""
    try:
        cfg = load_config(config)
        model_cfg = cfg.model_config()
    except (ConfigError, ValueError) as exc:
        _fail(str(exc))
    groups, total = count_parameters(model_cfg)
    for name in sorted(groups):
        click.echo(f"{name}\t{groups[name]}")
    click.echo(f"total\t{total}")


if __name__ == "__main__":
    main()
