"""Command-line surface: dataset generation, training, attacks and reports.

Exit codes: 0 success, 1 user/config error, 2 numerical abort.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from .attack import (
    AttackConfig,
    build_overlay_spec,
    composited_miou,
    run_patch_attack,
    save_texture,
)
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .data import load_training_data, synth_sprite_dataset, ingest_sequences, load_frame
from .errors import ConfigError, DataError, NumericsError, SkeleVisionError
from .model import build_model
from .tracking import TrackerConfig, track_sequence
from .train import RunRecord, TrainConfig, run_is_complete, sweep as run_sweep, train as run_train

log = logging.getLogger(__name__)


@dataclass
class AppContext:
    cfg: ExperimentConfig
    data_root: Path
    out: Path
    jobs: int


def _train_config(cfg: ExperimentConfig, **overrides) -> TrainConfig:
    t, m = cfg["train"], cfg["model"]
    kwargs = dict(
        mode=t["mode"],
        lambda_k=t["lambda_k"],
        lambda_c=t["lambda_c"],
        lambda_r=t["lambda_r"],
        lr=t["lr"],
        epochs=t["epochs"],
        seed=t["seed"],
        head_depth=m["head_depth"],
        backbone_variant=m["backbone"],
        backbone_channels=m["backbone_channels"],
        batch_size=t["batch_size"],
        steps_per_epoch=t["steps_per_epoch"],
        pretrained_head=t["pretrained_head"] or None,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="override train.seed")
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.pass_context
def cli(ctx, config_path, seed, out, jobs):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if seed is not None:
        overrides["train.seed"] = seed
    cfg = ExperimentConfig.load(config_path, overrides)
    data_root = Path(os.environ.get("SKELEVISION_DATA") or cfg["data"]["root"])
    ctx.obj = AppContext(cfg=cfg, data_root=data_root, out=Path(out), jobs=jobs)


@cli.command("synth")
@click.pass_obj
def cmd_synth(app: AppContext):
    """Generate the synthetic sprite dataset (train + eval splits)."""
    s = app.cfg["synth"]
    seed = app.cfg["train"]["seed"]
    synth_sprite_dataset(
        app.data_root / "train",
        seed=seed,
        n_sequences=s["n_train_sequences"],
        frames_per_seq=s["frames_per_seq"],
        frame_size=s["frame_size"],
        n_stills=s["n_stills"],
    )
    synth_sprite_dataset(
        app.data_root / "eval",
        seed=seed + 1000,
        n_sequences=s["n_eval_sequences"],
        frames_per_seq=s["frames_per_seq"],
        frame_size=s["frame_size"],
        n_stills=0,
    )
    (app.data_root / "config.json").write_text(app.cfg.to_json())
    click.echo(f"dataset written to {app.data_root}")


@cli.command("train")
@click.pass_obj
def cmd_train(app: AppContext):
    """Train one model per the [train] section."""
    tc = _train_config(app.cfg)
    run_dir = app.out / "runs" / tc.digest()
    if run_is_complete(run_dir):
        click.echo(f"run {tc.digest()} already complete")
        return
    data = load_training_data(app.data_root / "train")
    rec = run_train(tc, data, run_dir)
    click.echo(
        f"run {rec.digest}: selected epoch {rec.selected_epoch}, "
        f"val mIoU {rec.epochs[rec.selected_epoch]['val_miou']:.3f}"
    )


@cli.command("sweep")
@click.pass_obj
def cmd_sweep(app: AppContext):
    """Train one run per lambda_k in train.lambda_values (resumable)."""
    tc = _train_config(app.cfg, mode="mtl", lambda_k=1.0)
    data = load_training_data(app.data_root / "train")
    records = run_sweep(
        tc,
        app.cfg["train"]["lambda_values"],
        data,
        app.out / "runs",
        warmup_epochs=app.cfg["train"]["warmup_epochs"],
    )
    for rec in records:
        click.echo(f"{rec.digest}: lambda_k={rec.config['lambda_k']}")


def _eval_sequences(app: AppContext, limit: int | None = None):
    root = app.data_root / "eval"
    records = [r for r in ingest_sequences(root) if r.split == "train"]
    if limit:
        records = records[:limit]
    out = []
    for rec in records:
        frames = np.stack([load_frame(p) for p in rec.frame_paths])
        out.append((rec.name, frames, rec.gt_boxes))
    return out


def _completed_runs(app: AppContext) -> list[RunRecord]:
    runs_dir = app.out / "runs"
    if not runs_dir.is_dir():
        raise ConfigError(f"no runs directory at {runs_dir}; train first")
    records = []
    for d in sorted(runs_dir.iterdir()):
        if d.is_dir() and not d.name.startswith("warmup") and run_is_complete(d):
            records.append(RunRecord.read(d))
    if not records:
        raise ConfigError(f"no completed runs under {runs_dir}")
    return records


def _load_run_model(rec: RunRecord):
    tc = TrainConfig(**rec.config)
    model = build_model(tc.model_config())
    load_checkpoint(rec.checkpoint_path, model)
    model.eval()
    return model


def _model_label(rec: RunRecord) -> str:
    lam = rec.config["lambda_k"]
    return "STL" if lam == 0 else f"MTL(lk={lam:g})"


@cli.command("eval")
@click.pass_obj
def cmd_eval(app: AppContext):
    """Benign tracking mIoU of every completed run on the eval sequences."""
    seqs = _eval_sequences(app, app.cfg["attack"]["n_sequences"])
    rows = []
    for rec in _completed_runs(app):
        model = _load_run_model(rec)
        tracker_cfg = TrackerConfig(window_weight=app.cfg["attack"]["window_weight"])
        mious = [
            track_sequence(model, list(frames), boxes, tracker_cfg).miou
            for _, frames, boxes in seqs
        ]
        rows.append((rec.digest, _model_label(rec), rec.config["lambda_k"], float(np.mean(mious))))
    app.out.mkdir(parents=True, exist_ok=True)
    with open(app.out / "eval.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["digest", "model", "lambda_k", "benign_miou"])
        writer.writerows(rows)
    for row in rows:
        click.echo(f"{row[1]}: benign mIoU {row[3]:.3f}")


def _attack_cell(args):
    """One (run, delta, sequence) attack cell; used by the worker pool."""
    rec_config, ckpt_path, delta, steps_grid, attacked_frames, window_weight, name, frames, boxes, tex_path = args
    tc = TrainConfig(**rec_config)
    model = build_model(tc.model_config())
    load_checkpoint(ckpt_path, model)
    model.eval()
    tracker_cfg = TrackerConfig(window_weight=window_weight)
    spec = build_overlay_spec(frames, boxes)
    cfg = AttackConfig(delta=delta, steps=max(steps_grid), attacked_frames=attacked_frames)
    result = run_patch_attack(
        model, frames, boxes, spec, cfg, tracker_cfg, snapshot_steps=tuple(steps_grid)
    )
    per_steps = {}
    for s in steps_grid:
        tex = result.snapshots.get(s, result.texture)
        m, _ = composited_miou(model, frames, boxes, spec, tex, tracker_cfg)
        per_steps[s] = m
    save_texture(
        tex_path,
        result.texture,
        {
            "sequence": name,
            "delta": delta,
            "steps": max(steps_grid),
            "region": list(spec.region.to_array()),
        },
    )
    return {
        "sequence": name,
        "delta": delta,
        "benign": result.benign_miou,
        "per_steps": per_steps,
        "per_frame_iou": result.per_frame_iou,
        "loss_trace": result.loss_trace,
    }


@cli.command("attack")
@click.pass_obj
def cmd_attack(app: AppContext):
    """Run the patch attack grid and emit the results table plus textures."""
    a = app.cfg["attack"]
    steps_grid = sorted(a["steps_grid"])
    seqs = _eval_sequences(app, a["n_sequences"])
    runs = _completed_runs(app)

    attack_dir = app.out / "attack"
    (attack_dir / "textures").mkdir(parents=True, exist_ok=True)
    (attack_dir / "frames").mkdir(parents=True, exist_ok=True)

    cells = []
    for rec in runs:
        for delta in a["delta_values"]:
            for name, frames, boxes in seqs:
                tex_path = attack_dir / "textures" / f"{rec.digest}_d{delta:g}_{name}.png"
                cells.append(
                    (
                        rec.config, rec.checkpoint_path, delta, steps_grid,
                        a["attacked_frames"], a["window_weight"],
                        name, frames, boxes, str(tex_path),
                    )
                )
    if app.jobs > 1:
        with ProcessPoolExecutor(max_workers=app.jobs) as pool:
            outcomes = list(pool.map(_attack_cell, cells))
    else:
        outcomes = [_attack_cell(c) for c in cells]

    # aggregate into (model, delta, steps) rows; steps=0 is the benign row
    rows = []
    i = 0
    for rec in runs:
        label = _model_label(rec)
        for delta in a["delta_values"]:
            group = outcomes[i : i + len(seqs)]
            i += len(seqs)
            rows.append([rec.digest, label, rec.config["lambda_k"], delta, 0,
                         float(np.mean([g["benign"] for g in group]))])
            for s in steps_grid:
                rows.append([rec.digest, label, rec.config["lambda_k"], delta, s,
                             float(np.mean([g["per_steps"][s] for g in group]))])
            for g in group:
                frame_rec = {
                    "model": label,
                    "digest": rec.digest,
                    "delta": delta,
                    "sequence": g["sequence"],
                    "per_frame_iou": g["per_frame_iou"],
                    "loss_trace": g["loss_trace"],
                }
                (attack_dir / "frames" / f"{rec.digest}_d{delta:g}_{g['sequence']}.json").write_text(
                    json.dumps(frame_rec)
                )

    with open(attack_dir / "results.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["digest", "model", "lambda_k", "delta", "steps", "miou"])
        writer.writerows(rows)
    click.echo(f"attack results written to {attack_dir / 'results.csv'}")


def _render_text_table(rows: list[dict]) -> str:
    """Aligned rendering of the results CSV: rows keyed by (delta, steps),
    one column per model."""
    models = sorted({r["model"] for r in rows}, key=lambda m: (m != "STL", m))
    deltas = sorted({float(r["delta"]) for r in rows})
    steps = sorted({int(r["steps"]) for r in rows})
    lookup = {(r["model"], float(r["delta"]), int(r["steps"])): float(r["miou"]) for r in rows}
    width = max(12, max(len(m) for m in models) + 2)
    lines = ["delta  steps  " + "".join(m.rjust(width) for m in models)]
    for d in deltas:
        for s in steps:
            cells = []
            for m in models:
                v = lookup.get((m, d, s))
                cells.append(("-" if v is None else f"{v:.4f}").rjust(width))
            tag = "benign" if s == 0 else str(s)
            lines.append(f"{d:<5g}  {tag:<5}  " + "".join(cells))
    return "\n".join(lines) + "\n"


@cli.command("report")
@click.pass_obj
def cmd_report(app: AppContext):
    """Emit tables and charts from previously computed attack results."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    attack_dir = app.out / "attack"
    results_csv = attack_dir / "results.csv"
    if not results_csv.exists():
        raise ConfigError(f"no attack results at {results_csv}; run the attack first")
    with open(results_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ConfigError(f"{results_csv} is empty")

    report_dir = app.out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "results.txt").write_text(_render_text_table(rows))

    dpi = app.cfg["report"]["dpi"]
    deltas = sorted({float(r["delta"]) for r in rows})
    for d in deltas:
        fig, ax = plt.subplots(figsize=(6, 4))
        models = sorted({r["model"] for r in rows}, key=lambda m: (m != "STL", m))
        for m in models:
            pts = sorted(
                (int(r["steps"]), float(r["miou"]))
                for r in rows
                if r["model"] == m and float(r["delta"]) == d
            )
            xs, ys = zip(*pts)
            style = dict(color="gray", marker="s") if m == "STL" else dict(marker="o")
            ax.plot(xs, ys, label=m, **style)
        ax.set_xlabel("attack steps")
        ax.set_ylabel("mIoU")
        ax.set_title(f"adversarial mIoU vs steps (delta={d:g})")
        ax.legend()
        fig.tight_layout()
        fig.savefig(report_dir / f"miou_vs_steps_delta{d:g}.png", dpi=dpi)
        plt.close(fig)

    for frame_json in sorted((attack_dir / "frames").glob("*.json")):
        rec = json.loads(frame_json.read_text())
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(range(2, len(rec["per_frame_iou"]) + 2), rec["per_frame_iou"])
        ax.set_xlabel("frame")
        ax.set_ylabel("IoU")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(f"{rec['model']} delta={rec['delta']:g} {rec['sequence']}")
        fig.tight_layout()
        fig.savefig(report_dir / f"frames_{frame_json.stem}.png", dpi=dpi)
        plt.close(fig)
    click.echo(f"report written to {report_dir}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except NumericsError as exc:
        click.echo(f"numerical abort: {exc}", err=True)
        return 2
    except (ConfigError, DataError, SkeleVisionError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
