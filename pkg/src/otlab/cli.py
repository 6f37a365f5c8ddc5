"""Command-line pipelines.

The stages mirror the experiment sequence: train a classifier, probe it
with an occlusion map, continue training with guided occlusion
augmentation, fine-tune the embedding with a triplet objective, then
evaluate verification performance. Each stage consumes the previous
stage's checkpoint.

Every command takes --config/--seed/--out/--workers, validates its inputs
fully before writing anything, and is deterministic: rerunning with the
same config, inputs and seed reproduces every output file byte for byte.

Exit codes: 0 ok; 2 invalid config or input file; 3 numeric divergence
during training; 4 protocol failure (e.g. no correctly classified image
to build a map from).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluation, metric, occlusion
from .config import ExperimentConfig
from .engine import checkpoint as ckpt
from .engine.model import init_model
from .engine.train import train_accuracy, train_classifier
from .errors import ConfigError, DivergenceError, FormatError, ProtocolError
from .validation import as_rng

CHECKPOINT_NAME = "checkpoint.otl"


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) if isinstance(v, (int, str)) else _fmt(v)
                              for v in row) + "\n")


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _run(body):
    try:
        body()
    except ConfigError as exc:
        _fail(2, str(exc))
    except FormatError as exc:
        _fail(2, str(exc))
    except FileNotFoundError as exc:
        _fail(2, str(exc))
    except DivergenceError as exc:
        _fail(3, str(exc))
    except ProtocolError as exc:
        _fail(4, str(exc))


def _common(f):
    f = click.option("--config", "config_path", required=True,
                     type=click.Path(), help="Experiment config (JSON).")(f)
    f = click.option("--seed", type=int, default=None,
                     help="Run seed; overrides the config seed.")(f)
    f = click.option("--out", "out_dir", required=True, type=click.Path(),
                     help="Output directory (created if missing).")(f)
    f = click.option("--workers", type=int, default=1, show_default=True,
                     help="Worker threads for occlusion-map scans.")(f)
    return f


def _load_model(path) -> ckpt.Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return ckpt.read_checkpoint(p)


@click.group()
def main():
    """Occlusion-guided augmentation and triplet metric-learning pipelines."""


@main.command("train-classifier")
@_common
def cmd_train_classifier(config_path, seed, out_dir, workers):
    """Train the classification model from scratch."""

    def body():
        cfg = ExperimentConfig.load(config_path, seed)
        _full, train, _val = cfg.dataset_splits()
        schedule = cfg.schedule()
        model_cfg = cfg.model_config(train)

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rng = as_rng(cfg.seed)
        model = init_model(model_cfg, rng)
        rows = train_classifier(model, train, schedule, rng)
        ckpt.save_checkpoint(model, out / CHECKPOINT_NAME, rng_state=_rng_state(rng),
                             training_meta={"stage": "classifier", "steps": schedule.steps,
                                            "loss_mode": "softmax_ce", "seed": cfg.seed})
        _write_csv(out / "train_log.csv", ["step", "loss", "accuracy"], rows)
        final_acc = train_accuracy(model, train)
        click.echo(f"trained {schedule.steps} steps; train accuracy {final_acc:.4f}")

    _run(body)


@main.command("occlusion-map")
@_common
@click.argument("checkpoint_path", type=click.Path())
def cmd_occlusion_map(config_path, seed, out_dir, workers, checkpoint_path):
    """Aggregate occlusion map of a trained model over validation images."""

    def body():
        cfg = ExperimentConfig.load(config_path, seed)
        _full, _train, val = cfg.dataset_splits()
        spec = cfg.occluder()
        stride = cfg.stride()
        limit = cfg.map_images()
        loaded = _load_model(checkpoint_path)

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rng = as_rng(cfg.seed)
        occ_map, info = occlusion.dataset_occlusion_map(
            loaded.model, val.images, spec, rng, stride=stride, limit=limit,
            workers=workers)
        mean_acc, std = evaluation.map_accuracy_stats(occ_map)
        occlusion.save_map_csv(occ_map, out / "map.csv")
        occlusion.save_map_pgm(occ_map, out / "map.pgm")
        _write_json(out / "map_stats.json", {
            "mean_accuracy": mean_acc,
            "std": std,
            "sample_count": occ_map.sample_count,
            "excluded": info["excluded"],
            "occluder": [spec.height, spec.width],
            "stride": stride,
        })
        click.echo(f"map over {occ_map.sample_count} images "
                   f"({info['excluded']} excluded); "
                   f"mean accuracy {mean_acc:.4f}, std {std:.4f}")

    _run(body)


@main.command("train-augmented")
@_common
@click.argument("base_checkpoint", type=click.Path())
@click.option("--map", "map_path", type=click.Path(), default=None,
              help="Occlusion map CSV (required for placement mode P).")
def cmd_train_augmented(config_path, seed, out_dir, workers, base_checkpoint, map_path):
    """Continue classification training on occlusion-augmented batches."""

    def body():
        cfg = ExperimentConfig.load(config_path, seed)
        _full, train, _val = cfg.dataset_splits()
        schedule = cfg.schedule()
        spec = cfg.occluder()
        mode = cfg.placement_mode()
        fraction = cfg.occluded_fraction()
        loaded = _load_model(base_checkpoint)
        h, w = train.image_shape()

        if mode == "P":
            source = map_path or cfg.raw.get("map")
            if source is None:
                raise ConfigError("placement mode P needs --map (or config \"map\")")
            if not Path(source).is_file():
                raise ConfigError(f"map file not found: {source}")
            occ_map = occlusion.load_map_csv(source)
            if occ_map.grid.shape != (h, w):
                raise ConfigError(f"map shape {occ_map.grid.shape} does not match "
                                  f"image shape {(h, w)}")
            placement = occlusion.placement_distribution(occ_map, cfg.temperature())
        else:
            placement = "random"

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rng = as_rng(cfg.seed)
        model = loaded.model.copy()

        def augment(images, gen):
            return occlusion.occlude_fraction(images, fraction, placement, spec, gen)

        rows = train_classifier(model, train, schedule, rng, augment=augment)
        ckpt.save_checkpoint(model, out / CHECKPOINT_NAME, rng_state=_rng_state(rng),
                             training_meta={"stage": f"augmented-{mode}",
                                            "steps": schedule.steps,
                                            "loss_mode": "softmax_ce", "seed": cfg.seed})
        _write_csv(out / "train_log.csv", ["step", "loss", "accuracy"], rows)
        click.echo(f"augmented fine-tuning done ({mode} placement, {schedule.steps} steps)")

    _run(body)


@main.command("finetune-triplet")
@_common
@click.argument("base_checkpoint", type=click.Path())
def cmd_finetune_triplet(config_path, seed, out_dir, workers, base_checkpoint):
    """Fine-tune the embedding with the standard or batch triplet objective."""

    def body():
        cfg = ExperimentConfig.load(config_path, seed)
        _full, train, _val = cfg.dataset_splits()
        loss_cfg = cfg.loss()
        schedule = cfg.finetune_schedule()
        loaded = _load_model(base_checkpoint)
        loaded.model.bottleneck_dim()  # must expose a bottleneck layer

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rng = as_rng(cfg.seed)
        model = loaded.model.copy()
        model, rows = metric.finetune(model, train, loss_cfg, schedule, rng)
        ckpt.save_checkpoint(model, out / CHECKPOINT_NAME, rng_state=_rng_state(rng),
                             training_meta={"stage": f"triplet-{loss_cfg.mode}",
                                            "steps": schedule.steps,
                                            "loss_mode": f"triplet_{loss_cfg.mode}",
                                            "seed": cfg.seed})
        _write_csv(out / "train_log.csv", metric.FINETUNE_LOG_COLUMNS,
                   [[r[c] for c in metric.FINETUNE_LOG_COLUMNS] for r in rows])
        updates = sum(1 for r in rows if np.isfinite(r["loss"]))
        click.echo(f"fine-tuned with {loss_cfg.mode} triplet loss: "
                   f"{updates}/{schedule.steps} update steps")

    _run(body)


@main.command("evaluate")
@_common
@click.argument("checkpoint_path", type=click.Path())
@click.option("--pairs", "pairs_path", type=click.Path(), default=None,
              help="Pairs CSV (id_a,id_b,is_match); overrides config eval.pairs.")
def cmd_evaluate(config_path, seed, out_dir, workers, checkpoint_path, pairs_path):
    """Score verification pairs; write ROC and k-fold accuracy reports."""

    def body():
        cfg = ExperimentConfig.load(config_path, seed)
        full, _train, _val = cfg.dataset_splits()
        k = cfg.eval_k()
        source = cfg.eval_pairs_path(pairs_path)
        loaded = _load_model(checkpoint_path)
        pairs = evaluation.load_pairs_csv(source)
        resolved = evaluation.resolve_pairs(pairs, full)

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scored = evaluation.score_pairs(loaded.model, resolved)
        curve = evaluation.roc(scored)
        report = evaluation.kfold_accuracy(scored, k)
        pos = [p.score for p in scored if p.is_match]
        neg = [p.score for p in scored if not p.is_match]
        decid = metric.decidability(pos, neg)

        _write_csv(out / "roc.csv", ["threshold", "far", "tar"],
                   [(t, f, a) for t, (f, a) in zip(curve.thresholds, curve.points)])
        doc = evaluation.kfold_report_dict(report, k=k, decid=decid,
                                           num_pairs=len(scored))
        evaluation.validate_kfold_report(doc)
        _write_json(out / "kfold.json", doc)
        click.echo(f"k-fold accuracy {report.mean:.4f} +- {report.std:.4f} "
                   f"(k={k}); AUC {curve.auc:.4f}; decidability {decid:.4f}")

    _run(body)


@main.command("report")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Directory holding artifacts from earlier stages.")
def cmd_report(out_dir):
    """Render a human-readable summary of the artifacts in --out."""

    def body():
        out = Path(out_dir)
        if not out.is_dir():
            raise ConfigError(f"{out} is not a directory")
        lines = ["experiment artifacts", "=" * 40]

        stats_path = out / "map_stats.json"
        if stats_path.is_file():
            doc = json.loads(stats_path.read_text())
            lines += [
                "occlusion map",
                f"  occluder          {doc['occluder'][0]}x{doc['occluder'][1]}",
                f"  images used       {doc['sample_count']} ({doc['excluded']} excluded)",
                f"  mean accuracy     {doc['mean_accuracy'] * 100:.2f}%",
                f"  cell std          {doc['std']:.4f}",
            ]
        kfold_path = out / "kfold.json"
        if kfold_path.is_file():
            doc = json.loads(kfold_path.read_text())
            lines += [
                "verification",
                f"  pairs             {doc.get('num_pairs', '?')}",
                f"  k-fold accuracy   {doc['mean_accuracy'] * 100:.2f}% +- "
                f"{doc['std'] * 100:.2f}% (k={doc['k']})",
            ]
            if "decidability" in doc:
                lines.append(f"  decidability      {doc['decidability']:.4f}")
        log_path = out / "train_log.csv"
        if log_path.is_file():
            body_rows = log_path.read_text().strip().splitlines()
            lines += ["training log", f"  steps logged      {max(len(body_rows) - 1, 0)}"]
        if len(lines) == 2:
            lines.append("(no known artifacts found)")

        text = "\n".join(lines) + "\n"
        (out / "report.txt").write_text(text)
        click.echo(text, nl=False)

    _run(body)


if __name__ == "__main__":
    main()
