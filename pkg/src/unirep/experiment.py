"""Run orchestration: datasets and model from a config, metrics files, manifests, checkpoints and resume."""
from __future__ import annotations

import json
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SyntheticDomain
from .domains import SynthSpec, generate_synthetic, load_binary, split, whiten
from .errors import ConfigError, DivergenceError
from .network import apply_sharing, build_blueprint
from .training import Schedule, Trainer, TrainSettings, evaluate, mean_error

METRICS = "metrics.jsonl"
TIMINGS = "timings.jsonl"
MANIFEST = "manifest.json"
CHECKPOINT = "model.udrc"


def build_datasets(config):
    """Materialize, split and whiten every configured domain (ids 1..D in config order)."""
    out = []
    for d, (name, spec) in enumerate(config.domains, start=1):
        if isinstance(spec, SyntheticDomain):
            fields = spec.model_dump(exclude={"kind", "split_ratio"})
            ds = generate_synthetic(SynthSpec(name=name, **fields), d)
        else:
            ds = load_binary(spec.path, domain_id=d, name=name, to_rgb=spec.to_rgb)
            if spec.flip_allowed is not None:
                ds.descriptor.flip_allowed = spec.flip_allowed
        ds.descriptor.split_ratio = spec.split_ratio
        ds.assignment = split(ds, spec.split_ratio, seed=[config.seeds.split, d])
        ds, _ = whiten(ds)
        out.append(ds)
    shapes = {tuple(ds.descriptor.input_dims) for ds in out}
    if len(shapes) > 1:
        raise ConfigError([f"all domains must share one input shape, got {sorted(shapes)}"])
    return out


def build_model(config, datasets):
    e = config.experiment
    counts = [ds.descriptor.num_classes for ds in datasets]
    h, w, c = datasets[0].descriptor.input_dims
    bp = build_blueprint(e.preset, e.capacity_multiplier, config.strategy, counts, input_channels=c)
    if (h, w) != bp.input_shape[:2]:
        raise ConfigError([f"{e.preset} expects {bp.input_shape[0]}x{bp.input_shape[1]} inputs, got {h}x{w}"])
    problems = config.sharing.violations(counts, len(bp.stages))
    if problems:
        raise ConfigError(problems)
    return apply_sharing(bp, config.sharing, seed=config.seeds.model, pairing_seed=config.seeds.pairing, eps=e.eps)


def build_settings(config):
    e, o, s = config.experiment, config.optimizer, config.seeds
    schedule = Schedule.default(
        e.steps, o.warmup_fraction, o.decay_boundaries, o.warmup_lr, o.base_lr, o.final_lr
    )
    return TrainSettings(
        steps=e.steps,
        batch_size=e.batch_size,
        momentum=o.momentum,
        weight_decay=o.weight_decay,
        schedule=schedule,
        eval_every=e.eval_every,
        eval_mode=e.eval_mode,
        parallel=e.parallel,
        data_seed=s.data,
        augment_seed=s.augment,
        augment=e.augment,
        moment_window=e.moment_window,
    )


@dataclass
class RunResult:
    output_dir: Path
    history: list
    summary: dict
    model: object
    step: int = 0


class _JsonLines:
    """Append-only JSON-lines writer; each record is flushed so a crash leaves a valid prefix."""

    def __init__(self, path, mode):
        self.fh = open(path, mode)

    def write(self, record):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def manifest(config):
    return {
        "config_text": config.to_text(),
        "config_hash": config.config_hash(),
        "seeds": config.seeds.model_dump(),
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def _summary(trainer, model, datasets, config):
    last = trainer.history[-1]
    return {
        "type": "summary",
        "name": config.experiment.name,
        "step": last.step,
        "domains": [ds.descriptor.name for ds in datasets],
        "val_error": {ds.descriptor.name: last.val_error[d] for d, ds in enumerate(datasets, start=1)},
        "mean_error": last.mean_error,
        "norm": {
            "kind": config.strategy.kind.value,
            "scale_scope": config.strategy.scale_scope.value,
            "moment_scope": config.strategy.moment_scope.value,
        },
        "sharing": model.sharing.label,
        "parameters": model.parameter_count(),
        "seed": config.seeds.model,
        "config_hash": config.config_hash(),
    }


def run_training(config, output_dir=None, resume=None, stop_at=None):
    """Train per ``config``; writes metrics, timings, manifest and checkpoint into the output directory.

    ``resume`` names a checkpoint to continue from; ``stop_at`` ends the run early
    (a checkpoint is written either way) so that it can be resumed later.
    """
    out = Path(output_dir or config.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = build_datasets(config)
    model = build_model(config, datasets)
    settings = build_settings(config)
    metrics = _JsonLines(out / METRICS, "a" if resume else "w")
    timings = _JsonLines(out / TIMINGS, "a" if resume else "w")

    def on_record(rec):
        metrics.write(rec.to_json())
        timings.write({"step": rec.step, "wall_clock": rec.wall_clock})

    trainer = Trainer(model, datasets, settings, on_record)
    try:
        if resume:
            header, velocity = load_checkpoint(resume, model, expected_hash=config.config_hash())
            for pid, v in velocity.items():
                trainer.state.velocity[pid][...] = v
            trainer.step = header["step"]
            extra = header["extra"]
            trainer.loss_sum = {int(d): v for d, v in extra["loss_sum"].items()}
            trainer.loss_count = {int(d): v for d, v in extra["loss_count"].items()}
            metrics.write({"type": "resume", "step": trainer.step})
        else:
            (out / MANIFEST).write_text(json.dumps(manifest(config), indent=2, sort_keys=True) + "\n")
            metrics.write({
                "type": "run",
                "name": config.experiment.name,
                "config_hash": config.config_hash(),
                "domains": [ds.descriptor.name for ds in datasets],
                "parameters": model.parameter_count(),
            })
        try:
            trainer.run(stop_at=stop_at)
        except DivergenceError as exc:
            metrics.write({"type": "divergence", "step": exc.step, "message": str(exc)})
            raise
        extra = {
            "loss_sum": {str(d): v for d, v in trainer.loss_sum.items()},
            "loss_count": {str(d): v for d, v in trainer.loss_count.items()},
        }
        save_checkpoint(out / CHECKPOINT, model, config.config_hash(), trainer.state.velocity, trainer.step, extra)
        summary = None
        if trainer.step >= settings.steps:
            summary = _summary(trainer, model, datasets, config)
            metrics.write(summary)
    finally:
        metrics.close()
        timings.close()
    return RunResult(out, trainer.history, summary, model, trainer.step)


def run_eval(config, checkpoint, mode="frozen"):
    """Evaluate a checkpoint on every domain's validation split; returns an eval record."""
    datasets = build_datasets(config)
    model = build_model(config, datasets)
    header, _ = load_checkpoint(checkpoint, model, expected_hash=config.config_hash())
    errors = {
        ds.descriptor.name: evaluate(model, ds, "val", mode, config.experiment.batch_size, d)
        for d, ds in enumerate(datasets, start=1)
    }
    return {
        "type": "eval",
        "step": header["step"],
        "eval_mode": mode,
        "val_error": errors,
        "mean_error": mean_error(errors),
    }


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
