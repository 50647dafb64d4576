"""Round-robin multi-domain training: batch plan, schedule, SGD, augmentation, loop and evaluation."""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as te
from .domains import Dataset
from .errors import ConfigurationError, DimensionError, DivergenceError, ScheduleError
from .normalization import NormKind, accumulate_moments

log = logging.getLogger(__name__)

THREADS_ENV = "UNIREP_THREADS"


# --------------------------------------------------------------------------- batch plan


@dataclass(frozen=True)
class BatchPlan:
    domains: tuple
    batch_indices: tuple
    batch_size: int = 32

    def __len__(self):
        return len(self.domains)

    def __iter__(self):
        return iter(zip(self.domains, self.batch_indices))


def round_robin(num_domains, steps, batch_size=32):
    """Cycle 1..D; each domain's own batch counter advances only on its turns."""
    if num_domains < 1 or steps < 1:
        raise ValueError("round_robin needs D >= 1 and steps >= 1")
    domains = tuple(s % num_domains + 1 for s in range(steps))
    batch_indices = tuple(s // num_domains for s in range(steps))
    return BatchPlan(domains, batch_indices, batch_size)


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    warmup_steps: int
    warmup_lr: float = 0.01
    base_lr: float = 0.1
    final_lr: float = 1e-4
    boundaries: tuple = ()

    def __post_init__(self):
        problems = []
        if self.total_steps < 1:
            problems.append("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < max(self.total_steps, 1):
            problems.append(f"warmup_steps {self.warmup_steps} must lie in [0, total_steps)")
        if not self.warmup_lr < self.base_lr:
            problems.append(f"warmup_lr {self.warmup_lr} must be below base_lr {self.base_lr}")
        if not self.final_lr <= self.base_lr:
            problems.append(f"final_lr {self.final_lr} must not exceed base_lr {self.base_lr}")
        b = list(self.boundaries)
        if any(y <= x for x, y in zip(b, b[1:])):
            problems.append(f"decay boundaries must strictly increase, got {b}")
        if b and not (self.warmup_steps <= b[0] and b[-1] < self.total_steps):
            problems.append(f"decay boundaries {b} must lie within [warmup_steps, total_steps)")
        if problems:
            raise ScheduleError("; ".join(problems))

    @classmethod
    def default(cls, total_steps, warmup_fraction=0.05, fractions=(0.5, 0.75), warmup_lr=0.01,
                base_lr=0.1, final_lr=1e-4):
        warm = max(1, int(round(warmup_fraction * total_steps))) if warmup_fraction > 0 else 0
        bounds = tuple(int(round(f * total_steps)) for f in fractions)
        return cls(total_steps, warm, warmup_lr, base_lr, final_lr, bounds)


def lr_at(schedule, step):
    """Warm-up rate, then x0.1 drops at each boundary with the last segment pinned to final_lr."""
    if not 0 <= step < schedule.total_steps:
        raise ScheduleError(f"step {step} outside [0, {schedule.total_steps})")
    if step < schedule.warmup_steps:
        return schedule.warmup_lr
    passed = sum(step >= b for b in schedule.boundaries)
    if passed == 0:
        return schedule.base_lr
    if passed == len(schedule.boundaries):
        return schedule.final_lr
    return max(schedule.base_lr * 0.1 ** passed, schedule.final_lr)


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    velocity: dict
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @classmethod
    def zeros_like(cls, params, momentum=0.9, weight_decay=1e-4):
        return cls({k: np.zeros_like(v) for k, v in params.items()}, momentum, weight_decay)


def sgd_step(params, grads, state, lr, decayed=None):
    """Momentum SGD, in place, on the parameters named in ``grads``.

    ``decayed`` is the set of parameter names receiving weight decay (weights,
    not scales or biases); ``None`` means every parameter.
    """
    for name, g in grads.items():
        p = params[name]
        v = state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"{name}: grad {g.shape} / velocity {v.shape} vs param {p.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay and (decayed is None or name in decayed):
            v += state.weight_decay * p
        p -= lr * v
    return params, state


# --------------------------------------------------------------------------- augmentation


def pad_size(descriptor):
    return max(1, descriptor.input_dims[0] // 8)


def augment(image, descriptor, rng, offset=None, flip=None):
    """Zero-pad, crop back to size at a random offset, and flip horizontally when allowed.

    ``image`` is H x W x C. ``offset``/``flip`` override the random draws.
    """
    h, w, _ = image.shape
    p = pad_size(descriptor)
    if offset is None:
        offset = (int(rng.integers(0, 2 * p + 1)), int(rng.integers(0, 2 * p + 1)))
    if flip is None:
        flip = bool(descriptor.flip_allowed and rng.random() < 0.5)
    elif flip and not descriptor.flip_allowed:
        flip = False
    padded = np.pad(image, ((p, p), (p, p), (0, 0)))
    oy, ox = offset
    out = padded[oy:oy + h, ox:ox + w]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(x, descriptor, rng):
    """Apply :func:`augment` to every instance of an H x W x C x T batch."""
    h, w, _, t = x.shape
    p = pad_size(descriptor)
    offsets = rng.integers(0, 2 * p + 1, size=(t, 2))
    flips = rng.random(t) < 0.5 if descriptor.flip_allowed else np.zeros(t, dtype=bool)
    padded = np.pad(x, ((p, p), (p, p), (0, 0), (0, 0)))
    out = np.empty_like(x)
    for i in range(t):
        oy, ox = offsets[i]
        crop = padded[oy:oy + h, ox:ox + w, :, i]
        out[:, :, :, i] = crop[:, ::-1] if flips[i] else crop
    return out


# --------------------------------------------------------------------------- data iteration


class DomainIterator:
    """Stateless batch lookup: batch ``k`` of a domain is a pure function of (seed, domain, k)."""

    def __init__(self, dataset, batch_size, seed, domain_id):
        self.dataset = dataset
        self.train_idx = dataset.indices("train")
        if self.train_idx.size < batch_size:
            raise ConfigurationError(
                f"domain {dataset.descriptor.name!r} has {self.train_idx.size} training examples < batch size {batch_size}"
            )
        self.batch_size = batch_size
        self.seed = seed
        self.domain_id = domain_id
        self.batches_per_epoch = self.train_idx.size // batch_size
        self._perm_epoch = None
        self._perm = None

    def indices(self, k):
        epoch, pos = divmod(k, self.batches_per_epoch)
        if epoch != self._perm_epoch:
            rng = np.random.default_rng([self.seed, self.domain_id, epoch])
            self._perm = self.train_idx[rng.permutation(self.train_idx.size)]
            self._perm_epoch = epoch
        return self._perm[pos * self.batch_size:(pos + 1) * self.batch_size]

    def batch(self, k):
        return self.dataset.batch(self.indices(k))


# --------------------------------------------------------------------------- evaluation


def evaluate(model, dataset, split="val", mode="frozen", batch_size=32, domain_id=None):
    """Top-1 error (percent) on the central (un-augmented) images of one split."""
    if mode not in ("frozen", "bn_plus"):
        raise ConfigurationError(f"evaluation mode must be 'frozen' or 'bn_plus', got {mode!r}")
    d = dataset.descriptor.id if domain_id is None else domain_id
    idx = dataset.indices(split)
    fwd_mode = "test" if mode == "frozen" else "bn_plus"
    wrong = 0
    for start in range(0, idx.size, batch_size):
        x, y = dataset.batch(idx[start:start + batch_size])
        logits = model.forward_tape(x.astype(model.dtype, copy=False), d, fwd_mode)[0]
        pred = np.argmax(logits[0, 0], axis=0)
        wrong += int(np.sum(pred != y))
    return 100.0 * wrong / idx.size


def mean_error(errors):
    values = list(errors.values()) if isinstance(errors, dict) else list(errors)
    return float(sum(values) / len(values))


# --------------------------------------------------------------------------- trainer


@dataclass
class MetricsRecord:
    step: int
    train_loss: dict
    val_error: dict
    mean_error: float
    lr: float
    eval_mode: str
    wall_clock: float = 0.0

    def to_json(self):
        return {
            "type": "eval",
            "step": self.step,
            "train_loss": {str(k): v for k, v in self.train_loss.items()},
            "val_error": {str(k): v for k, v in self.val_error.items()},
            "mean_error": self.mean_error,
            "lr": self.lr,
            "eval_mode": self.eval_mode,
        }


@dataclass
class TrainSettings:
    steps: int
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: Schedule | None = None
    eval_every: int = 0
    eval_mode: str = "frozen"
    parallel: bool = False
    data_seed: int = 0
    augment_seed: int = 0
    augment: bool = True
    moment_window: int | None = None
    active_domains: tuple | None = None


class Trainer:
    """Owns the mutable training state; :meth:`run` advances it step by step."""

    def __init__(self, model, datasets, settings, on_record=None):
        self.model = model
        self.datasets = list(datasets)
        if len(self.datasets) != model.num_domains:
            raise ConfigurationError(f"{len(self.datasets)} datasets for a {model.num_domains}-domain model")
        self.settings = settings
        self.schedule = settings.schedule or Schedule.default(settings.steps)
        if self.schedule.total_steps != settings.steps:
            raise ConfigurationError("schedule length differs from the step count")
        self.active = tuple(settings.active_domains or range(1, model.num_domains + 1))
        self.iterators = {
            d: DomainIterator(self.datasets[d - 1], settings.batch_size, settings.data_seed, d) for d in self.active
        }
        self.state = OptimizerState.zeros_like(model.bank.arrays, settings.momentum, settings.weight_decay)
        self.decayed = {pid for pid in model.bank.arrays if model.bank.decayed(pid)}
        self.step = 0
        self.loss_sum = {d: 0.0 for d in self.active}
        self.loss_count = {d: 0 for d in self.active}
        self.history = []
        self.on_record = on_record
        self.timings = []
        self.moment_start = self._moment_start()

    # plan -------------------------------------------------------------------

    def plan_entry(self, step):
        n = len(self.active)
        return self.active[step % n], step // n

    def _moment_start(self):
        if self.model.blueprint.norm_strategy.kind is not NormKind.BN:
            return None
        if self.settings.moment_window is not None:
            window = self.settings.moment_window
        else:
            # one epoch of the largest active domain, visited round-robin
            window = len(self.active) * max(it.batches_per_epoch for it in self.iterators.values())
        return max(0, self.settings.steps - window)

    # step -------------------------------------------------------------------

    def _batch(self, step):
        d, k = self.plan_entry(step)
        x, y = self.iterators[d].batch(k)
        if self.settings.augment:
            rng = np.random.default_rng([self.settings.augment_seed, step])
            x = augment_batch(x, self.datasets[d - 1].descriptor, rng)
        return d, x.astype(self.model.dtype, copy=False), y

    def _work(self, step):
        d, x, y = self._batch(step)
        logits, tape = self.model.forward_tape(x, d, "train")
        loss, g = te.softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step} (domain {d})", step=step)
        grads, _ = self.model.backward_tape(tape, g)
        return d, loss, grads, tape.batch_moments

    def _accumulate_moments(self, d, batch_moments):
        if self.moment_start is None or self.step < self.moment_start:
            return
        if self.step == self.moment_start:
            for _, _, m in self.model.bank.moment_collections():
                m.reset()
        for site, bm in batch_moments.items():
            coll = self.model.bank.collections[site]
            target = coll.moments[d - 1] if coll.moments is not None else coll.shared_moments
            accumulate_moments(target, bm)

    def _record_loss(self, d, loss):
        self.loss_sum[d] += loss
        self.loss_count[d] += 1

    def _apply(self, grads_list, lr):
        params = self.model.bank.arrays
        if len(grads_list) == 1:
            merged = grads_list[0].touched_grads()
        else:
            # fixed domain-index reduction order
            merged = {}
            for gb in sorted(grads_list, key=lambda gb: gb.domain):
                for pid, g in gb.touched_grads().items():
                    if pid in merged:
                        merged[pid] = merged[pid] + g
                    else:
                        merged[pid] = g.copy()
        sgd_step(params, merged, self.state, lr, self.decayed)

    def run(self, until=None, stop_at=None):
        """Advance to ``until`` (default: all steps); ``stop_at`` ends early for checkpoint/resume."""
        end = self.settings.steps if until is None else until
        if stop_at is not None:
            end = min(end, stop_at)
        workers = int(os.environ.get(THREADS_ENV, "1") or 1)
        group = len(self.active) if self.settings.parallel else 1
        pool = ThreadPoolExecutor(max_workers=workers) if (group > 1 and workers > 1) else None
        try:
            while self.step < end:
                t0 = time.perf_counter()
                steps = list(range(self.step, min(self.step + group, self.settings.steps)))
                if pool is not None:
                    results = list(pool.map(self._work, steps))
                else:
                    results = [self._work(s) for s in steps]
                lr = lr_at(self.schedule, steps[-1])
                grads_list = []
                for s, (d, loss, grads, moments) in zip(steps, results):
                    grads_list.append(grads)
                    self._record_loss(d, loss)
                    self.step = s
                    self._accumulate_moments(d, moments)
                self._apply(grads_list, lr)
                self.step = steps[-1] + 1
                self.timings.append(time.perf_counter() - t0)
                if self._due_for_eval():
                    self.record(lr)
        finally:
            if pool is not None:
                pool.shutdown()
        return self.history

    def _due_for_eval(self):
        every = self.settings.eval_every
        if self.step == self.settings.steps:
            return True
        return bool(every) and self.step % every == 0

    def eval_mode_now(self):
        mode = self.settings.eval_mode
        if mode == "frozen" and self.moment_start is not None and self.step < self.settings.steps:
            # moments are only frozen after the final epoch; earlier points use batch statistics
            return "bn_plus"
        return mode

    def record(self, lr=None):
        mode = self.eval_mode_now()
        errors = {
            d: evaluate(self.model, self.datasets[d - 1], "val", mode, self.settings.batch_size, d)
            for d in self.active
        }
        losses = {
            d: (self.loss_sum[d] / self.loss_count[d]) if self.loss_count[d] else float("nan") for d in self.active
        }
        self.loss_sum = {d: 0.0 for d in self.active}
        self.loss_count = {d: 0 for d in self.active}
        if lr is None:
            lr = lr_at(self.schedule, min(self.step, self.settings.steps) - 1) if self.step else self.schedule.warmup_lr
        rec = MetricsRecord(self.step, losses, errors, mean_error(errors), lr, mode, sum(self.timings))
        self.history.append(rec)
        log.info("step %d mean val error %.2f%% (%s)", self.step, rec.mean_error, mode)
        if self.on_record is not None:
            self.on_record(rec)
        return rec


def train(model, datasets, settings, on_record=None):
    """Train ``model`` on ``datasets`` round-robin; returns ``(model, history)``."""
    trainer = Trainer(model, datasets, settings, on_record)
    trainer.run()
    return model, trainer.history
