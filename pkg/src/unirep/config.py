"""Experiment configuration: INI-style text parsed with configparser, validated with pydantic.

Grammar (section and key names are case-sensitive)::

    [experiment]            name, preset, capacity_multiplier, sharing, shared_blocks,
                            norm, scale_scope, moment_scope, eps, steps, batch_size,
                            eval_every, eval_mode, parallel, augment, moment_window,
                            output_dir
    [optimizer]             momentum, weight_decay, base_lr, warmup_lr, final_lr,
                            warmup_fraction, decay_boundaries
    [seeds]                 model, data, augment, split, pairing
    [domain.<name>]         kind = synthetic | udrd, plus the fields of that kind

Domains are numbered 1..D in the order their sections appear.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .network import SharingConfig, SharingMode
from .normalization import EPS, NormStrategy


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ExperimentSection(_Section):
    name: str = "experiment"
    preset: Literal["desk8", "resnet38"] = "desk8"
    capacity_multiplier: int = 1
    sharing: Literal["none", "full", "deep", "partial"] = "deep"
    shared_blocks: tuple[int, ...] = ()
    norm: Literal["BN", "BN+", "IN", "NONE"] = "BN"
    scale_scope: Literal["universal", "domain"] = "domain"
    moment_scope: Optional[Literal["universal", "domain", "none"]] = None
    eps: float = Field(EPS, gt=0)
    steps: int = Field(2000, ge=1)
    batch_size: int = Field(32, ge=1)
    eval_every: int = Field(0, ge=0)
    eval_mode: Literal["frozen", "bn_plus"] = "frozen"
    parallel: bool = False
    augment: bool = True
    moment_window: Optional[int] = Field(None, ge=1)
    output_dir: str = "runs/experiment"

    @field_validator("capacity_multiplier")
    @classmethod
    def _multiplier(cls, v):
        if v not in (1, 2, 4):
            raise ValueError(f"must be 1, 2 or 4, got {v}")
        return v

    @field_validator("shared_blocks", mode="before")
    @classmethod
    def _blocks(cls, v):
        if isinstance(v, str):
            v = v.strip()
            if not v:
                return ()
            if "-" in v:
                a, b = (int(p) for p in v.split("-"))
                return tuple(range(a, b + 1))
            return tuple(int(p) for p in v.replace(",", " ").split())
        return v

    @property
    def resolved_moment_scope(self):
        if self.moment_scope is not None:
            return self.moment_scope
        return "domain" if self.norm == "BN" else "none"


class OptimizerSection(_Section):
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    base_lr: float = Field(0.1, gt=0)
    warmup_lr: float = Field(0.01, gt=0)
    final_lr: float = Field(1e-4, gt=0)
    warmup_fraction: float = Field(0.05, ge=0, lt=1)
    decay_boundaries: tuple[float, ...] = (0.5, 0.75)

    @field_validator("decay_boundaries", mode="before")
    @classmethod
    def _bounds(cls, v):
        if isinstance(v, str):
            return tuple(float(p) for p in v.replace(",", " ").split())
        return v


class SeedSection(_Section):
    model: int = 0
    data: int = 0
    augment: int = 0
    split: int = 0
    pairing: Optional[int] = None


class SyntheticDomain(_Section):
    kind: Literal["synthetic"] = "synthetic"
    num_classes: int = Field(10, ge=2)
    n_per_class: int = Field(100, ge=1)
    image_size: int = Field(16, ge=1)
    channels: int = Field(3, ge=1)
    mean_offset: float = 0.0
    variance_scale: float = Field(1.0, gt=0)
    margin: float = Field(8.0, gt=0)
    noise_std: float = Field(1.0, ge=0)
    seed: int = 0
    geometry_seed: int = 0
    style: Literal["object", "glyph"] = "object"
    grid: int = Field(4, ge=1)
    split_ratio: float = Field(0.8, gt=0, lt=1)


class UdrdDomain(_Section):
    kind: Literal["udrd"]
    path: str
    to_rgb: bool = False
    flip_allowed: Optional[bool] = None
    split_ratio: float = Field(0.8, gt=0, lt=1)


class ExperimentConfig(_Section):
    experiment: ExperimentSection = ExperimentSection()
    optimizer: OptimizerSection = OptimizerSection()
    seeds: SeedSection = SeedSection()
    domains: tuple[tuple[str, SyntheticDomain | UdrdDomain], ...] = ()
    base_dir: str = "."

    @property
    def strategy(self):
        e = self.experiment
        return NormStrategy(e.norm, e.scale_scope, e.resolved_moment_scope)

    @property
    def sharing(self):
        e = self.experiment
        return SharingConfig(SharingMode(e.sharing), e.shared_blocks, e.capacity_multiplier)

    def to_dict(self, include_output=True):
        data = self.model_dump(mode="json")
        data.pop("base_dir")
        data["domains"] = [[name, spec] for name, spec in data["domains"]]
        if not include_output:
            data["experiment"].pop("output_dir")
        return data

    def config_hash(self):
        """Digest of everything that determines the trajectory (output location excluded)."""
        blob = json.dumps(self.to_dict(include_output=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_text(self):
        """Serialize back to the INI grammar accepted by :func:`parse_config`."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        data = self.to_dict()

        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, (list, tuple)):
                return ", ".join(str(x) for x in v)
            return str(v)

        for section in ("experiment", "optimizer", "seeds"):
            cp[section] = {k: fmt(v) for k, v in data[section].items() if v is not None}
        for name, spec in data["domains"]:
            cp[f"domain.{name}"] = {k: fmt(v) for k, v in spec.items() if v is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt_error(prefix, err):
    loc = ".".join(str(p) for p in err["loc"] if not str(p).startswith("function-"))
    where = f"{prefix}.{loc}" if loc else prefix
    if err["type"] == "extra_forbidden":
        return f"unknown key '{where}'"
    return f"{where}: {err['msg']}"


def _validate(model_cls, prefix, values, errors, fallback=False):
    """Validate one section; with ``fallback`` the offending keys are dropped to allow cross-field checks."""
    try:
        return model_cls(**values)
    except ValidationError as exc:
        errors.extend(_fmt_error(prefix, e) for e in exc.errors())
        if not fallback:
            return None
        bad = {str(e["loc"][0]) for e in exc.errors() if e["loc"]}
        try:
            return model_cls(**{k: v for k, v in values.items() if k not in bad})
        except ValidationError:
            return None


def parse_config(text, base_dir="."):
    """Parse and validate an experiment config; raises :class:`ConfigError` listing every violation."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc

    errors = []
    known = {"experiment": ExperimentSection, "optimizer": OptimizerSection, "seeds": SeedSection}
    parsed = {}
    domains = []
    for section in cp.sections():
        values = dict(cp[section])
        if section in known:
            parsed[section] = _validate(known[section], section, values, errors, fallback=True)
        elif section.startswith("domain."):
            name = section[len("domain."):]
            kind = values.get("kind", "synthetic")
            cls = {"synthetic": SyntheticDomain, "udrd": UdrdDomain}.get(kind)
            if cls is None:
                errors.append(f"{section}.kind: unknown domain kind {kind!r}")
                continue
            spec = _validate(cls, section, values, errors)
            if isinstance(spec, UdrdDomain):
                # resolve once so the config hash and manifest do not depend on the working directory
                spec = spec.model_copy(update={"path": str((Path(base_dir) / spec.path).resolve())})
            if spec is not None:
                domains.append((name, spec))
        else:
            errors.append(f"unknown section '{section}'")
    if not any(s.startswith("domain.") for s in cp.sections()):
        errors.append("at least one [domain.<name>] section is required")

    exp = parsed.get("experiment") or ExperimentSection()
    opt = parsed.get("optimizer") or OptimizerSection()
    seeds = parsed.get("seeds") or SeedSection()
    errors.extend(cross_field_violations(exp, opt, domains))
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(experiment=exp, optimizer=opt, seeds=seeds, domains=tuple(domains),
                            base_dir=str(base_dir))


def cross_field_violations(exp, opt, domains):
    out = []
    if exp is not None:
        try:
            NormStrategy(exp.norm, exp.scale_scope, exp.resolved_moment_scope)
        except ValueError as exc:
            out.append(f"experiment.norm: {exc}")
        try:
            sharing = SharingConfig(SharingMode(exp.sharing), exp.shared_blocks, exp.capacity_multiplier)
        except ValueError as exc:
            out.append(f"experiment.sharing: {exc}")
            sharing = None
        synth = [(n, d) for n, d in domains if isinstance(d, SyntheticDomain)]
        if sharing is not None and sharing.mode is SharingMode.FULL and len({d.num_classes for _, d in synth}) > 1:
            counts = {n: d.num_classes for n, d in synth}
            out.append(f"experiment.sharing: full sharing requires equal class counts, got {counts}")
        if sharing is not None and sharing.mode is SharingMode.PARTIAL and exp.shared_blocks:
            stages = 2 if exp.preset == "desk8" else 4
            if max(exp.shared_blocks) > stages:
                out.append(f"experiment.shared_blocks: block {max(exp.shared_blocks)} exceeds {stages} stages")
        size = 16 if exp.preset == "desk8" else 64
        for n, d in synth:
            if d.image_size != size:
                out.append(f"domain.{n}.image_size: {exp.preset} expects {size}x{size} inputs, got {d.image_size}")
            n_train = round(d.split_ratio * d.num_classes * d.n_per_class)
            if n_train < exp.batch_size:
                out.append(f"domain.{n}: {n_train} training examples < batch_size {exp.batch_size}")
        if opt is not None:
            warm = round(opt.warmup_fraction * exp.steps)
            bounds = [round(f * exp.steps) for f in opt.decay_boundaries]
            if not opt.warmup_lr < opt.base_lr:
                out.append("optimizer.warmup_lr must be below optimizer.base_lr")
            if not opt.final_lr <= opt.base_lr:
                out.append("optimizer.final_lr must not exceed optimizer.base_lr")
            if any(b <= a for a, b in zip(bounds, bounds[1:])) or (bounds and not (warm <= bounds[0] < exp.steps and bounds[-1] < exp.steps)):
                out.append(f"optimizer.decay_boundaries {list(opt.decay_boundaries)} do not form increasing steps within the run")
    return out


def load_config(path):
    """Read a config file, or the config embedded in a run manifest (``.json``)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        manifest = json.loads(text)
        text = manifest["config_text"]
    return parse_config(text, base_dir=path.parent)
