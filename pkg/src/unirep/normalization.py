"""Batch / instance normalization, domain-multiplexed scaling and moment freezing.

Domain ids are 1-based throughout (d = 1..D).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    DomainIndexError,
    PurityError,
    UnfrozenMomentsError,
)
from .tensor import default_dtype

EPS = 1e-5


class NormKind(str, enum.Enum):
    BN = "BN"
    BN_PLUS = "BN+"
    IN = "IN"
    NONE = "NONE"


class Scope(str, enum.Enum):
    UNIVERSAL = "universal"
    DOMAIN = "domain"
    NONE = "none"


@dataclass(frozen=True)
class NormStrategy:
    kind: NormKind = NormKind.BN
    scale_scope: Scope = Scope.DOMAIN
    moment_scope: Scope = Scope.DOMAIN

    def __post_init__(self):
        object.__setattr__(self, "kind", NormKind(self.kind))
        object.__setattr__(self, "scale_scope", Scope(self.scale_scope))
        object.__setattr__(self, "moment_scope", Scope(self.moment_scope))
        problems = self.violations()
        if problems:
            raise ConfigurationError("; ".join(problems))

    def violations(self):
        out = []
        if self.scale_scope is Scope.NONE:
            out.append("scale_scope must be 'universal' or 'domain'")
        if self.kind is NormKind.BN and self.moment_scope is Scope.NONE:
            out.append("BN requires moment_scope 'universal' or 'domain'")
        if self.kind is not NormKind.BN and self.moment_scope is not Scope.NONE:
            out.append(f"{self.kind.value} computes moments on the fly; moment_scope must be 'none'")
        return out

    @property
    def uses_frozen_moments(self):
        return self.kind is NormKind.BN

    @property
    def label(self):
        return f"{self.kind.value}/{self.scale_scope.value}/{self.moment_scope.value}"


# --------------------------------------------------------------------------- parameter types


@dataclass
class ScaleParams:
    s: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.s.shape != self.b.shape or self.s.ndim != 1:
            raise DimensionError(f"scale {self.s.shape} and bias {self.b.shape} must be equal-length vectors")

    @classmethod
    def identity(cls, channels, dtype=None):
        dtype = dtype or default_dtype()
        return cls(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype))

    @property
    def channels(self):
        return self.s.shape[0]


@dataclass
class MomentParams:
    mu: np.ndarray
    sigma2: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, channels, dtype=None):
        dtype = dtype or default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.zeros(channels, dtype=dtype), 0)

    @property
    def channels(self):
        return self.mu.shape[0]

    def reset(self):
        self.mu[...] = 0
        self.sigma2[...] = 0
        self.count = 0


@dataclass
class DomainParamCollections:
    """Scales S (with biases B) and moments U (with variances Sigma) of one normalization site."""

    channels: int
    num_domains: int
    scales: list | None = None
    shared_scale: ScaleParams | None = None
    moments: list | None = None
    shared_moments: MomentParams | None = None
    moment_mode: Scope = field(default=Scope.NONE)

    @classmethod
    def create(cls, channels, num_domains, strategy, force_domain=False, dtype=None):
        coll = cls(channels, num_domains)
        if force_domain or strategy.scale_scope is Scope.DOMAIN:
            coll.scales = [ScaleParams.identity(channels, dtype) for _ in range(num_domains)]
        else:
            coll.shared_scale = ScaleParams.identity(channels, dtype)
        if strategy.moment_scope is not Scope.NONE:
            if force_domain or strategy.moment_scope is Scope.DOMAIN:
                coll.moments = [MomentParams.empty(channels, dtype) for _ in range(num_domains)]
                coll.moment_mode = Scope.DOMAIN
            else:
                coll.shared_moments = MomentParams.empty(channels, dtype)
                coll.moment_mode = Scope.UNIVERSAL
        return coll

    @property
    def scale_per_domain(self):
        return self.scales is not None


def _check_domain(d, num_domains):
    if not isinstance(d, (int, np.integer)) or not 1 <= d <= num_domains:
        raise DomainIndexError(f"domain id {d} outside 1..{num_domains}")


def mux(d, coll):
    """Select the scale (and moment, if any) parameter set for domain ``d``."""
    if coll.scales is not None or coll.moments is not None:
        _check_domain(d, coll.num_domains)
    scale = coll.scales[d - 1] if coll.scales is not None else coll.shared_scale
    if coll.moments is not None:
        moments = coll.moments[d - 1]
    else:
        moments = coll.shared_moments
    return scale, moments


# --------------------------------------------------------------------------- batch / instance norm


def _bn_stats(x, axes):
    mu = x.mean(axis=axes, keepdims=True, dtype=x.dtype)
    xc = x - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True, dtype=x.dtype)
    return mu, xc, var


def _normalize_forward(x, axes, eps):
    mu, xc, var = _bn_stats(x, axes)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = xc * inv_std
    return xhat, (xhat, inv_std, axes), mu, var


def _normalize_backward(cache, g):
    xhat, inv_std, axes = cache
    n = xhat.size // inv_std.size
    gsum = g.sum(axis=axes, keepdims=True)
    gxsum = (g * xhat).sum(axis=axes, keepdims=True)
    return (inv_std / n) * (n * g - gsum - xhat * gxsum)


_BN_AXES = (0, 1, 3)
_IN_AXES = (0, 1)


def batch_norm_forward(x, eps=EPS):
    """Normalize each channel by its batch mean/variance over rows, cols and instances."""
    y, _, mu, var = _normalize_forward(x, _BN_AXES, eps)
    return y, MomentParams(mu.reshape(-1).copy(), var.reshape(-1).copy(), 1)


def batch_norm_backward(x, upstream, eps=EPS):
    _, cache, _, _ = _normalize_forward(x, _BN_AXES, eps)
    return _normalize_backward(cache, upstream)


def instance_norm_forward(x, eps=EPS):
    """Normalize each (channel, instance) slice by its own spatial mean/variance."""
    return _normalize_forward(x, _IN_AXES, eps)[0]


def instance_norm_backward(x, upstream, eps=EPS):
    _, cache, _, _ = _normalize_forward(x, _IN_AXES, eps)
    return _normalize_backward(cache, upstream)


def frozen_norm_forward(x, moments, eps=EPS):
    if moments is None or moments.count < 1:
        raise UnfrozenMomentsError("frozen moments requested before any batch was accumulated")
    inv_std = (1.0 / np.sqrt(moments.sigma2 + eps)).astype(x.dtype, copy=False)
    inv_std = inv_std[None, None, :, None]
    return (x - moments.mu[None, None, :, None].astype(x.dtype, copy=False)) * inv_std, inv_std


# --------------------------------------------------------------------------- scaling


def scale_forward(x, p):
    if p.channels != x.shape[2]:
        raise DimensionError(f"scale has {p.channels} channels, input has {x.shape[2]}", axis="C")
    return x * p.s[None, None, :, None] + p.b[None, None, :, None]


def scale_backward(x, p, upstream):
    """Return ``(dx, ds, db)``."""
    ds = (upstream * x).sum(axis=_BN_AXES)
    db = upstream.sum(axis=_BN_AXES)
    return upstream * p.s[None, None, :, None], ds, db


# --------------------------------------------------------------------------- moments


def accumulate_moments(running, batch):
    """Fold one batch's moments into a running arithmetic mean (in place, also returned)."""
    if running.channels != batch.channels:
        raise DimensionError(f"moment length {running.channels} != batch length {batch.channels}", axis="C")
    n = running.count
    if n == 0:
        running.mu[...] = batch.mu
        running.sigma2[...] = batch.sigma2
    else:
        running.mu[...] = (n * running.mu + batch.mu) / (n + 1)
        running.sigma2[...] = (n * running.sigma2 + batch.sigma2) / (n + 1)
    running.count = n + 1
    return running


def deploy_fold(moments, scale, eps=EPS):
    """Collapse frozen normalization followed by scaling into one affine scaling."""
    if moments.count < 1:
        raise UnfrozenMomentsError("cannot fold moments that were never accumulated")
    inv = 1.0 / np.sqrt(moments.sigma2.astype(np.float64) + eps)
    s = scale.s.astype(np.float64) * inv
    b = scale.b.astype(np.float64) - scale.s.astype(np.float64) * moments.mu.astype(np.float64) * inv
    return ScaleParams(s.astype(scale.s.dtype), b.astype(scale.b.dtype))


# --------------------------------------------------------------------------- dispatch


@dataclass
class NormCache:
    kind: str
    xhat: np.ndarray
    norm_cache: tuple | None
    scale: ScaleParams
    batch_moments: MomentParams | None = None


def _batch_domain(d):
    """Reduce a domain tag (int or per-instance sequence) to a single id, or None if mixed."""
    if isinstance(d, (int, np.integer)):
        return int(d)
    ids = np.unique(np.asarray(d))
    return int(ids[0]) if ids.size == 1 else None


def normalize_forward(x, strategy, d, coll, mode="train", eps=EPS):
    """Normalization plus domain-muxed scaling; returns ``(y, NormCache)``.

    ``d`` is either one domain id or a per-instance sequence of ids; the latter
    is accepted only by instance normalization (and NONE) where purity does not matter.
    """
    if mode not in ("train", "test"):
        raise ConfigurationError(f"mode must be 'train' or 'test', got {mode!r}")
    single = _batch_domain(d)
    kind = strategy.kind
    if single is None:
        if kind in (NormKind.BN, NormKind.BN_PLUS):
            raise PurityError(f"{kind.value} requires a pure batch; got domains {sorted(set(np.asarray(d).tolist()))}")
        return _mixed_forward(x, strategy, np.asarray(d), coll, eps)

    scale, moments = mux(single, coll)
    batch_moments = None
    if kind is NormKind.NONE:
        xhat, cache = x, None
    elif kind is NormKind.IN:
        xhat, cache, _, _ = _normalize_forward(x, _IN_AXES, eps)
    elif kind is NormKind.BN_PLUS or mode == "train":
        xhat, cache, mu, var = _normalize_forward(x, _BN_AXES, eps)
        if kind is NormKind.BN:
            batch_moments = MomentParams(mu.reshape(-1).copy(), var.reshape(-1).copy(), 1)
    else:
        xhat, inv_std = frozen_norm_forward(x, moments, eps)
        cache = ("frozen", inv_std)
    y = scale_forward(xhat, scale)
    return y, NormCache(kind.value, xhat, cache, scale, batch_moments)


def normalize_backward(cache, upstream):
    """Return ``(dx, ds, db)`` for the scale in use."""
    dxhat, ds, db = scale_backward(cache.xhat, cache.scale, upstream)
    if cache.norm_cache is None:
        dx = dxhat
    elif isinstance(cache.norm_cache[0], str):
        dx = dxhat * cache.norm_cache[1]
    else:
        dx = _normalize_backward(cache.norm_cache, dxhat)
    return dx, ds, db


def normalize(x, strategy, d, coll, mode="train", eps=EPS):
    return normalize_forward(x, strategy, d, coll, mode, eps)[0]


def _mixed_forward(x, strategy, ids, coll, eps):
    if ids.shape != (x.shape[3],):
        raise DimensionError(f"need one domain tag per instance, got {ids.shape}", axis="T")
    xhat = x if strategy.kind is NormKind.NONE else _normalize_forward(x, _IN_AXES, eps)[0]
    y = np.empty_like(xhat)
    for t, dom in enumerate(ids):
        scale, _ = mux(int(dom), coll)
        y[:, :, :, t] = xhat[:, :, :, t] * scale.s + scale.b
    return y, None
