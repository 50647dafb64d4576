"""Residual network blueprints, cross-domain parameter binding and the model forward/backward.

A model is one blueprint instantiated for D domains. Every trainable array
lives once in ``ParamBank.arrays``; a layer slot is bound either to a single
shared id (``"<slot>@*"``) or to one id per domain (``"<slot>@<d>"``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import normalization as nrm
from . import tensor as te
from .errors import ConfigurationError, DomainIndexError, LifecycleError
from .normalization import DomainParamCollections, NormStrategy, Scope

SHARED = "*"


# --------------------------------------------------------------------------- blueprint


@dataclass(frozen=True)
class Stage:
    size: int
    filters: int
    units: int


@dataclass(frozen=True)
class Blueprint:
    preset: str
    input_shape: tuple  # (H, W, C)
    stages: tuple
    norm_strategy: NormStrategy
    class_counts: tuple
    capacity_multiplier: int = 1
    stem_kernel: int = 3

    def __post_init__(self):
        sizes = [st.size for st in self.stages]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigurationError(f"stage spatial sizes must strictly decrease, got {sizes}")
        if any(st.units < 1 for st in self.stages):
            raise ConfigurationError("every stage needs at least one residual unit")
        if sizes[0] != self.input_shape[0] or sizes[0] != self.input_shape[1]:
            raise ConfigurationError(f"first stage size {sizes[0]} must match input {self.input_shape[:2]}")
        for a, b in zip(sizes, sizes[1:]):
            if a != 2 * b:
                raise ConfigurationError(f"stage sizes must halve, got {a} -> {b}")

    @property
    def filters(self):
        return tuple(st.filters for st in self.stages)

    @property
    def num_domains(self):
        return len(self.class_counts)


PRESETS = {
    # desk8 is a reduced scaling of the ResNet-38 layout for CPU-scale experiments.
    "desk8": dict(sizes=(16, 8), filters=(8, 16), units=2, channels=3),
    "resnet38": dict(sizes=(64, 32, 16, 8), filters=(16, 32, 128, 256), units=4, channels=3),
}


def build_blueprint(preset, capacity_multiplier=1, norm_strategy=None, class_counts=(10,), input_channels=None):
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if capacity_multiplier not in (1, 2, 4):
        raise ConfigurationError(f"capacity multiplier must be 1, 2 or 4, got {capacity_multiplier}")
    p = PRESETS[preset]
    stages = tuple(
        Stage(size, f * capacity_multiplier, p["units"]) for size, f in zip(p["sizes"], p["filters"])
    )
    c = input_channels or p["channels"]
    return Blueprint(
        preset=preset,
        input_shape=(p["sizes"][0], p["sizes"][0], c),
        stages=stages,
        norm_strategy=norm_strategy or NormStrategy(),
        class_counts=tuple(int(k) for k in class_counts),
        capacity_multiplier=capacity_multiplier,
    )


# --------------------------------------------------------------------------- sharing


class SharingMode(str, enum.Enum):
    NO = "none"
    FULL = "full"
    DEEP = "deep"
    PARTIAL = "partial"


@dataclass(frozen=True)
class SharingConfig:
    mode: SharingMode = SharingMode.DEEP
    shared_blocks: tuple = ()
    capacity_multiplier: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", SharingMode(self.mode))
        object.__setattr__(self, "shared_blocks", tuple(sorted(int(b) for b in self.shared_blocks)))
        if self.capacity_multiplier not in (1, 2, 4):
            raise ConfigurationError(f"capacity multiplier must be 1, 2 or 4, got {self.capacity_multiplier}")
        if self.mode is SharingMode.PARTIAL:
            blocks = self.shared_blocks
            if not blocks:
                raise ConfigurationError("partial sharing needs a non-empty shared block set")
            if list(blocks) != list(range(blocks[0], blocks[-1] + 1)):
                raise ConfigurationError(f"shared blocks must be contiguous, got {list(blocks)}")
            if blocks[0] < 1:
                raise ConfigurationError("block indices are 1-based")

    def violations(self, class_counts, num_stages=None):
        out = []
        if self.mode is SharingMode.FULL and len(set(class_counts)) > 1:
            out.append(f"full sharing requires equal class counts, got {list(class_counts)}")
        if self.mode is SharingMode.PARTIAL and num_stages is not None and self.shared_blocks[-1] > num_stages:
            out.append(f"shared block {self.shared_blocks[-1]} exceeds {num_stages} stages")
        return out

    def block_shared(self, block):
        if self.mode is SharingMode.NO:
            return False
        if self.mode is SharingMode.PARTIAL:
            return block in self.shared_blocks
        return True

    @property
    def head_shared(self):
        return self.mode is SharingMode.FULL

    @property
    def label(self):
        if self.mode is SharingMode.PARTIAL:
            b = self.shared_blocks
            name = f"partial (block {b[0]}-{b[-1]})"
        else:
            name = {"none": "no sharing", "full": "full", "deep": "deep"}[self.mode.value]
        if self.capacity_multiplier > 1:
            name += f" (x{self.capacity_multiplier} params)"
        return name


# --------------------------------------------------------------------------- layers


class Conv:
    def __init__(self, slot, block, k, cin, cout, stride=1, pad=None):
        self.slot, self.block = slot, block
        self.k, self.cin, self.cout, self.stride = k, cin, cout, stride
        self.pad = (k - 1) // 2 if pad is None else pad

    def params(self):
        return [(self.slot + ".w", (self.k, self.k, self.cin, self.cout), self.k * self.k * self.cin, "conv")]

    def forward(self, ctx, x):
        w = ctx.param(self.slot + ".w")
        zero = np.zeros(self.cout, dtype=x.dtype)
        return te.conv2d_forward(x, w, zero, self.stride, self.pad)

    def backward(self, ctx, cache, g):
        dx, dw, _ = te.conv2d_backward(cache, g)
        ctx.add_grad(self.slot + ".w", dw)
        return dx


class NormSite:
    def __init__(self, site, block, channels):
        self.site, self.block, self.channels = site, block, channels

    def forward(self, ctx, x):
        coll = ctx.model.bank.collections[self.site]
        strategy = ctx.model.blueprint.norm_strategy
        mode = ctx.mode
        if mode == "bn_plus":
            # test-time batch statistics regardless of frozen moments
            if strategy.kind is nrm.NormKind.BN:
                strategy = NormStrategy(nrm.NormKind.BN_PLUS, strategy.scale_scope, Scope.NONE)
            mode = "test"
        y, cache = nrm.normalize_forward(x, strategy, ctx.d, coll, mode, ctx.model.eps)
        if cache.batch_moments is not None:
            ctx.batch_moments[self.site] = cache.batch_moments
        return y, cache

    def backward(self, ctx, cache, g):
        dx, ds, db = nrm.normalize_backward(cache, g)
        ctx.add_grad(ctx.model.scale_id(self.site, ctx.d, "s"), ds)
        ctx.add_grad(ctx.model.scale_id(self.site, ctx.d, "b"), db)
        return dx


class Relu:
    def forward(self, ctx, x):
        return te.relu_forward(x)

    def backward(self, ctx, cache, g):
        return te.relu_backward(cache, g)


class Pool2:
    def forward(self, ctx, x):
        return te.avg_pool2_forward(x)

    def backward(self, ctx, cache, g):
        return te.avg_pool2_backward(cache, g)


class GlobalPool:
    def forward(self, ctx, x):
        return te.global_avg_pool_forward(x)

    def backward(self, ctx, cache, g):
        return te.global_avg_pool_backward(cache, g)


class Head:
    def __init__(self, features, class_counts):
        self.slot, self.block = "head", None
        self.features = features
        self.k = class_counts[0] if len(set(class_counts)) == 1 else None
        self.class_counts = class_counts

    def params_for(self, k):
        return [
            ("head.w", (k, self.features), self.features, "linear"),
            ("head.b", (k,), None, "bias"),
        ]

    def forward(self, ctx, x):
        w, b = ctx.param("head.w"), ctx.param("head.b")
        logits, cache = te.linear_forward(x, w, b)
        perm = ctx.model.class_perm.get(ctx.d)
        if perm is not None:
            logits = logits[:, :, perm, :]
        return logits, (cache, perm)

    def backward(self, ctx, cache, g):
        lin_cache, perm = cache
        if perm is not None:
            g_shared = np.zeros_like(g)
            g_shared[:, :, perm, :] = g
            g = g_shared
        dx, dw, db = te.linear_backward(lin_cache, g)
        ctx.add_grad("head.w", dw)
        ctx.add_grad("head.b", db)
        return dx


class ResidualUnit:
    """Pre-activation unit: (norm, relu, conv) twice plus identity or projection shortcut."""

    def __init__(self, prefix, block, cin, cout, downsample):
        self.prefix, self.block, self.downsample = prefix, block, downsample
        self.norm1 = NormSite(prefix + ".norm1", block, cin)
        self.conv1 = Conv(prefix + ".conv1", block, 3, cin, cout)
        self.norm2 = NormSite(prefix + ".norm2", block, cout)
        self.conv2 = Conv(prefix + ".conv2", block, 3, cout, cout)
        self.proj = Conv(prefix + ".proj", block, 1, cin, cout) if (downsample or cin != cout) else None

    def convs(self):
        return [c for c in (self.conv1, self.conv2, self.proj) if c is not None]

    def norms(self):
        return [self.norm1, self.norm2]

    def forward(self, ctx, x):
        a, c_n1 = self.norm1.forward(ctx, x)
        a, c_r1 = te.relu_forward(a)
        h, c_c1 = self.conv1.forward(ctx, a)
        c_p1 = None
        if self.downsample:
            h, c_p1 = te.avg_pool2_forward(h)
        h, c_n2 = self.norm2.forward(ctx, h)
        h, c_r2 = te.relu_forward(h)
        h, c_c2 = self.conv2.forward(ctx, h)
        c_sp = c_sc = None
        if self.proj is None:
            short = x
        else:
            s = a
            if self.downsample:
                s, c_sp = te.avg_pool2_forward(s)
            short, c_sc = self.proj.forward(ctx, s)
        return h + short, (c_n1, c_r1, c_c1, c_p1, c_n2, c_r2, c_c2, c_sp, c_sc)

    def backward(self, ctx, cache, g):
        c_n1, c_r1, c_c1, c_p1, c_n2, c_r2, c_c2, c_sp, c_sc = cache
        gh = self.conv2.backward(ctx, c_c2, g)
        gh = te.relu_backward(c_r2, gh)
        gh = self.norm2.backward(ctx, c_n2, gh)
        if self.downsample:
            gh = te.avg_pool2_backward(c_p1, gh)
        ga = self.conv1.backward(ctx, c_c1, gh)
        if self.proj is None:
            ga = te.relu_backward(c_r1, ga)
            return self.norm1.backward(ctx, c_n1, ga) + g
        gs = self.proj.backward(ctx, c_sc, g)
        if self.downsample:
            gs = te.avg_pool2_backward(c_sp, gs)
        ga = te.relu_backward(c_r1, ga + gs)
        return self.norm1.backward(ctx, c_n1, ga)


def build_layers(bp):
    """Layer graph for a blueprint: stem, residual units, final norm/relu, pool, head."""
    c_in = bp.input_shape[2]
    f0 = bp.stages[0].filters
    layers = [Conv("stem", 1, bp.stem_kernel, c_in, f0)]
    cin = f0
    for s, st in enumerate(bp.stages, start=1):
        for u in range(1, st.units + 1):
            down = s > 1 and u == 1
            layers.append(ResidualUnit(f"s{s}.u{u}", s, cin, st.filters, down))
            cin = st.filters
    layers.append(NormSite("final.norm", len(bp.stages), cin))
    layers.append(Relu())
    layers.append(GlobalPool())
    layers.append(Head(cin, bp.class_counts))
    return layers


# --------------------------------------------------------------------------- parameter bank and model


@dataclass
class ParamBank:
    arrays: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    domain_of: dict = field(default_factory=dict)
    collections: dict = field(default_factory=dict)

    def add(self, pid, array, kind, domain):
        self.arrays[pid] = array
        self.kinds[pid] = kind
        self.domain_of[pid] = domain

    def decayed(self, pid):
        return self.kinds[pid] in ("conv", "linear")

    def count(self, kinds=None):
        return int(sum(a.size for pid, a in self.arrays.items() if kinds is None or self.kinds[pid] in kinds))

    def moment_collections(self):
        for site, coll in self.collections.items():
            if coll.moments is not None:
                for d, m in enumerate(coll.moments, start=1):
                    yield site, d, m
            elif coll.shared_moments is not None:
                yield site, SHARED, coll.shared_moments


class _Ctx:
    def __init__(self, model, d, mode):
        self.model, self.d, self.mode = model, d, mode
        self.grads = None
        self.batch_moments = {}

    def param(self, slot):
        return self.model.bank.arrays[self.model.resolve(slot, self.d)]

    def add_grad(self, slot_or_id, g):
        pid = slot_or_id if "@" in slot_or_id else self.model.resolve(slot_or_id, self.d)
        if pid in self.grads:
            self.grads[pid] += g
        else:
            self.grads[pid] = g


@dataclass
class Tape:
    """Retained activations of one forward pass, consumed by :meth:`Model.backward_tape`."""

    d: int
    mode: str
    caches: list
    batch_moments: dict


@dataclass
class GradBank:
    grads: dict
    touched: set
    domain: int = 0

    def __getitem__(self, pid):
        return self.grads[pid]

    def touched_grads(self):
        return {pid: self.grads[pid] for pid in sorted(self.touched)}


class Model:
    def __init__(self, blueprint, sharing, dtype=None, eps=nrm.EPS):
        self.blueprint = blueprint
        self.eps = eps
        self.sharing = sharing
        self.num_domains = blueprint.num_domains
        self.dtype = np.dtype(dtype or te.default_dtype()).type
        self.layers = build_layers(blueprint)
        self.bank = ParamBank()
        self.binding = {}
        self.class_perm = {}
        self._tapes = {}

    # binding -----------------------------------------------------------------

    def resolve(self, slot, d):
        target = self.binding[slot]
        if target == SHARED:
            return f"{slot}@{SHARED}"
        if not isinstance(d, (int, np.integer)) or not 1 <= d <= self.num_domains:
            raise DomainIndexError(f"domain id {d} outside 1..{self.num_domains}")
        return f"{slot}@{d}"

    def scale_id(self, site, d, which):
        coll = self.bank.collections[site]
        return f"{site}.{which}@{d if coll.scale_per_domain else SHARED}"

    def slot_ids(self, slot):
        if self.binding[slot] == SHARED:
            return [f"{slot}@{SHARED}"]
        return [f"{slot}@{d}" for d in range(1, self.num_domains + 1)]

    def conv_layers(self):
        for layer in self.layers:
            if isinstance(layer, Conv):
                yield layer
            elif isinstance(layer, ResidualUnit):
                yield from layer.convs()

    def norm_sites(self):
        for layer in self.layers:
            if isinstance(layer, NormSite):
                yield layer
            elif isinstance(layer, ResidualUnit):
                yield from layer.norms()

    @property
    def head(self):
        return self.layers[-1]

    def parameter_count(self, kinds=None):
        return self.bank.count(kinds)

    # execution ---------------------------------------------------------------

    def _check_input(self, x, d):
        if not isinstance(d, (int, np.integer)) or not 1 <= d <= self.num_domains:
            raise DomainIndexError(f"domain id {d} outside 1..{self.num_domains}")
        h, w, c = self.blueprint.input_shape
        if x.ndim != 4 or x.shape[:3] != (h, w, c):
            raise te.DimensionError(f"input {x.shape} does not match blueprint {(h, w, c)} x T", axis="H")

    def forward_tape(self, x, d, mode="train"):
        """Forward pass that returns ``(logits, Tape)`` without touching model state.

        ``mode`` is ``"train"`` (batch statistics, moments reported), ``"test"``
        (frozen moments for BN) or ``"bn_plus"`` (batch statistics at test time).
        """
        if mode not in ("train", "test", "bn_plus"):
            raise ConfigurationError(f"unknown forward mode {mode!r}")
        self._check_input(x, d)
        ctx = _Ctx(self, int(d), mode)
        caches = []
        h = x
        for layer in self.layers:
            h, cache = layer.forward(ctx, h)
            caches.append(cache)
        return h, Tape(int(d), mode, caches, ctx.batch_moments)

    def backward_tape(self, tape, loss_grad):
        ctx = _Ctx(self, tape.d, tape.mode)
        ctx.grads = {}
        g = loss_grad
        for layer, cache in zip(reversed(self.layers), reversed(tape.caches)):
            g = layer.backward(ctx, cache, g)
        touched = set(ctx.grads)
        grads = {pid: ctx.grads.get(pid) for pid in self.bank.arrays}
        for pid, arr in self.bank.arrays.items():
            if grads[pid] is None:
                grads[pid] = np.zeros_like(arr)
            else:
                grads[pid] = grads[pid].astype(arr.dtype, copy=False)
        return GradBank(grads, touched, tape.d), g

    def forward(self, x, d, mode="train"):
        logits, tape = self.forward_tape(x, d, mode)
        self._tapes[int(d)] = tape
        return logits

    def backward(self, loss_grad, d):
        tape = self._tapes.pop(int(d), None)
        if tape is None:
            raise LifecycleError(f"backward for domain {d} called without a retained forward pass")
        return self.backward_tape(tape, loss_grad)[0]

    def input_gradient(self, x, d, loss_grad, mode="train"):
        _, tape = self.forward_tape(x, d, mode)
        return self.backward_tape(tape, loss_grad)[1]

    def batch_moments(self, d):
        tape = self._tapes.get(int(d))
        return {} if tape is None else tape.batch_moments


def apply_sharing(blueprint, sharing, num_domains=None, seed=0, dtype=None, pairing_seed=None, eps=nrm.EPS):
    """Instantiate ``blueprint`` for D domains with parameters bound per ``sharing``."""
    d_count = blueprint.num_domains if num_domains is None else num_domains
    if d_count != blueprint.num_domains:
        raise ConfigurationError(f"blueprint has {blueprint.num_domains} class counts for {d_count} domains")
    problems = sharing.violations(blueprint.class_counts, len(blueprint.stages))
    if problems:
        raise ConfigurationError("; ".join(problems))
    model = Model(blueprint, sharing, dtype, eps)
    dtype = model.dtype
    rng = np.random.default_rng(seed)
    bank = model.bank
    domains = range(1, d_count + 1)

    def add_weight(slot, shape, fan_in, kind, shared, per_domain_shape=None):
        model.binding[slot] = SHARED if shared else "domain"
        for d in ([SHARED] if shared else domains):
            shp = per_domain_shape(d) if per_domain_shape else shape
            if kind == "bias":
                arr = np.zeros(shp, dtype=dtype)
            else:
                arr = (rng.standard_normal(shp) * np.sqrt(2.0 / fan_in)).astype(dtype)
            bank.add(f"{slot}@{d}", arr, kind, None if d == SHARED else d)

    def shared_block(block):
        return d_count == 1 or sharing.block_shared(block)

    for conv in model.conv_layers():
        for slot, shape, fan_in, kind in conv.params():
            add_weight(slot, shape, fan_in, kind, shared_block(conv.block))

    strategy = blueprint.norm_strategy
    for site in model.norm_sites():
        force = not shared_block(site.block)
        coll = DomainParamCollections.create(site.channels, d_count, strategy, force_domain=force, dtype=dtype)
        bank.collections[site.site] = coll
        if coll.scales is not None:
            for d, p in enumerate(coll.scales, start=1):
                bank.add(f"{site.site}.s@{d}", p.s, "scale", d)
                bank.add(f"{site.site}.b@{d}", p.b, "shift", d)
        else:
            bank.add(f"{site.site}.s@{SHARED}", coll.shared_scale.s, "scale", None)
            bank.add(f"{site.site}.b@{SHARED}", coll.shared_scale.b, "shift", None)

    head = model.head
    shared_head = sharing.head_shared or d_count == 1
    ks = blueprint.class_counts
    for slot, _, fan_in, kind in head.params_for(ks[0]):
        if slot == "head.w":
            add_weight(slot, None, fan_in, kind, shared_head, lambda d: (ks[0 if d == SHARED else d - 1], head.features))
        else:
            add_weight(slot, None, fan_in, kind, shared_head, lambda d: (ks[0 if d == SHARED else d - 1],))

    if sharing.head_shared and d_count > 1:
        prng = np.random.default_rng(seed if pairing_seed is None else pairing_seed)
        for d in range(2, d_count + 1):
            model.class_perm[d] = prng.permutation(ks[0])
    return model
