"""Central finite-difference oracle for hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradcheckReport:
    name: str
    tol: float
    max_rel_error: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def flagged(self):
        return [k for k, v in self.max_rel_error.items() if not v <= self.tol]

    @property
    def ok(self):
        return self.failure is None and not self.flagged

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        detail = self.failure or ", ".join(f"{k}={v:.2e}" for k, v in self.max_rel_error.items())
        return f"{status} {self.name:<28} tol={self.tol:.0e}  {detail}"


def relative_error(analytic, numeric):
    """Norm-based relative error; two all-zero gradients compare as 0."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f, inputs, slot, h, entries=None):
    """Central differences of ``f`` w.r.t. ``inputs[slot]`` at the flat positions ``entries`` (all by default)."""
    x = inputs[slot]
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(inputs)
        flat[i] = orig - h
        fm = f(inputs)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective perturbing {slot}[{i}]")
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def finite_difference_check(f, inputs, analytic, h=1e-3, tol=1e-4, name="op", max_entries=None, seed=0):
    """Compare analytic gradients of a scalar ``f(inputs)`` against central differences.

    ``inputs`` maps slot names to arrays (perturbed in place and restored);
    ``analytic`` maps the same names to the gradients under test. With
    ``max_entries`` only that many seeded random positions per slot are probed.
    """
    report = GradcheckReport(name=name, tol=tol)
    rng = np.random.default_rng(seed)
    for slot, grad in analytic.items():
        size = inputs[slot].size
        entries = None
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.choice(size, max_entries, replace=False))
        try:
            numeric = numeric_gradient(f, inputs, slot, h, entries)
        except FloatingPointError as exc:
            report.failure = f"oracle failure: {exc}"
            return report
        a = np.asarray(grad, dtype=np.float64).reshape(-1)
        n = numeric.reshape(-1)
        if entries is not None:
            a, n = a[entries], n[entries]
        report.max_rel_error[slot] = relative_error(a, n)
    return report


def projection_objective(forward, weights):
    """Scalar objective sum(forward(inputs) * weights) reduced in 64-bit."""
    w64 = [np.asarray(w, dtype=np.float64) for w in weights]

    def f(inputs):
        out = forward(inputs)
        if not isinstance(out, tuple):
            out = (out,)
        return float(sum(np.sum(o.astype(np.float64) * w) for o, w in zip(out, w64)))

    return f


# --------------------------------------------------------------------------- layer suite
#
# Analytic gradients are computed at the requested storage dtype; the oracle
# re-evaluates the same function on 64-bit copies so that its own rounding
# stays far below the tolerance.

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


def _away_from_zero(rng, shape, low=0.2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < low, np.sign(x + 1e-12) * low, x)


def _layer_check(name, forward, backward, inputs, dtype, seed, h=1e-6, tol=LAYER_TOL):
    """``forward(**inputs) -> out``; ``backward(inputs, upstream) -> {slot: grad}``."""
    rng = np.random.default_rng([seed, 17])
    lo = {k: v.astype(dtype) for k, v in inputs.items()}
    out = forward(**lo)
    upstream = rng.standard_normal(out.shape)
    analytic = backward(lo, upstream.astype(dtype))
    hi = {k: v.astype(np.float64) for k, v in inputs.items()}
    f = projection_objective(lambda d: forward(**d), [upstream])
    return finite_difference_check(f, hi, analytic, h=h, tol=tol, name=name)


def layer_reports(dtype=np.float32, seed=0):
    """Finite-difference reports for every primitive layer type."""
    from . import normalization as nrm
    from . import tensor as te

    rng = np.random.default_rng(seed)
    reports = []

    def conv_case(name, shape, k, cout, stride, pad):
        inputs = {
            "x": rng.standard_normal(shape),
            "w": rng.standard_normal((k, k, shape[2], cout)) * 0.5,
            "b": rng.standard_normal(cout),
        }

        def back(d, g):
            _, cache = te.conv2d_forward(d["x"], d["w"], d["b"], stride, pad)
            dx, dw, db = te.conv2d_backward(cache, g)
            return {"x": dx, "w": dw, "b": db}

        reports.append(_layer_check(name, lambda x, w, b: te.conv2d(x, w, b, stride, pad), back, inputs, dtype, seed))

    conv_case("conv 3x3 pad 1", (5, 5, 3, 2), 3, 4, 1, 1)
    conv_case("conv 3x3 stride 2", (7, 7, 2, 2), 3, 3, 2, 0)
    conv_case("conv 1x1", (4, 4, 3, 2), 1, 5, 1, 0)

    lin_in = {"x": rng.standard_normal((2, 2, 3, 3)), "w": rng.standard_normal((5, 12)) * 0.3,
              "b": rng.standard_normal(5)}

    def lin_back(d, g):
        _, cache = te.linear_forward(d["x"], d["w"], d["b"])
        dx, dw, db = te.linear_backward(cache, g)
        return {"x": dx, "w": dw, "b": db}

    reports.append(_layer_check("linear", lambda x, w, b: te.linear(x, w, b), lin_back, lin_in, dtype, seed))

    relu_in = {"x": _away_from_zero(rng, (3, 3, 2, 2))}
    reports.append(_layer_check(
        "relu", te.relu, lambda d, g: {"x": te.relu_backward(te.relu_forward(d["x"])[1], g)}, relu_in, dtype, seed))

    gp_in = {"x": rng.standard_normal((4, 3, 2, 2))}
    reports.append(_layer_check(
        "global average pool", te.global_avg_pool,
        lambda d, g: {"x": te.global_avg_pool_backward(d["x"].shape, g)}, gp_in, dtype, seed))

    ap_in = {"x": rng.standard_normal((4, 4, 2, 2))}
    reports.append(_layer_check(
        "average pool 2x2", lambda x: te.avg_pool2_forward(x)[0],
        lambda d, g: {"x": te.avg_pool2_backward(d["x"].shape, g)}, ap_in, dtype, seed))

    labels = rng.integers(0, 5, size=4)
    ce_in = {"z": rng.standard_normal((1, 1, 5, 4)) * 2}
    ce_lo = {"z": ce_in["z"].astype(dtype)}
    ce_grad = te.softmax_cross_entropy(ce_lo["z"], labels)[1]
    ce_hi = {"z": ce_in["z"].astype(np.float64)}
    reports.append(finite_difference_check(
        lambda d: te.softmax_cross_entropy(d["z"], labels)[0], ce_hi, {"z": ce_grad},
        h=1e-6, tol=LAYER_TOL, name="softmax cross-entropy"))

    bn_in = {"x": rng.standard_normal((3, 3, 2, 4)) * 2 + 1}
    reports.append(_layer_check(
        "batch norm", lambda x: nrm.batch_norm_forward(x)[0],
        lambda d, g: {"x": nrm.batch_norm_backward(d["x"], g)}, bn_in, dtype, seed))

    in_in = {"x": rng.standard_normal((3, 3, 2, 3)) * 2 - 1}
    reports.append(_layer_check(
        "instance norm", nrm.instance_norm_forward,
        lambda d, g: {"x": nrm.instance_norm_backward(d["x"], g)}, in_in, dtype, seed))

    sc_in = {"x": rng.standard_normal((3, 3, 4, 2)), "s": rng.standard_normal(4), "b": rng.standard_normal(4)}

    def sc_back(d, g):
        dx, ds, db = nrm.scale_backward(d["x"], nrm.ScaleParams(d["s"], d["b"]), g)
        return {"x": dx, "s": ds, "b": db}

    reports.append(_layer_check(
        "scale", lambda x, s, b: nrm.scale_forward(x, nrm.ScaleParams(s, b)), sc_back, sc_in, dtype, seed))
    return reports


def model_report(preset="desk8", dtype=np.float32, seed=0, num_classes=3, instances=2, max_entries=24,
                 norm_strategy=None, tol=MODEL_TOL):
    """Whole-model check: cross-entropy loss w.r.t. the input and a sample of every parameter array."""
    from . import tensor as te
    from .network import SharingConfig, apply_sharing, build_blueprint

    bp = build_blueprint(preset, 1, norm_strategy, (num_classes,))
    model = apply_sharing(bp, SharingConfig("deep"), seed=seed, dtype=dtype)
    rng = np.random.default_rng([seed, 29])
    # non-zero scale biases make the relu inputs generic
    for pid, arr in model.bank.arrays.items():
        if model.bank.kinds[pid] in ("shift", "bias"):
            arr[...] = rng.standard_normal(arr.shape) * 0.1
    x = rng.standard_normal(bp.input_shape + (instances,))
    labels = rng.integers(0, num_classes, size=instances)

    logits, tape = model.forward_tape(x.astype(dtype), 1, "train")
    _, g = te.softmax_cross_entropy(logits, labels)
    grads, dx = model.backward_tape(tape, g)
    analytic = {"input": dx, **{pid: grads[pid] for pid in sorted(model.bank.arrays)}}

    oracle = apply_sharing(bp, SharingConfig("deep"), seed=seed, dtype=np.float64)
    for pid, arr in model.bank.arrays.items():
        oracle.bank.arrays[pid][...] = arr
    hi = {"input": x.astype(np.float64), **oracle.bank.arrays}

    def f(d):
        out, _ = oracle.forward_tape(d["input"], 1, "train")
        return te.softmax_cross_entropy(out, labels)[0]

    return finite_difference_check(f, hi, analytic, h=1e-6, tol=tol, name=f"{preset} model",
                                   max_entries=max_entries, seed=seed)


def run_suite(preset="desk8", dtype=np.float32, seed=0):
    """Every layer report followed by the whole-model report."""
    return layer_reports(dtype, seed) + [model_report(preset, dtype, seed)]
