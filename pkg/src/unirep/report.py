"""Summary tables over metrics files, averaged across seeds, in the two standard layouts.

``norm`` layout: one row per normalization strategy, columns for the scale scope,
the moment scope and the mean error. ``sharing`` layout: one row per sharing
configuration, one column per domain plus the mean.
"""
from __future__ import annotations

from collections import defaultdict

from .experiment import read_metrics

NORM_ROWS = [
    ("BN", "universal", "universal"),
    ("BN+", "universal", "none"),
    ("BN", "universal", "domain"),
    ("BN", "domain", "domain"),
    ("IN", "universal", "none"),
    ("IN", "domain", "none"),
]

SHARING_ORDER = ["no sharing", "full", "deep", "partial", "deep (x2 params)", "deep (x4 params)"]


def load_summaries(paths):
    summaries = []
    for path in paths:
        recs = [r for r in read_metrics(path) if r.get("type") == "summary"]
        if not recs:
            raise ValueError(f"{path} has no summary record (run incomplete?)")
        summaries.append(recs[-1])
    return summaries


def _fmt(v):
    return "--" if v is None else f"{v:.1f}"


def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def norm_table(summaries):
    """Mean error per normalization strategy; rows without runs show ``--``."""
    groups = defaultdict(list)
    for s in summaries:
        n = s["norm"]
        groups[(n["kind"], n["scale_scope"], n["moment_scope"])].append(s["mean_error"])
    rows = []
    for key in NORM_ROWS + sorted(k for k in groups if k not in NORM_ROWS):
        vals = groups.get(key)
        kind, scale, moments = key
        rows.append([kind, scale, "--" if moments == "none" else moments,
                     _fmt(sum(vals) / len(vals) if vals else None), len(vals or [])])
    return _table(["normalization", "(s,b)", "(mu,sigma)", "mean error", "runs"], rows)


def sharing_table(summaries):
    """Per-domain and mean error per sharing configuration, averaged over runs."""
    groups = defaultdict(list)
    for s in summaries:
        groups[s["sharing"]].append(s)
    domains = []
    for s in summaries:
        domains.extend(d for d in s["domains"] if d not in domains)

    def order(label):
        base = label.split(" (block")[0]
        return (SHARING_ORDER.index(base) if base in SHARING_ORDER else len(SHARING_ORDER), label)

    rows = []
    for label in sorted(groups, key=order):
        runs = groups[label]
        row = [label]
        for d in domains:
            vals = [r["val_error"][d] for r in runs if d in r["val_error"]]
            row.append(_fmt(sum(vals) / len(vals) if vals else None))
        row.append(_fmt(sum(r["mean_error"] for r in runs) / len(runs)))
        rows.append(row)
    return _table(["sharing"] + domains + ["mean"], rows)


def report(paths, layout="sharing"):
    summaries = load_summaries(paths)
    if layout == "norm":
        return norm_table(summaries)
    if layout == "sharing":
        return sharing_table(summaries)
    raise ValueError(f"layout must be 'norm' or 'sharing', got {layout!r}")
