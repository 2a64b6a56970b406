"""Aggregation of run curves into comparison tables and SVG line charts."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from xml.sax.saxutils import escape

import numpy as np

# metric -> True if larger is better
METRICS = {
    "dual_reconstruction_batch": False,
    "dual_reconstruction": False,
    "token_accuracy": True,
    "marginal_kl": False,
    "mutual_information": True,
    "supervised": False,
}
PANELS = (
    ("dual_reconstruction_batch", "dual reconstruction loss (training batches)"),
    ("dual_reconstruction", "dual reconstruction loss (exact)"),
    ("token_accuracy", "token accuracy (test)"),
)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22")


class AggregationError(ValueError):
    pass


def final_metrics(rows) -> dict:
    """Last value of each (direction, loss) curve, averaged over directions per loss."""
    last = {}
    for r in rows:
        key = (r["loss_name"], r["direction"])
        if key not in last or r["step"] >= last[key][0]:
            last[key] = (r["step"], r["value"])
    per_loss = defaultdict(list)
    for (name, _), (_, v) in sorted(last.items()):
        per_loss[name].append(v)
    return {name: float(np.mean(v)) for name, v in per_loss.items() if name in METRICS}


def aggregate(records, grouping="strategy") -> list:
    """Per-group mean, min and max of each final metric, with the best group marked.

    ``records`` are dicts with ``strategy``, ``seed``, ``task`` and ``final``.
    """
    if not records:
        raise AggregationError("no runs found")
    tasks = {r.get("task") for r in records}
    if len(tasks) > 1:
        raise AggregationError(f"cannot aggregate runs of different tasks: {sorted(map(str, tasks))}")
    groups = defaultdict(list)
    for r in records:
        groups[r[grouping]].append(r)
    table = []
    for name in sorted(groups, key=_strategy_order):
        runs = groups[name]
        row = {grouping: name, "n_runs": len(runs), "seeds": sorted(r["seed"] for r in runs), "metrics": {}}
        for m in METRICS:
            vals = [r["final"][m] for r in runs if m in r["final"] and np.isfinite(r["final"][m])]
            if vals:
                row["metrics"][m] = {"mean": float(np.mean(vals)), "min": float(np.min(vals)),
                                     "max": float(np.max(vals)), "best": False}
        table.append(row)
    for m, larger in METRICS.items():
        cand = [(row["metrics"][m]["mean"], i) for i, row in enumerate(table) if m in row["metrics"]]
        if cand:
            best = max(cand)[0] if larger else min(cand)[0]
            for v, i in cand:
                table[i]["metrics"][m]["best"] = v == best
    return table


def _strategy_order(label):
    order = ["supervised", "BT", "IBT-batch", "IBT-epoch", "DualLearning", "ExactDualAscent"]
    head = next((i for i, k in enumerate(order) if str(label).startswith(k)), len(order))
    return head, str(label)


def table_csv(table, grouping="strategy") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([grouping, "metric", "mean", "min", "max", "best", "n_runs"])
    for row in table:
        for m, s in row["metrics"].items():
            w.writerow([row[grouping], m, repr(s["mean"]), repr(s["min"]), repr(s["max"]), int(s["best"]), row["n_runs"]])
    return buf.getvalue()


def mean_curves(rows, loss_name) -> dict:
    """strategy -> (steps, values): direction- then seed-averaged curve."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["loss_name"] == loss_name:
            acc[r["strategy"]][(r["seed"], r["step"])].append(r["value"])
    out = {}
    for strat, by in acc.items():
        per_step = defaultdict(list)
        for (_, step), vals in by.items():
            per_step[step].append(float(np.mean(vals)))
        steps = sorted(per_step)
        out[strat] = (np.array(steps), np.array([np.mean(per_step[s]) for s in steps]))
    return out


def _fmt(v):
    return f"{v:.4g}"


def svg_chart(rows, title="", panels=PANELS, width=360, height=260) -> str:
    """Side-by-side line-chart panels of seed-averaged curves, one line per strategy."""
    strategies = sorted({r["strategy"] for r in rows}, key=_strategy_order)
    color = {s: PALETTE[i % len(PALETTE)] for i, s in enumerate(strategies)}
    margin = dict(l=56, r=12, t=28, b=36)
    legend_h = 18 * ((len(strategies) + 2) // 3) + 10
    total_w = width * len(panels)
    total_h = height + legend_h + 24
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
           f'viewBox="0 0 {total_w} {total_h}" font-family="sans-serif" font-size="11">',
           f'<rect width="{total_w}" height="{total_h}" fill="white"/>',
           f'<text x="{total_w / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for k, (loss, label) in enumerate(panels):
        x0, y0 = k * width + margin["l"], 24 + margin["t"]
        pw, ph = width - margin["l"] - margin["r"], height - margin["t"] - margin["b"]
        curves = mean_curves(rows, loss)
        out.append(f'<text x="{x0 + pw / 2}" y="{y0 - 8}" text-anchor="middle">{escape(label)}</text>')
        out.append(f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
        if not curves:
            out.append(f'<text x="{x0 + pw / 2}" y="{y0 + ph / 2}" text-anchor="middle" fill="#888">no data</text>')
            continue
        xs = np.concatenate([c[0] for c in curves.values()])
        ys = np.concatenate([c[1] for c in curves.values()])
        xlo, xhi = float(xs.min()), float(xs.max())
        ylo, yhi = float(ys.min()), float(ys.max())
        if xhi == xlo:
            xhi = xlo + 1
        if yhi == ylo:
            yhi = ylo + 1
        pad = 0.05 * (yhi - ylo)
        ylo, yhi = ylo - pad, yhi + pad
        sx = lambda v: x0 + (v - xlo) / (xhi - xlo) * pw
        sy = lambda v: y0 + ph - (v - ylo) / (yhi - ylo) * ph
        for frac in (0.0, 0.5, 1.0):
            yv = ylo + frac * (yhi - ylo)
            xv = xlo + frac * (xhi - xlo)
            out.append(f'<text x="{x0 - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{_fmt(yv)}</text>')
            out.append(f'<text x="{sx(xv):.1f}" y="{y0 + ph + 14}" text-anchor="middle">{_fmt(xv)}</text>')
        out.append(f'<text x="{x0 + pw / 2}" y="{y0 + ph + 28}" text-anchor="middle">update</text>')
        for strat in strategies:
            if strat not in curves:
                continue
            st, val = curves[strat]
            pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(st, val))
            out.append(f'<polyline fill="none" stroke="{color[strat]}" stroke-width="1.5" points="{pts}"/>')
    ly = 24 + height
    for i, strat in enumerate(strategies):
        lx = 16 + (i % 3) * (total_w / 3)
        yy = ly + 18 * (i // 3)
        out.append(f'<line x1="{lx}" y1="{yy}" x2="{lx + 22}" y2="{yy}" stroke="{color[strat]}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 28}" y="{yy + 4}">{escape(strat)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
