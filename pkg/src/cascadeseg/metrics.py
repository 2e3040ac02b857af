"""Segmentation metrics (JA, DI, SE, SP, AC), evaluation and ablation reports.

All five metrics derive from pixel confusion counts with foreground = 1.
Ratios that come out 0/0 (a class absent from both masks) count as 1:
perfect agreement on an absent class. Reports average per-image metrics
(unweighted) and express values in percent with 2 decimals.
"""

from __future__ import annotations

import json
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .training import predict

METRIC_NAMES = ("JA", "DI", "SE", "SP", "AC")
VARIANT_ORDER = ("C", "CIFS", "C+DS", "CIFS+DS")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


MetricValues = namedtuple("MetricValues", ("ja", "di", "se", "sp", "ac"))


def _as_binary(mask, name):
    arr = np.asarray(mask.data if hasattr(mask, "data") else mask)
    if not np.isin(arr, (0, 1)).all():
        raise DataError(f"{name} mask is not binary")
    return arr.astype(bool)


def confusion(pred, gt):
    """Pixel-wise confusion counts between two binary masks."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: pred {p.shape} vs gt {g.shape}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num, den):
    return num / den if den > 0 else 1.0


def compute_metrics(c):
    """(JA, DI, SE, SP, AC) as fractions in [0, 1]; 0/0 ratios are 1."""
    if c.total <= 0:
        raise DataError("confusion counts cover zero pixels")
    return MetricValues(
        ja=_ratio(c.tp, c.tp + c.fn + c.fp),
        di=_ratio(2 * c.tp, 2 * c.tp + c.fn + c.fp),
        se=_ratio(c.tp, c.tp + c.fn),
        sp=_ratio(c.tn, c.tn + c.fp),
        ac=_ratio(c.tp + c.tn, c.total),
    )


def _percent(x):
    return round(100.0 * x, 2)


@dataclass
class MetricsReport:
    """Per-image metric rows plus dataset means, in percent (2 decimals)."""

    per_image: list  # dicts: id, JA, DI, SE, SP, AC
    means: dict  # JA, DI, SE, SP, AC

    def to_json_dict(self):
        return {"per_image": self.per_image, "means": self.means}

    def render_text(self):
        header = f"{'id':<16}" + "".join(f"{m:>8}" for m in METRIC_NAMES)
        lines = [header]
        for row in self.per_image:
            lines.append(
                f"{row['id']:<16}" + "".join(f"{row[m]:>8.2f}" for m in METRIC_NAMES)
            )
        lines.append(
            f"{'mean':<16}" + "".join(f"{self.means[m]:>8.2f}" for m in METRIC_NAMES)
        )
        return "\n".join(lines)


def report_from_values(values_by_id):
    """Build a MetricsReport from {id: MetricValues} (fractions in [0, 1])."""
    if not values_by_id:
        raise DataError("cannot report metrics for an empty dataset")
    per_image = []
    sums = np.zeros(5)
    for sample_id, vals in values_by_id.items():
        sums += np.asarray(vals, dtype=np.float64)
        row = {"id": sample_id}
        row.update({m: _percent(v) for m, v in zip(METRIC_NAMES, vals)})
        per_image.append(row)
    means = {m: _percent(v) for m, v in zip(METRIC_NAMES, sums / len(values_by_id))}
    return MetricsReport(per_image=per_image, means=means)


def evaluate(model, config, dataset, threshold=None):
    """Per-image predict -> threshold -> confusion -> metrics, then average."""
    if not dataset:
        raise DataError("cannot evaluate an empty dataset")
    thr = config.threshold if threshold is None else threshold
    values = {}
    for s in dataset:
        probs, _ = predict(model, config, s.image)
        pred = probs[-1].data >= thr
        values[s.id] = compute_metrics(confusion(pred, s.mask.data >= 0.5))
    return report_from_values(values)


# ---------------------------------------------------------------------------
# ablation


def variant_label(fusion_mode, deep_supervision):
    """Row label: C / CIFS, plus +DS when deep supervision is on."""
    if fusion_mode == "concat_input":
        base = "C"
    elif fusion_mode == "cifs":
        base = "CIFS"
    else:
        raise DataError(f"fusion mode {fusion_mode!r} has no ablation row")
    return (base + "+DS") if deep_supervision else base


@dataclass
class AblationTable:
    """Per-variant, per-seed metric means plus the seed-median row."""

    rows: dict  # label -> {"seeds": {seed: means dict}, "median": means dict}

    def to_json_dict(self):
        return {
            label: {
                "seeds": {str(seed): m for seed, m in row["seeds"].items()},
                "median": row["median"],
            }
            for label, row in self.rows.items()
        }

    def render_text(self):
        width = max(len(label) for label in self.rows) + 10
        header = f"{'Method':<{width}}" + "".join(f"{m:>8}" for m in METRIC_NAMES)
        lines = [header]
        for label in VARIANT_ORDER:
            row = self.rows[label]
            for seed, means in row["seeds"].items():
                lines.append(
                    f"{label + f' (seed {seed})':<{width}}"
                    + "".join(f"{means[m]:>8.2f}" for m in METRIC_NAMES)
                )
        lines.append("")
        lines.append(f"{'Method (median)':<{width}}" + "".join(f"{m:>8}" for m in METRIC_NAMES))
        for label in VARIANT_ORDER:
            means = self.rows[label]["median"]
            lines.append(
                f"{label:<{width}}" + "".join(f"{means[m]:>8.2f}" for m in METRIC_NAMES)
            )
        return "\n".join(lines)


def ablation_table(variant_runs, dataset):
    """Evaluate trained variants and lay the results out Table-style.

    ``variant_runs`` maps a variant label to a list of (seed, model, config)
    runs. All four labels (C, CIFS, C+DS, CIFS+DS) must be present.
    """
    missing = [label for label in VARIANT_ORDER if not variant_runs.get(label)]
    if missing:
        raise DataError(f"ablation variants missing trained runs: {missing}")
    rows = {}
    for label in VARIANT_ORDER:
        seeds = {}
        for seed, model, config in variant_runs[label]:
            seeds[seed] = evaluate(model, config, dataset).means
        stacked = np.array(
            [[m[name] for name in METRIC_NAMES] for m in seeds.values()]
        )
        median = {
            name: round(float(v), 2)
            for name, v in zip(METRIC_NAMES, np.median(stacked, axis=0))
        }
        rows[label] = {"seeds": seeds, "median": median}
    return AblationTable(rows=rows)


def write_report(report, json_path, text_path=None):
    """Write a report (MetricsReport or AblationTable) as JSON and text."""
    with open(json_path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(report.render_text() + "\n")
