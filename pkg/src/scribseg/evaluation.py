"""Dice scoring and variant-comparison reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .util import UNKNOWN

log = logging.getLogger(__name__)

# Row order of the comparison table (weak variants first, upper bound last).
VARIANT_ORDER = [
    "base_no_recursion",
    "base",
    "sep_crf",
    "crf_rnn",
    "uncertainty",
    "sep_crf_and_unc",
    "crf_rnn_and_unc",
    "fully_supervised",
]

DISPLAY_NAMES = {
    "base_no_recursion": "Base (no recursion)",
    "base": "Base",
    "sep_crf": "Base + separate CRF",
    "crf_rnn": "Base + CRF-RNN",
    "uncertainty": "Base + uncertainty",
    "sep_crf_and_unc": "Base + sep. CRF & unc.",
    "crf_rnn_and_unc": "Base + CRF-RNN & unc.",
    "fully_supervised": "Fully supervised",
}


def dice(pred, gt, label):
    """2|A&B| / (|A|+|B|) for one label; both-empty counts as 1.0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    if (pred == UNKNOWN).any() or (gt == UNKNOWN).any():
        raise DataError("dice: UNKNOWN labels present")
    a = pred == label
    b = gt == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        log.info("dice: label %s absent from both maps, scoring 1.0", label)
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


@dataclass
class DiceReport:
    """Per-image Dice scores for one run of one variant."""

    variant: str
    per_image: np.ndarray  # (n_images, num_labels), label index = column

    @property
    def label_means(self):
        return self.per_image.mean(axis=0)

    @property
    def avg(self):
        """Unweighted mean over the foreground labels' means."""
        return float(self.label_means[1:].mean())


def score_predictions(variant, preds, masks, num_labels):
    scores = np.empty((len(preds), num_labels))
    for i, (p, g) in enumerate(zip(preds, masks)):
        for label in range(num_labels):
            scores[i, label] = dice(p, g, label)
    return DiceReport(variant=variant, per_image=scores)


def _grouped(reports):
    groups = {}
    for r in reports:
        groups.setdefault(r.variant, []).append(r)
    known = [v for v in VARIANT_ORDER if v in groups]
    extra = [v for v in groups if v not in VARIANT_ORDER]
    return [(v, groups[v]) for v in known + sorted(extra)]


def report_rows(reports):
    """Aggregate runs by variant: (variant, n, label_means, label_stds, avg)."""
    rows = []
    for variant, runs in _grouped(reports):
        per_run = np.stack([r.label_means for r in runs])  # (n_runs, L)
        means = per_run.mean(axis=0)
        stds = per_run.std(axis=0)
        avgs = np.array([r.avg for r in runs])
        rows.append((variant, len(runs), means, stds, float(avgs.mean()), float(avgs.std())))
    return rows


def format_report(reports):
    """Aligned text table, one row per variant, 3-decimal Dice."""
    rows = report_rows(reports)
    num_labels = rows[0][2].shape[0]
    header = ["Variant"] + [f"L{i}" for i in range(num_labels)] + ["Avg", "n"]
    lines = [header]
    for variant, n, means, _, avg, _ in rows:
        lines.append([DISPLAY_NAMES.get(variant, variant)]
                     + [f"{m:.3f}" for m in means] + [f"{avg:.3f}", str(n)])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = []
    for row in lines:
        out.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(out) + "\n"


def csv_report(reports):
    """Machine-readable rows: variant,label,dice_mean,dice_std,n ('avg' row included)."""
    out = ["variant,label,dice_mean,dice_std,n"]
    for variant, n, means, stds, avg, avg_std in report_rows(reports):
        for label, (m, s) in enumerate(zip(means, stds)):
            out.append(f"{variant},{label},{m!r},{s!r},{n}")
        out.append(f"{variant},avg,{avg!r},{avg_std!r},{n}")
    return "\n".join(out) + "\n"
