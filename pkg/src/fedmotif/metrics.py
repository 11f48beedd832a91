"""Minority-class PR-AUC, macro aggregation, and the communication ratio.

PR-AUC is computed as average precision with tied scores collapsed into one
group evaluated at the group boundary.  That convention makes the constant
classifier score exactly the class prevalence, which is what lets prevalence
tables double as the always-positive baseline row.
"""

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional

import numpy as np

from .graph import TASKS


def average_precision(scores, labels) -> float:
    """AP of the positive class: sum over score groups of (R_k - R_{k-1}) * P_k.

    Ties are grouped: every row sharing a score enters the ranking at once.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    if scores.size == 0:
        raise ValueError("empty input")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ends = np.append(np.nonzero(np.diff(s))[0], s.size - 1)
    tp = np.cumsum(y)[ends]
    recall = tp / n_pos
    precision = tp / (ends + 1)
    return float(np.sum(np.diff(np.concatenate(([0.0], recall))) * precision))


def pr_auc(scores, labels) -> float:
    """Average precision of the minority class.

    When positives are the majority the problem is flipped (scores negated,
    labels inverted) so the reported number always ranks the rarer class.
    A tie in prevalence keeps the positive orientation.
    """
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("single-class labels, PR-AUC undefined")
    if 2 * n_pos <= labels.size:
        return average_precision(scores, labels)
    return average_precision(-np.asarray(scores, dtype=np.float64), ~labels)


@dataclass(frozen=True)
class TaskReport:
    task: str
    prevalence: float  # positives / total, regardless of orientation
    pr_auc_minority: Optional[float]
    n_pos: int
    n_neg: int
    reason: Optional[str] = None  # set when pr_auc_minority is absent

    def __post_init__(self):
        if self.pr_auc_minority is not None:
            if not 0.0 <= self.pr_auc_minority <= 1.0:
                raise ValueError(f"pr_auc {self.pr_auc_minority} outside [0, 1]")


def task_report(task: str, scores, labels) -> TaskReport:
    labels = np.asarray(labels, dtype=bool)
    n = labels.size
    n_pos = int(labels.sum())
    prevalence = n_pos / n
    if n_pos == 0 or n_pos == n:
        return TaskReport(task, prevalence, None, n_pos, n - n_pos, "single-class")
    return TaskReport(task, prevalence, pr_auc(scores, labels), n_pos, n - n_pos)


def evaluate(scores, labels) -> List[TaskReport]:
    """Per-task reports for score and label matrices with one column per task."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[1] != len(TASKS):
        raise ValueError(f"expected [n x {len(TASKS)}] score and label matrices")
    return [task_report(t, scores[:, j], labels[:, j]) for j, t in enumerate(TASKS)]


def macro(reports) -> Optional[float]:
    """Unweighted mean PR-AUC over the tasks where it is defined."""
    vals = [r.pr_auc_minority for r in reports if r.pr_auc_minority is not None]
    if not vals:
        return None
    return float(sum(vals) / len(vals))


def reports_to_csv(reports) -> str:
    lines = ["task,prevalence,pr_auc"]
    for r in reports:
        v = "" if r.pr_auc_minority is None else repr(r.pr_auc_minority)
        lines.append(f"{r.task},{r.prevalence!r},{v}")
    return "\n".join(lines) + "\n"


def comm_ratio(steps_per_epoch, layers, width, r_bar, n_params) -> Fraction:
    """Per-epoch wire volume of params-once-plus-embeddings relative to
    shipping the full parameter vector every step: 1/S + L*d*r_bar/P."""
    s, l, d, p = (int(steps_per_epoch), int(layers), int(width), int(n_params))
    r = Fraction(r_bar)
    if s < 1 or l < 1 or d < 1 or p < 1 or r <= 0:
        raise ValueError("all communication-ratio inputs must be positive")
    return Fraction(1, s) + Fraction(l * d) * r / p


@dataclass(frozen=True)
class CommReport:
    steps_per_epoch: int
    layers: int
    width: int
    n_params: int
    r_bar: Fraction  # mean remote embeddings per (client, layer, step)
    ratio: Fraction

    @classmethod
    def from_ledger(cls, ledger, steps_per_epoch, epochs, layers, n_params, num_clients):
        r_bar = Fraction(ledger.total_embeddings) / (
            epochs * steps_per_epoch * layers * num_clients
        )
        ratio = comm_ratio(steps_per_epoch, layers, ledger.d, r_bar, n_params)
        return cls(steps_per_epoch, layers, ledger.d, n_params, r_bar, ratio)

    def to_dict(self) -> dict:
        return {
            "steps_per_epoch": self.steps_per_epoch,
            "layers": self.layers,
            "width": self.width,
            "n_params": self.n_params,
            "r_bar": str(self.r_bar),
            "ratio": str(self.ratio),
            "ratio_float": float(self.ratio),
        }


def measured_volume_ratio(ledger, steps_per_epoch, epochs, n_params, num_clients) -> Fraction:
    """The same ratio assembled from raw ledger totals instead of the formula:
    (C*P + d * embeddings-per-epoch) / (S * C * P), all exact integers."""
    emb_per_epoch = Fraction(ledger.total_embeddings, epochs)
    num = num_clients * n_params + ledger.d * emb_per_epoch
    return num / (steps_per_epoch * num_clients * n_params)


def gap_stats(report) -> dict:
    """Summary numbers for a placeholder-gap report, for experiment output."""
    flagged = report.flagged_l2()
    unflagged = report.unflagged_l2()
    return {
        "max_abs": report.max_abs,
        "n_flagged": int(flagged.size),
        "n_unflagged": int(unflagged.size),
        "flagged_nonzero_fraction": report.flagged_nonzero_fraction,
        "unflagged_max": float(unflagged.max()) if unflagged.size else 0.0,
    }
