"""
Binary detection quality: confusion matrices, percentage rates kept as exact
fractions, ROC curves with their area, and the text/JSON report layouts.
"""
from dataclasses import (
    dataclass,
    replace,
)
from decimal import (
    Decimal,
)
from fractions import (
    Fraction,
)
from typing import (
    Any,
    Dict,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
from sklearn.metrics import (
    confusion_matrix,
    roc_auc_score,
    roc_curve,
)

from canids.constants import (
    DEFAULT_THRESHOLD,
)
from canids.exceptions import (
    SingleClassError,
    ValidationError,
)
from canids.utils.rounding import (
    round_half_away,
)
from canids.validation import (
    validate_not_empty,
    validate_same_length,
)

UNDEFINED = "undefined"
RATE_NAMES = ("precision", "recall", "f1", "fpr", "fnr")
TABLE_COLUMNS = ("Precision", "Recall", "F1", "FPR", "FNR")


class ConfusionMatrix(NamedTuple):
    tn: int
    fp: int
    fn: int
    tp: int

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


def _as_arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    validate_same_length(scores, labels, "scores", "labels")
    validate_not_empty(scores, "scores")
    score_array = np.asarray(scores, dtype=np.float64)
    label_array = np.asarray(labels).astype(np.int64)
    if not np.isin(label_array, (0, 1)).all():
        raise ValidationError("Labels must be 0 (normal) or 1 (attack)")
    return score_array, label_array


def confusion(
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: float = DEFAULT_THRESHOLD,
) -> ConfusionMatrix:
    """
    Count outcomes with Attack as the positive class. A score equal to the
    threshold is predicted Attack.
    """
    score_array, label_array = _as_arrays(scores, labels)
    predicted = (score_array >= threshold).astype(np.int64)
    counts = confusion_matrix(label_array, predicted, labels=[0, 1]).ravel()
    return ConfusionMatrix(*(int(count) for count in counts))


def _ratio(numerator: int, denominator: int) -> Optional[Fraction]:
    if denominator == 0:
        return None
    return Fraction(100 * numerator, denominator)


@dataclass(frozen=True)
class MetricsReport:
    """
    Rates are percentages held as exact fractions; ``None`` marks a rate whose
    denominator is zero. Display rounding never feeds back into these values.
    """

    confusion: ConfusionMatrix
    precision: Optional[Fraction]
    recall: Optional[Fraction]
    f1: Optional[Fraction]
    fpr: Optional[Fraction]
    fnr: Optional[Fraction]
    accuracy: Optional[Fraction]
    auc: Optional[float] = None

    def rounded(self, name: str) -> Optional[Decimal]:
        value = getattr(self, name)
        if value is None:
            return None
        return round_half_away(value)

    def display(self, name: str) -> str:
        value = self.rounded(name)
        return UNDEFINED if value is None else str(value)

    @property
    def undefined(self) -> Tuple[str, ...]:
        return tuple(
            name for name in RATE_NAMES + ("accuracy",) if getattr(self, name) is None
        )

    def as_dict(self) -> Dict[str, Any]:
        """
        JSON-ready form at full precision: floats alongside the exact fractions.
        """
        result: Dict[str, Any] = {"confusion": self.confusion._asdict()}
        for name in RATE_NAMES + ("accuracy",):
            value = getattr(self, name)
            result[name] = None if value is None else float(value)
            result[f"{name}_exact"] = None if value is None else str(value)
        result["auc"] = self.auc
        return result


def derive_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """
    precision = tp/(tp+fp), recall = tp/(tp+fn), f1 = 2PR/(P+R),
    fpr = fp/(fp+tn), fnr = fn/(fn+tp), all as percentages.
    """
    if any(count < 0 for count in cm):
        raise ValidationError(f"Confusion counts must be non-negative, got {cm}")
    if cm.total == 0:
        raise ValidationError("Cannot derive metrics from an all-zero confusion matrix")

    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricsReport(
        confusion=cm,
        precision=precision,
        recall=recall,
        f1=f1,
        fpr=_ratio(cm.fp, cm.fp + cm.tn),
        fnr=_ratio(cm.fn, cm.fn + cm.tp),
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
    )


class RocCurve(NamedTuple):
    points: Tuple[Tuple[float, float], ...]
    """
    (false positive rate, true positive rate), starting at (0, 0)
    """

    thresholds: Tuple[float, ...]
    """
    The distinct scores, descending; point i+1 predicts Attack for
    score >= thresholds[i]
    """

    auc: float


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """
    ROC curve over every distinct score, with its area by the trapezoidal
    rule. Equal scores form a single step, so the area matches the
    Mann-Whitney U statistic divided by n_pos * n_neg.

    :raises SingleClassError: unless both classes are present
    """
    score_array, label_array = _as_arrays(scores, labels)
    positives = int(label_array.sum())
    negatives = len(label_array) - positives
    if positives == 0 or negatives == 0:
        raise SingleClassError("ROC needs both normal and attack samples")

    fprs, tprs, cutoffs = roc_curve(label_array, score_array, drop_intermediate=False)
    # the first cutoff lies above every score and gives the (0, 0) point
    points = tuple((float(fpr), float(tpr)) for fpr, tpr in zip(fprs, tprs))
    thresholds = tuple(float(cutoff) for cutoff in cutoffs[1:])
    return RocCurve(points, thresholds, float(roc_auc_score(label_array, score_array)))


def mann_whitney_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Probability that a random attack sample outscores a random normal one,
    counting ties as one half.
    """
    score_array, label_array = _as_arrays(scores, labels)
    positive_scores = np.sort(score_array[label_array == 1])
    negative_scores = np.sort(score_array[label_array == 0])
    if len(positive_scores) == 0 or len(negative_scores) == 0:
        raise SingleClassError("Mann-Whitney U needs both classes")
    below = np.searchsorted(negative_scores, positive_scores, side="left")
    at_or_below = np.searchsorted(negative_scores, positive_scores, side="right")
    doubled_u = int(np.sum(below + at_or_below))
    return float(Fraction(doubled_u, 2 * len(positive_scores) * len(negative_scores)))


def evaluate_scores(
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: float = DEFAULT_THRESHOLD,
) -> MetricsReport:
    report = derive_metrics(confusion(scores, labels, threshold))
    try:
        curve = roc_auc(scores, labels)
    except SingleClassError:
        return report
    return replace(report, auc=curve.auc)


#
# Report emitters
#
def _align(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(row[column]) for row in rows) for column in range(len(rows[0]))]
    lines = [
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in rows
    ]
    return "\n".join(lines)


def format_metrics_table(rows: Sequence[Tuple[str, str, MetricsReport]]) -> str:
    """
    One line per (attack, model) pair with Precision/Recall/F1/FPR/FNR.
    """
    table = [("Attack", "Model") + TABLE_COLUMNS]
    for attack, model_name, report in rows:
        table.append(
            (attack, model_name) + tuple(report.display(name) for name in RATE_NAMES)
        )
    return _align(table)


def comparison_table(
    attacks: Mapping[str, Mapping[str, MetricsReport]],
    columns: Sequence[str] = ("Pre-Q", "BF", "AF"),
) -> str:
    """
    For each attack, every rate side by side across model variants, e.g.
    pre-quantization and post-quantization before/after fine-tuning.
    """
    header = ["Attack"]
    for title in TABLE_COLUMNS:
        header.extend(f"{title} {column}" for column in columns)
    table = [tuple(header)]
    for attack, reports in attacks.items():
        row = [attack]
        for name in RATE_NAMES:
            row.extend(
                reports[column].display(name) if column in reports else "-"
                for column in columns
            )
        table.append(tuple(row))
    return _align(table)


def confusion_table(matrices: Mapping[str, ConfusionMatrix]) -> str:
    table = [("Attack", "Message Type", "Predicted Normal", "Predicted Attack")]
    for attack, cm in matrices.items():
        table.append((attack, "True Normal", str(cm.tn), str(cm.fp)))
        table.append(("", "True Attack", str(cm.fn), str(cm.tp)))
    return _align(table)
