import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn import metrics

from .errors import DataError
from .siamese import LabeledPair, SiameseNet, best_threshold, pair_arrays, pair_energies

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    roc_points: List[Tuple[float, float]]
    auc: float
    pr_points: List[Tuple[float, float]]
    accuracy_at_threshold: float
    threshold: float
    table: pd.DataFrame = field(default_factory=pd.DataFrame, repr=False)
    positives: int = 0
    negatives: int = 0


def evaluate_scores(scores: Sequence[float], labels: Sequence[int]) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    positives = int(np.count_nonzero(labels == 1))
    negatives = int(np.count_nonzero(labels == 0))
    if positives == 0 or negatives == 0:
        raise DataError("siamese: evaluation needs both same-person and different-person pairs")

    # sklearn ranks higher scores as positive; lower energy means "same".
    fpr, tpr, thresholds = metrics.roc_curve(labels, -scores, pos_label=1, drop_intermediate=False)
    auc = float(metrics.auc(fpr, tpr))
    precision, recall, _ = metrics.precision_recall_curve(labels, -scores, pos_label=1)
    threshold, accuracy = best_threshold(scores, labels)

    # Energy thresholds for the ROC rows: "same" iff energy <= threshold.
    energy_thresholds = -thresholds
    true_positive = tpr * positives
    false_positive = fpr * negatives
    predicted = true_positive + false_positive
    row_precision = np.divide(true_positive, predicted, out=np.ones_like(predicted), where=predicted > 0)
    table = pd.DataFrame({
        "threshold": energy_thresholds,
        "fpr": fpr,
        "tpr": tpr,
        "precision": row_precision,
        "recall": tpr,
    })

    logger.info("Evaluated %d pairs: AUC %.4f, accuracy %.4f at %.4f",
                len(scores), auc, accuracy, threshold)
    return EvalReport(
        roc_points=list(zip(fpr.tolist(), tpr.tolist())),
        auc=auc,
        pr_points=list(zip(recall.tolist(), precision.tolist())),
        accuracy_at_threshold=accuracy,
        threshold=threshold,
        table=table,
        positives=positives,
        negatives=negatives,
    )


def eval_roc(net: SiameseNet, pairs: Sequence[LabeledPair]) -> EvalReport:
    first, second, labels = pair_arrays(pairs)
    return evaluate_scores(pair_energies(net, first, second), labels)
