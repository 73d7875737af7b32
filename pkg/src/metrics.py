"""
Misprediction detection metrics.
"""
import numpy as np
from sklearn.metrics import roc_auc_score

from src.errors import ValidationError


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValidationError(f"{predictions.shape} predictions for {labels.shape} labels")
    if labels.size == 0:
        return None
    return float(np.mean(predictions == labels))


def misprediction_auroc(uncertainty_scores, wrong):
    """
    Probability that a wrong prediction gets a higher uncertainty than a correct
    one, ties counting one half.
    Returns None when every prediction is correct or every prediction is wrong.
    """
    scores = np.asarray(uncertainty_scores, dtype=np.float64)
    wrong = np.asarray(wrong, dtype=bool)
    if scores.shape != wrong.shape or scores.ndim != 1:
        raise ValidationError(f"Scores {scores.shape} and correctness flags {wrong.shape} must be 1-axis and aligned")

    num_wrong = int(wrong.sum())
    num_correct = len(wrong) - num_wrong
    if num_wrong == 0 or num_correct == 0:
        return None
    return float(roc_auc_score(wrong, scores))


def as_uncertainty(result):
    """
    Scores oriented so that higher means more likely wrong.
    """
    return -result.scores if result.is_confidence else result.scores
