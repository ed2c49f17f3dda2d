"""Average precision, mAP and precision-recall curves

AP is non-interpolated and step-wise: tied scores form one threshold,
and AP = sum over thresholds of (recall gain) * (precision).
"""
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.metrics import average_precision_score, precision_recall_curve

from .conf import settings
from .exceptions import EvaluationError
from .labelspace import LabelState
from .model import predict
from .utils import write_json

logger = logging.getLogger(__name__)


def _binary(scores, labels, what):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise EvaluationError(f'{len(scores)} scores for {len(labels)} labels')
    if not labels.any():
        raise EvaluationError(f'{what} is undefined without positives')
    return scores, labels


def average_precision(scores, labels):
    scores, labels = _binary(scores, labels, 'average precision')
    return float(average_precision_score(labels, scores))


def pr_curve(scores, labels):
    """(recall, precision, threshold) per unique threshold, descending"""
    scores, labels = _binary(scores, labels, 'precision-recall curve')
    precision, recall, thresholds = precision_recall_curve(labels, scores)
    # thresholds ascend; the last (precision, recall) pair is the (1, 0) end point
    return [
        (float(r), float(p), float(s))
        for r, p, s in zip(recall[-2::-1], precision[-2::-1], thresholds[::-1])
    ]


def mean_pr_curve(curves, step=None):
    """Class average of interpolated precision on a fixed recall grid

    Interpolated precision at r is the best precision at any recall >= r.
    """
    step = step or settings.PR_GRID_STEP
    grid = np.round(np.arange(0.0, 1.0 + step / 2, step), 10)
    if not curves:
        return []
    rows = []
    for curve in curves:
        recall = np.array([point[0] for point in curve])
        precision = np.array([point[1] for point in curve])
        best = np.zeros(len(grid))
        for i, r in enumerate(grid):
            reached = precision[recall >= r - 1e-12]
            best[i] = reached.max() if len(reached) else 0.0
        rows.append(best)
    mean = np.mean(rows, axis=0)
    return [(float(r), float(p)) for r, p in zip(grid, mean)]


@dataclass
class EvalReport:
    per_class_ap: np.ndarray
    map: float
    pr_curves: dict
    n_examples_used: int
    filter_applied: bool
    undefined_classes: list = field(default_factory=list)
    mean_curve: list = field(default_factory=list)
    histogram: Optional[dict] = None

    def to_document(self):
        return {
            'map': None if math.isnan(self.map) else self.map,
            'per_class_ap': [None if math.isnan(ap) else float(ap) for ap in self.per_class_ap],
            'undefined_classes': list(self.undefined_classes),
            'n_examples_used': self.n_examples_used,
            'filter_applied': self.filter_applied,
            'pr_curves': {
                str(c): [list(point) for point in curve] for c, curve in self.pr_curves.items()
            },
            'mean_pr_curve': [list(point) for point in self.mean_curve],
            'score_histogram': self.histogram,
        }


def _evaluation_rows(dataset, filter_fully_labeled):
    if filter_fully_labeled:
        rows = np.nonzero(dataset.fully_labeled)[0]
    else:
        rows = np.arange(len(dataset))
    if not len(rows):
        raise EvaluationError(
            f'no examples to evaluate (filter_fully_labeled={filter_fully_labeled}, '
            f'examples={len(dataset)})'
        )
    return rows


def evaluate(params, dataset, filter_fully_labeled=True, histogram_bins=None):
    """Per-class AP and mAP of a model on a dataset

    Unknown entries (only present without the filter) are left out of the
    class they belong to.
    """
    rows = _evaluation_rows(dataset, filter_fully_labeled)
    scores = predict(params, dataset.features[rows])
    labels = np.asarray(dataset.label_matrix[rows])
    M = dataset.meta.M
    per_class = np.full(M, np.nan)
    curves = {}
    undefined = []
    for c in range(M):
        known = labels[:, c] != LabelState.UNKNOWN
        truth = labels[known, c] == LabelState.POSITIVE
        if not truth.any():
            undefined.append(c)
            continue
        per_class[c] = average_precision(scores[known, c], truth)
        curves[c] = pr_curve(scores[known, c], truth)
    if undefined:
        logger.info(f'classes without positives excluded count={len(undefined)}')
    if len(undefined) == M:
        logger.warning(f'no class has a positive example examples={len(rows)}')
        value = float('nan')
    else:
        value = float(np.nanmean(per_class))
    report = EvalReport(
        per_class_ap=per_class,
        map=value,
        pr_curves=curves,
        n_examples_used=int(len(rows)),
        filter_applied=bool(filter_fully_labeled),
        undefined_classes=undefined,
        mean_curve=mean_pr_curve(list(curves.values())),
    )
    if histogram_bins:
        report.histogram = _histogram(scores, labels, histogram_bins)
    return report


def _histogram(scores, labels, bins):
    edges = np.linspace(0.0, 1.0, bins + 1)
    positive, _ = np.histogram(scores[labels == LabelState.POSITIVE], bins=edges)
    negative, _ = np.histogram(scores[labels == LabelState.NEGATIVE], bins=edges)
    return {
        'edges': edges.tolist(),
        'positive': positive.tolist(),
        'negative': negative.tolist(),
        'log_positive': np.log10(1 + positive).tolist(),
        'log_negative': np.log10(1 + negative).tolist(),
    }


def score_histogram(params, dataset, bins=20, filter_fully_labeled=True):
    """Histograms of predicted probabilities on positive and negative entries"""
    rows = _evaluation_rows(dataset, filter_fully_labeled)
    scores = predict(params, dataset.features[rows])
    return _histogram(scores, np.asarray(dataset.label_matrix[rows]), bins)


def write_eval_artifacts(report, out_dir):
    """eval_report.json and pr_curves.csv (class, threshold, precision, recall)"""
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, 'eval_report.json'), report.to_document(), indent=2)
    with open(os.path.join(out_dir, 'pr_curves.csv'), 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['class', 'threshold', 'precision', 'recall'])
        for c in sorted(report.pr_curves):
            for recall, precision, threshold in report.pr_curves[c]:
                writer.writerow([c, repr(threshold), repr(precision), repr(recall)])
        # fixed recall grid, averaged over classes
        for recall, precision in report.mean_curve:
            writer.writerow(['mean', '', repr(precision), repr(recall)])
