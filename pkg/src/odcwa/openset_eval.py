"""Open-set detection metrics and cluster-validity indices.

Class codes follow the detection-dump convention: ``>= 0`` known class,
``-1`` background / no object, ``-2`` unknown.  The same codes are used for
predictions, where a scored detection is never background.

AP is all-point interpolated.  WI, AOSE and AP_U follow the usual open-set
detection protocol; matching of detections to objects is taken from each
record's ``matched`` flag.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BACKGROUND = -1
UNKNOWN = -2


@dataclass(frozen=True)
class DetectionRecord:
    id: str
    pred: int
    score: float
    gt: int
    matched: bool = True

    def __post_init__(self):
        if self.pred == BACKGROUND or self.pred < UNKNOWN:
            raise ValueError(f"invalid predicted class {self.pred} for a scored detection")
        if not math.isfinite(self.score):
            raise ValueError("score must be finite")

    @property
    def true_gt(self) -> int:
        """Ground truth as seen by the evaluator: unmatched detections hit background."""
        return self.gt if self.matched else BACKGROUND

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "pred": int(self.pred), "score": float(self.score), "gt": int(self.gt), "matched": bool(self.matched)}
        )


def read_dump(path) -> list[DetectionRecord]:
    """Load a JSON-lines detection dump with fields ``id, pred, score, gt, matched``."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            missing = {"id", "pred", "score", "gt", "matched"} - obj.keys()
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            records.append(
                DetectionRecord(str(obj["id"]), int(obj["pred"]), float(obj["score"]), int(obj["gt"]), bool(obj["matched"]))
            )
    return records


def write_dump(records: Iterable[DetectionRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def precision_recall_curve(
    records: Sequence[DetectionRecord], positive_classes, total_positives: int
) -> list[tuple[float, float, float]]:
    """Points ``(threshold, precision, recall)`` at each distinct score, best first.

    Only detections predicted as one of ``positive_classes`` take part; a
    detection is a true positive when it matched an object of the class it
    predicts.
    """
    if total_positives <= 0:
        raise ValueError("precision/recall needs at least one positive")
    positive = set(positive_classes)
    dets = [r for r in records if r.pred in positive]
    dets.sort(key=lambda r: -r.score)
    curve = []
    tp = fp = 0
    for k, r in enumerate(dets):
        if r.true_gt == r.pred:
            tp += 1
        else:
            fp += 1
        if k + 1 == len(dets) or dets[k + 1].score != r.score:
            curve.append((r.score, tp / (tp + fp), tp / total_positives))
    return curve


def average_precision(curve) -> float:
    """All-point interpolated AP: sum of recall steps times the precision envelope."""
    if not curve:
        return 0.0
    prec = np.array([0.0] + [c[1] for c in curve] + [0.0])
    rec = np.array([0.0] + [c[2] for c in curve] + [curve[-1][2]])
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    steps = np.flatnonzero(rec[1:] != rec[:-1])
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def class_ap(records, cls: int, total_positives: int) -> float:
    return average_precision(precision_recall_curve(records, [cls], total_positives))


def mean_ap_known(records, gt_counts: dict[int, int]) -> float:
    """Mean AP over known classes that have ground truth."""
    aps = [class_ap(records, c, n) for c, n in sorted(gt_counts.items()) if c >= 0 and n > 0]
    if not aps:
        raise ValueError("no known-class ground truth")
    return float(np.mean(aps))


def ap_unknown(records, total_unknown: int | None = None) -> float:
    """AP of the unknown class.  ``total_unknown`` defaults to the number of
    distinct matched unknown objects in ``records``."""
    if total_unknown is None:
        total_unknown = len({r.id for r in records if r.true_gt == UNKNOWN})
    if total_unknown <= 0:
        raise ValueError("AP_U undefined without unknown ground truth")
    return class_ap(records, UNKNOWN, total_unknown)


def _known_detection_counts(records, threshold: float) -> tuple[int, int, int]:
    tp = fp_known = fp_unknown = 0
    for r in records:
        if r.pred < 0 or r.score < threshold:
            continue
        g = r.true_gt
        if g == UNKNOWN:
            fp_unknown += 1
        elif g == r.pred:
            tp += 1
        else:
            fp_known += 1
    return tp, fp_known, fp_unknown


def wilderness_impact(records, threshold: float = 0.0) -> float:
    """``(P_K / P_{K u U} - 1) * 100`` for known-class detections scoring ``>= threshold``.

    ``P_K`` ignores detections that landed on unknown objects; ``P_{K u U}``
    counts them as errors.  Returns ``inf`` when every detection hit an
    unknown object.
    """
    tp, fp_k, fp_u = _known_detection_counts(records, threshold)
    if tp + fp_k + fp_u == 0:
        raise ValueError("WI undefined: no known-class detections above threshold")
    if tp + fp_k == 0:
        return math.inf
    # P_K / P_KU = (tp + fp_k + fp_u) / (tp + fp_k) when tp > 0; the count form
    # also covers tp == 0, where both precisions vanish
    return 100.0 * fp_u / (tp + fp_k)


def aose(records, threshold: float = 0.0) -> int:
    """Unknown objects detected as a known class with score ``>= threshold``, each counted once."""
    hit = {r.id for r in records if r.pred >= 0 and r.score >= threshold and r.true_gt == UNKNOWN}
    return len(hit)


def known_recall(records, threshold: float, total_known: int) -> float:
    tp, _, _ = _known_detection_counts(records, threshold)
    return tp / total_known if total_known else 0.0


def wi_operating_threshold(records, total_known: int, target_recall: float = 0.8) -> float:
    """Score threshold whose known-class recall is closest to ``target_recall``
    (the higher threshold on ties)."""
    scores = sorted({r.score for r in records if r.pred >= 0}, reverse=True)
    if not scores:
        raise ValueError("WI undefined: no known-class detections")
    best, best_gap = scores[0], math.inf
    for s in scores:
        gap = abs(known_recall(records, s, total_known) - target_recall)
        if gap < best_gap:
            best, best_gap = s, gap
    return best


# -- embedding geometry ----------------------------------------------------


def _group(embeddings, labels) -> tuple[np.ndarray, np.ndarray, list[int]]:
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("embeddings must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("embeddings must be finite")
    classes = sorted(set(y.tolist()))
    return X, y, classes


def compactness_ratio(embeddings, labels) -> float:
    """Mean per-class variance of member-to-centroid distances divided by the
    mean distance between class centroids."""
    X, y, classes = _group(embeddings, labels)
    if len(classes) < 2:
        raise ValueError("compactness ratio needs at least two classes")
    variances, centroids = [], []
    for c in classes:
        pts = X[y == c]
        if pts.shape[0] < 2:
            raise ValueError(f"class {c} needs at least two embeddings")
        mu = pts.mean(axis=0)
        centroids.append(mu)
        variances.append(np.var(np.linalg.norm(pts - mu, axis=1)))
    sep = [np.linalg.norm(a - b) for a, b in combinations(centroids, 2)]
    mean_sep = float(np.mean(sep))
    if mean_sep == 0.0:
        raise ValueError("class centroids coincide")
    return float(np.mean(variances) / mean_sep)


def _pairwise(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def dunn_index(X, y) -> float:
    X, y, classes = _group(X, y)
    D = _pairwise(X)
    same = y[:, None] == y[None, :]
    diam = max(float(D[np.ix_(y == c, y == c)].max()) for c in classes)
    sep = float(D[~same].min())
    if diam == 0.0:
        return math.inf
    return sep / diam


def calinski_harabasz_index(X, y) -> float:
    X, y, classes = _group(X, y)
    n, k = X.shape[0], len(classes)
    if n <= k:
        raise ValueError("Calinski-Harabasz needs more points than clusters")
    mu = X.mean(axis=0)
    between = within = 0.0
    for c in classes:
        pts = X[y == c]
        cm = pts.mean(axis=0)
        between += pts.shape[0] * float(np.sum((cm - mu) ** 2))
        within += float(np.sum((pts - cm) ** 2))
    if within == 0.0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def hubert_index(X, y) -> float:
    """Normalised Hubert Gamma: Pearson correlation over point pairs between
    their distance and the indicator that they sit in different clusters."""
    X, y, _ = _group(X, y)
    D = _pairwise(X)
    iu = np.triu_indices(X.shape[0], k=1)
    d = D[iu]
    apart = (y[:, None] != y[None, :])[iu].astype(np.float64)
    if d.std() == 0.0 or apart.std() == 0.0:
        raise ValueError("Hubert statistic undefined for constant distances or a single cluster")
    return float(np.corrcoef(d, apart)[0, 1])


def davies_bouldin_index(X, y) -> float:
    X, y, classes = _group(X, y)
    cents = np.array([X[y == c].mean(axis=0) for c in classes])
    scatter = np.array([np.linalg.norm(X[y == c] - cents[i], axis=1).mean() for i, c in enumerate(classes)])
    worst = []
    for i in range(len(classes)):
        ratios = []
        for j in range(len(classes)):
            if i == j:
                continue
            d = float(np.linalg.norm(cents[i] - cents[j]))
            if d == 0.0:
                raise ValueError("Davies-Bouldin undefined: coincident cluster centroids")
            ratios.append((scatter[i] + scatter[j]) / d)
        worst.append(max(ratios))
    return float(np.mean(worst))


def xie_beni_index(X, y) -> float:
    X, y, classes = _group(X, y)
    cents = np.array([X[y == c].mean(axis=0) for c in classes])
    within = sum(float(np.sum((X[y == c] - cents[i]) ** 2)) for i, c in enumerate(classes))
    min_sep = min(float(np.sum((a - b) ** 2)) for a, b in combinations(cents, 2))
    if min_sep == 0.0:
        raise ValueError("Xie-Beni undefined: coincident cluster centroids")
    return within / (X.shape[0] * min_sep)


def cluster_indices(embeddings, labels) -> dict[str, float]:
    """Dunn, Calinski-Harabasz, Hubert, Davies-Bouldin and Xie-Beni indices."""
    _, y, classes = _group(embeddings, labels)
    if len(classes) < 2:
        raise ValueError("cluster indices need at least two clusters")
    return {
        "DI": dunn_index(embeddings, labels),
        "CHI": calinski_harabasz_index(embeddings, labels),
        "HI": hubert_index(embeddings, labels),
        "DBI": davies_bouldin_index(embeddings, labels),
        "XBI": xie_beni_index(embeddings, labels),
    }


# -- metric output -----------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "infinite"
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(rows: Iterable[tuple[str, float | None, float]], path) -> None:
    """Write ``metric,threshold,value`` rows; ``None`` thresholds are left empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "threshold", "value"])
        for metric, thr, value in rows:
            w.writerow([metric, "" if thr is None else format_value(float(thr)), format_value(value)])


def score_records(records: Sequence[DetectionRecord], thresholds: Sequence[float] = (0.0, 0.5)) -> list[tuple]:
    """Every metric computable from a dump, as ``(metric, threshold, value)`` rows."""
    rows: list[tuple] = []
    gt_counts: dict[int, set] = {}
    for r in records:
        if r.matched and r.gt != BACKGROUND:
            gt_counts.setdefault(r.gt, set()).add(r.id)
    known_counts = {c: len(ids) for c, ids in gt_counts.items() if c >= 0}
    if known_counts:
        rows.append(("mAP_K", None, 100.0 * mean_ap_known(records, known_counts)))
    if UNKNOWN in gt_counts:
        rows.append(("AP_U", None, 100.0 * ap_unknown(records, len(gt_counts[UNKNOWN]))))
    for t in thresholds:
        try:
            rows.append(("WI", t, wilderness_impact(records, t)))
        except ValueError:
            pass
        rows.append(("AOSE", t, aose(records, t)))
    return rows


__all__ = [
    "BACKGROUND",
    "UNKNOWN",
    "DetectionRecord",
    "read_dump",
    "write_dump",
    "precision_recall_curve",
    "average_precision",
    "class_ap",
    "mean_ap_known",
    "ap_unknown",
    "wilderness_impact",
    "aose",
    "known_recall",
    "wi_operating_threshold",
    "compactness_ratio",
    "cluster_indices",
    "dunn_index",
    "calinski_harabasz_index",
    "hubert_index",
    "davies_bouldin_index",
    "xie_beni_index",
    "write_metrics_csv",
    "score_records",
    "Path",
]
