"""Evaluation metrics: contains-accuracy, ANLS, entity F1, relaxed accuracy,
Trans/Pos text spotting and the next-token LM loss.

All text comparisons go through :func:`normalize_text`.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from tmfront.grounding import GroundedSpan, NormalizedBox, Point, Polygon, parse_grounded, strip_markup
from tmfront.numerics import ShapeError, as_tensor, log_softmax

ANLS_THRESHOLD = 0.5
RELAXED_TOLERANCE = 0.05
SPOTTING_IOU = 0.5

_STRIP = string.punctuation + string.whitespace


def normalize_text(s: str) -> str:
    """Case-fold, collapse whitespace runs, strip surrounding punctuation.

    ``casefold`` rather than ``lower``: lowercasing is context sensitive (a
    word-final sigma changes once text follows it), which would let appending
    text flip a contains-match.
    """
    return " ".join(s.casefold().split()).strip(_STRIP)


@dataclass
class EvalRecord:
    prediction: str
    ground_truths: list[str]
    boxes: Optional[list[NormalizedBox]] = None
    numeric: Optional[bool] = None
    id: Optional[str] = None

    def __post_init__(self):
        if not self.ground_truths:
            raise ValueError("EvalRecord needs at least one ground truth")


def _mean(scores: Sequence[float]) -> float:
    return float(np.mean(scores)) if len(scores) else 0.0


# -- VQA-style -------------------------------------------------------------


def contains_correct(record: EvalRecord) -> bool:
    pred = normalize_text(record.prediction)
    return any(normalize_text(gt) in pred for gt in record.ground_truths)


def contains_accuracy(records: Sequence[EvalRecord]) -> float:
    return _mean([float(contains_correct(r)) for r in records])


def edit_distance(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nls(pred: str, gt: str) -> float:
    """Normalised Levenshtein similarity before thresholding."""
    p, g = normalize_text(pred), normalize_text(gt)
    longest = max(len(p), len(g))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(p, g) / longest


def anls_record(record: EvalRecord, threshold: float = ANLS_THRESHOLD) -> float:
    best = 0.0
    for gt in record.ground_truths:
        s = nls(record.prediction, gt)
        best = max(best, s if s >= threshold else 0.0)
    return best


def anls(records: Sequence[EvalRecord], threshold: float = ANLS_THRESHOLD) -> float:
    return _mean([anls_record(r, threshold) for r in records])


def _to_number(s: str) -> Optional[float]:
    t = s.strip().replace(",", "")
    if t.endswith("%"):
        t = t[:-1]
    try:
        v = float(t)
    except ValueError:
        return None
    return v if np.isfinite(v) else None


def relaxed_correct(record: EvalRecord, tolerance: float = RELAXED_TOLERANCE) -> bool:
    for gt in record.ground_truths:
        g = _to_number(gt)
        numeric = record.numeric if record.numeric is not None else g is not None
        if numeric and g is not None:
            p = _to_number(record.prediction)
            if p is not None and abs(p - g) <= tolerance * abs(g):
                return True
        elif normalize_text(record.prediction) == normalize_text(gt):
            return True
    return False


def relaxed_accuracy(records: Sequence[EvalRecord], tolerance: float = RELAXED_TOLERANCE) -> float:
    return _mean([float(relaxed_correct(r, tolerance)) for r in records])


def entity_f1(predicted, gt) -> tuple[float, float, float]:
    """Entity-level exact-match precision, recall and F1 over (key, value) pairs."""
    p = Counter((normalize_text(k), normalize_text(v)) for k, v in predicted)
    g = Counter((normalize_text(k), normalize_text(v)) for k, v in gt)
    n_p, n_g = sum(p.values()), sum(g.values())
    if n_p == 0 and n_g == 0:
        return 1.0, 1.0, 1.0
    tp = sum((p & g).values())
    precision = tp / n_p if n_p else 0.0
    recall = tp / n_g if n_g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# -- text spotting ---------------------------------------------------------


@dataclass
class GTWord:
    word: str
    box: NormalizedBox

    def __post_init__(self):
        w = normalize_text(self.word)
        if not w or len(w.split()) != 1:
            raise ValueError(f"ground-truth word {self.word!r} must be a single non-empty word")


@dataclass
class SpottingInstance:
    """A predicted paragraph (optionally with grounding markup) and its GT words."""

    predicted_text: str
    gt_words: list[GTWord] = field(default_factory=list)

    def predicted_spans(self) -> list[GroundedSpan]:
        return parse_grounded(self.predicted_text)


def _word_counter(text: str) -> Counter:
    words = (normalize_text(w) for w in text.split())
    return Counter(w for w in words if w)


def spotting_trans(instance: SpottingInstance) -> float:
    """Fraction of GT words found in the prediction, each occurrence used once."""
    if not instance.gt_words:
        return 0.0
    available = _word_counter(strip_markup(instance.predicted_text))
    hit = 0
    for gw in instance.gt_words:
        w = normalize_text(gw.word)
        if available[w] > 0:
            available[w] -= 1
            hit += 1
    return hit / len(instance.gt_words)


def _as_box(loc) -> Optional[NormalizedBox]:
    if isinstance(loc, NormalizedBox):
        return loc
    if isinstance(loc, Polygon):
        return loc.bounding_box()
    if isinstance(loc, Point):
        return NormalizedBox(loc.x, loc.y, loc.x, loc.y)
    return None


def box_iou(a: NormalizedBox, b: NormalizedBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def spotting_pos(instance: SpottingInstance, iou_threshold: float = SPOTTING_IOU) -> float:
    """Greedy one-to-one matching on equal normalised text and IoU >= threshold."""
    if not instance.gt_words:
        return 0.0
    preds = [(normalize_text(s.text), _as_box(s.location)) for s in instance.predicted_spans()]
    used = [False] * len(preds)
    hit = 0
    for gw in instance.gt_words:
        w = normalize_text(gw.word)
        for i, (text, box) in enumerate(preds):
            if used[i] or box is None or text != w:
                continue
            if box_iou(box, gw.box) >= iou_threshold:
                used[i] = True
                hit += 1
                break
    return hit / len(instance.gt_words)


# -- language modelling ----------------------------------------------------


def lm_loss(logits, targets) -> float:
    """Mean next-token negative log-likelihood."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} do not align")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ValueError("targets must be integer indices")
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise IndexError(f"target index out of range [0, {logits.shape[1]})")
    lp = log_softmax(logits)
    return float(-np.mean(lp[np.arange(len(targets)), targets]))
