"""Token redundancy measurement: sampled similarity matrices and threshold sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tmfront.numerics import ShapeError, as_tensor, cosine_similarity_matrix

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class RedundancyReport:
    L: int
    thresholds: np.ndarray
    redundant_counts: np.ndarray
    max_similarities: np.ndarray
    resolution_label: str = ""

    def fractions(self) -> np.ndarray:
        return self.redundant_counts / self.L


def similarity_matrix(tokens, sample: Optional[int] = None, seed: Optional[int] = None) -> np.ndarray:
    """Cosine similarities of ``sample`` tokens drawn without replacement, kept in original order."""
    t = as_tensor(tokens)
    if t.ndim != 2:
        raise ShapeError(f"expected L x D tokens, got {t.shape}")
    if sample is not None:
        if not 1 <= sample <= t.shape[0]:
            raise ValueError(f"sample size {sample} outside [1, {t.shape[0]}]")
        idx = np.sort(np.random.default_rng(seed).choice(t.shape[0], size=sample, replace=False))
        t = t[idx]
    sim = cosine_similarity_matrix(t)
    np.fill_diagonal(sim, 1.0)
    return sim


def max_other_similarity(tokens) -> np.ndarray:
    t = as_tensor(tokens)
    if t.ndim != 2 or t.shape[0] < 2:
        raise ValueError("need at least two tokens")
    sim = cosine_similarity_matrix(t)
    np.fill_diagonal(sim, -np.inf)
    return sim.max(axis=1)


def redundancy_sweep(tokens, thresholds=DEFAULT_THRESHOLDS, resolution_label: str = "") -> RedundancyReport:
    """Count tokens whose best match among the others reaches each threshold (>=)."""
    th = np.asarray(thresholds, dtype=np.float64)
    if th.ndim != 1 or np.any(np.diff(th) < 0) or np.any((th <= 0) | (th > 1)):
        raise ValueError("thresholds must be ascending values in (0, 1]")
    ms = max_other_similarity(tokens)
    counts = (ms[None, :] >= th[:, None]).sum(axis=1).astype(np.int64)
    return RedundancyReport(len(ms), th, counts, ms, resolution_label)


def emit_report(report: RedundancyReport, path) -> None:
    """Write ``threshold,count,fraction`` rows, 4-decimal floats."""
    if np.any(np.diff(report.redundant_counts) > 0):
        raise RuntimeError("redundant counts increase with threshold; report is corrupt")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "count", "fraction"])
        for t, c in zip(report.thresholds, report.redundant_counts):
            w.writerow([f"{t:.4f}", int(c), f"{c / report.L:.4f}"])
