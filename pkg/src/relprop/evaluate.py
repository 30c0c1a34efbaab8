"""Faithfulness harness: pixel ranking, insertion/deletion curves, and the
conservation report.

A "pixel" is all three channels at one spatial location, perturbation writes
literal zeros in normalized space (the values the model actually consumes),
and curve areas use the trapezoidal rule over the inserted/deleted fraction,
which is exact for the piecewise-linear curve.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .forward import run_forward
from .image import ImageSample, format_float
from .lrp import AttributionMap, RelevanceState
from .model import ModelGraph

MODES = ("insertion", "deletion")


@dataclass
class EvalCurve:
    """Probability-vs-fraction curve with its trapezoidal area."""

    fractions: np.ndarray      # strictly increasing, 0 .. 1
    probabilities: np.ndarray  # class probability at each fraction
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(float(f), float(p)) for f, p in zip(self.fractions, self.probabilities)]


@dataclass
class ConservationRow:
    checkpoint: str
    sum_relevance: float
    p_c: float
    relative_deviation: float


@dataclass
class ConservationReport:
    rows: list[ConservationRow]

    @property
    def max_relative_deviation(self) -> float:
        return max((r.relative_deviation for r in self.rows), default=0.0)


def rank_pixels(amap: AttributionMap) -> np.ndarray:
    """All (row, col) positions, descending by attribution, ties row-major.

    Ranks the quantized map when present, else the raw map.
    """
    values = np.asarray(amap.values, dtype=np.float64)
    h, w = values.shape
    order = np.argsort(-values.ravel(), kind="stable")
    return np.stack([order // w, order % w], axis=1).astype(np.int64)


def perturb(sample: ImageSample, ranking: np.ndarray, n: int, mode: str) -> np.ndarray:
    """Keep (insertion) or zero (deletion) the top-n ranked pixels, in
    normalized space; the two modes are exact complements of each other.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = sample.normalized
    _, h, w = x.shape
    total = h * w
    if not 0 <= n <= total:
        raise ValueError(f"n must be in [0, {total}], got {n}")
    mask = np.zeros((h, w), dtype=bool)
    head = ranking[:n]
    mask[head[:, 0], head[:, 1]] = True
    keep = mask[None, :, :] if mode == "insertion" else ~mask[None, :, :]
    return np.where(keep, x, np.float32(0.0))


def _step_counts(total: int, steps: int) -> list[int]:
    ns = {int(np.floor(t * total / steps + 0.5)) for t in range(steps + 1)}
    ns.update((0, total))
    return sorted(ns)


def trapezoid_auc(fractions: np.ndarray, probabilities: np.ndarray) -> float:
    return float(np.trapezoid(np.asarray(probabilities, dtype=np.float64),
                              np.asarray(fractions, dtype=np.float64)))


def curve(graph: ModelGraph, sample: ImageSample, amap: AttributionMap,
          class_index: int, mode: str, steps: int = 100) -> EvalCurve:
    """Evaluate the insertion or deletion curve with one forward pass per step."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    ranking = rank_pixels(amap)
    total = ranking.shape[0]
    fractions, probabilities = [], []
    for n in _step_counts(total, steps):
        probs = run_forward(graph, perturb(sample, ranking, n, mode))
        fractions.append(n / total)
        probabilities.append(float(probs[class_index]))
    fr = np.asarray(fractions, dtype=np.float64)
    pr = np.asarray(probabilities, dtype=np.float64)
    return EvalCurve(fractions=fr, probabilities=pr, auc=trapezoid_auc(fr, pr))


def id_score(insertion: EvalCurve, deletion: EvalCurve) -> float:
    """Insertion area minus deletion area."""
    return float(insertion.auc - deletion.auc)


def conservation_report(state: RelevanceState, p_c: float) -> ConservationReport:
    """Per-checkpoint deviation of the relevance sum from the class probability."""
    rows = []
    for label, total in state.checkpoint_sums:
        dev = abs(total - p_c) / max(p_c, 1e-12)
        rows.append(ConservationRow(checkpoint=label, sum_relevance=total,
                                    p_c=float(p_c), relative_deviation=float(dev)))
    return ConservationReport(rows=rows)


def write_curve_csv(path: str | Path, curve_: EvalCurve) -> None:
    """CSV export: fraction,probability rows plus a trailing auc comment."""
    lines = ["fraction,probability"]
    lines += [f"{format_float(f)},{format_float(p)}" for f, p in curve_.points]
    lines.append(f"# auc={format_float(curve_.auc)}")
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")
