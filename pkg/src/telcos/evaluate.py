"""Detection precision / recall / H-mean under one-to-one IoU matching, plus script accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import convex_iou, polygon_area
from .groundtruth import Script

__all__ = ["Match", "EvalReport", "iou", "match_and_score", "script_accuracy", "evaluate_pairs"]

_CLASSES = (Script.LATIN, Script.CJK, Script.OTHER)


def iou(a, b) -> float:
    """Intersection over union of two convex quads; degenerate input gives 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if abs(polygon_area(a)) < 1e-12 or abs(polygon_area(b)) < 1e-12:
        return 0.0
    return convex_iou(a, b)


@dataclass
class Match:
    det: int
    gt: int
    iou: float
    det_script: Script
    gt_script: Script


@dataclass
class EvalReport:
    tp: int = 0
    n_det: int = 0
    n_gt: int = 0
    matches: list[Match] = field(default_factory=list)
    script_hits: dict[str, list[int]] = field(default_factory=lambda: {s.label: [0, 0] for s in _CLASSES})

    @property
    def precision(self) -> float:
        return self.tp / self.n_det if self.n_det else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else 0.0

    @property
    def hmean(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def script_accuracy(self) -> dict[str, float | None]:
        return {k: (c / n if n else None) for k, (c, n) in self.script_hits.items()}

    @property
    def overall_script_accuracy(self) -> float | None:
        c = sum(v[0] for v in self.script_hits.values())
        n = sum(v[1] for v in self.script_hits.values())
        return c / n if n else None

    def merge(self, other: "EvalReport") -> "EvalReport":
        hits = {k: [self.script_hits[k][0] + other.script_hits[k][0], self.script_hits[k][1] + other.script_hits[k][1]] for k in self.script_hits}
        return EvalReport(self.tp + other.tp, self.n_det + other.n_det, self.n_gt + other.n_gt, self.matches + other.matches, hits)

    def to_json(self) -> dict:
        acc = self.script_accuracy
        return {
            "precision": round(self.precision, 6),
            "recall": round(self.recall, 6),
            "hmean": round(self.hmean, 6),
            "tp": self.tp,
            "detections": self.n_det,
            "ground_truth": self.n_gt,
            "script_accuracy": {k: ("N/A" if v is None else round(v, 6)) for k, v in acc.items()},
            "matches": [[m.det, m.gt, round(m.iou, 6)] for m in self.matches],
        }

    def row(self, label: str = "") -> str:
        return f"{label}P {100 * self.precision:.1f}  R {100 * self.recall:.1f}  H {100 * self.hmean:.1f}"


def script_accuracy(matches: Sequence[Match]) -> dict[str, float | None]:
    """Per gt-class fraction of matched detections with the right script; absent classes give None."""
    hits = {s.label: [0, 0] for s in _CLASSES}
    for m in matches:
        h = hits[m.gt_script.label]
        h[0] += int(m.det_script == m.gt_script)
        h[1] += 1
    return {k: (c / n if n else None) for k, (c, n) in hits.items()}


def match_and_score(dets, gts, iou_thresh: float = 0.8, method: str = "greedy") -> EvalReport:
    """One-to-one matching; a pair counts only when IoU is strictly above ``iou_thresh``.

    ``dets`` and ``gts`` are sequences of objects with ``quad`` and ``script``.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError(f"IoU threshold must lie in (0, 1), got {iou_thresh}")
    table = np.array([[iou(d.quad, g.quad) for g in gts] for d in dets]).reshape(len(dets), len(gts))
    pairs: list[tuple[int, int]] = []
    if method == "greedy":
        cand = [(-table[i, j], i, j) for i, j in zip(*np.nonzero(table > iou_thresh))]
        used_d, used_g = set(), set()
        for _, i, j in sorted(cand):
            if i not in used_d and j not in used_g:
                used_d.add(i)
                used_g.add(j)
                pairs.append((int(i), int(j)))
    elif method == "hungarian":
        if table.size:
            valid = table > iou_thresh
            # lexicographic: maximize match count first, then total IoU
            rows, cols = linear_sum_assignment(np.where(valid, -(1.0 + table), 0.0))
            pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if valid[i, j]]
    else:
        raise ValueError(f"unknown matching method {method!r}")
    pairs.sort()
    matches = [Match(i, j, float(table[i, j]), dets[i].script, gts[j].script) for i, j in pairs]
    report = EvalReport(len(matches), len(dets), len(gts), matches)
    for m in matches:
        h = report.script_hits[m.gt_script.label]
        h[0] += int(m.det_script == m.gt_script)
        h[1] += 1
    return report


def evaluate_pairs(pairs, iou_thresh: float = 0.8, method: str = "greedy") -> EvalReport:
    """Pool (dets, gts) pairs over many images into one report."""
    total = EvalReport()
    for dets, gts in pairs:
        total = total.merge(match_and_score(dets, gts, iou_thresh, method))
    return total
