"""Score maps to word boxes: threshold, connected components, rotated boxes, script vote."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import convex_hull, min_area_rect, points_in_convex, polygon_area
from .groundtruth import SIGMA_FRAC, THETA_S, Script

__all__ = [
    "DetectedWord",
    "Component",
    "boxes_from_scores",
    "assign_script",
    "route_words",
    "expand_quad",
    "unclip_ratio",
    "words_from_script_map",
    "save_detections",
    "load_detections",
    "draw_overlay",
    "COLORS",
]

COLORS = {Script.LATIN: (0, 255, 0), Script.CJK: (0, 0, 255), Script.OTHER: (255, 0, 0)}
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class DetectedWord:
    quad: np.ndarray  # (4, 2) full-resolution pixels
    script: Script
    confidence: float
    script_confidence: float = 1.0
    flagged: bool = False
    fine_script: str | None = None

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=np.float64).reshape(4, 2)
        if self.script == Script.NONE:
            raise ValueError("a detected word cannot carry the None class")

    def to_json(self) -> dict:
        d = {
            "quad": [[round(float(x), 3), round(float(y), 3)] for x, y in self.quad],
            "script": self.script.label,
            "confidence": round(float(self.confidence), 6),
        }
        if self.fine_script is not None:
            d["fine_script"] = self.fine_script
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DetectedWord":
        return cls(d["quad"], Script.parse(d["script"]), float(d.get("confidence", 1.0)), fine_script=d.get("fine_script"))


@dataclass
class Component:
    quad: np.ndarray  # min-area rectangle, full-resolution pixels
    confidence: float  # peak region score inside the component
    pixels: np.ndarray  # (K, 2) (row, col) indices at map resolution


def _component_quad(pixels: np.ndarray) -> np.ndarray:
    r, c = pixels[:, 0].astype(np.float64), pixels[:, 1].astype(np.float64)
    corners = np.concatenate([np.c_[c, r], np.c_[c + 1, r], np.c_[c + 1, r + 1], np.c_[c, r + 1]])
    return min_area_rect(convex_hull(corners))


def boxes_from_scores(region: np.ndarray, affinity: np.ndarray | None = None, t_r: float = 0.5, t_a: float = 0.5, scale: float = 2.0) -> list[Component]:
    """One rotated rectangle per 8-connected component of (region >= t_r) | (affinity >= t_a)."""
    region = np.asarray(region, dtype=np.float64)
    if affinity is not None and np.shape(affinity) != region.shape:
        raise ValueError(f"region {region.shape} and affinity {np.shape(affinity)} differ in shape")
    if not (0 < t_r < 1 and 0 < t_a < 1):
        raise ValueError(f"thresholds must lie in (0, 1), got {t_r}, {t_a}")
    mask = region >= t_r
    if affinity is not None:
        mask |= np.asarray(affinity) >= t_a
    labels, n = ndimage.label(mask, structure=_EIGHT)
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels), 1):
        sub = labels[sl] == k
        rr, cc = np.nonzero(sub)
        pix = np.c_[rr + sl[0].start, cc + sl[1].start]
        out.append(Component(_component_quad(pix) * scale, float(region[pix[:, 0], pix[:, 1]].max()), pix))
    return out


def assign_script(script_map: np.ndarray, quad, scale: float = 2.0) -> tuple[Script, float, bool]:
    """Majority vote of per-pixel arg-max classes inside ``quad``, ignoring None.

    ``script_map`` is (4, h', w') scores; ``quad`` is in full-resolution
    pixels (map pixel (i, j) has centre ((j + .5) * scale, (i + .5) * scale)).
    Returns (script, vote fraction, flagged); quads holding no text pixels
    fall back to Other with confidence 0 and are flagged.
    """
    q = np.asarray(quad, dtype=np.float64)
    if abs(polygon_area(q)) <= 0:
        raise ValueError("degenerate quad")
    _, h, w = script_map.shape
    m = q / scale
    x0, y0 = max(int(np.floor(m[:, 0].min())), 0), max(int(np.floor(m[:, 1].min())), 0)
    x1, y1 = min(int(np.ceil(m[:, 0].max())) + 1, w), min(int(np.ceil(m[:, 1].max())) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return Script.OTHER, 0.0, True
    ys, xs = np.mgrid[y0:y1, x0:x1]
    inside = points_in_convex(m, np.c_[xs.ravel() + 0.5, ys.ravel() + 0.5])
    cls = script_map[:, y0:y1, x0:x1].argmax(axis=0).ravel()[inside]
    votes = np.bincount(cls[cls != Script.NONE], minlength=3)[:3]
    if votes.sum() == 0:
        return Script.OTHER, 0.0, True
    best = int(votes.argmax())
    return Script(best), float(votes[best] / votes.sum()), False


def route_words(words: list[DetectedWord]) -> dict[str, list[DetectedWord]]:
    """Stable partition into latin / cjk / other; "other" feeds script identification."""
    out: dict[str, list[DetectedWord]] = {"latin": [], "cjk": [], "other": []}
    for wd in words:
        out[wd.script.label].append(wd)
    return out


def unclip_ratio(theta: float = THETA_S, sigma_frac: float = SIGMA_FRAC) -> float:
    """Per-side growth, as a fraction of the detected short side, that undoes level-set shrinkage.

    A character's Gaussian exceeds ``theta`` on the central fraction
    2 * sigma * sqrt(2 ln(1 / theta)) of its cell.
    """
    kept = 2.0 * sigma_frac * np.sqrt(2.0 * np.log(1.0 / theta))
    return float((1.0 / kept - 1.0) / 2.0)


def expand_quad(quad: np.ndarray, amount: float) -> np.ndarray:
    """Grow a rectangle outward by ``amount`` pixels on every side."""
    q = np.asarray(quad, dtype=np.float64)
    u = q[1] - q[0]
    v = q[3] - q[0]
    u /= max(np.hypot(*u), 1e-12)
    v /= max(np.hypot(*v), 1e-12)
    return q + amount * np.array([-u - v, u - v, u + v, -u + v])


def words_from_script_map(
    probs: np.ndarray,
    t_text: float = 0.5,
    min_pixels: int = 4,
    unclip: float | None = None,
    scale: float = 2.0,
) -> list[DetectedWord]:
    """Detect words from (4, h', w') class probabilities.

    The text mask is 1 - p(None); components smaller than ``min_pixels``
    are dropped; each rectangle grows by ``unclip`` times its short side.
    """
    text = 1.0 - probs[Script.NONE]
    unclip = unclip_ratio() if unclip is None else unclip
    out = []
    for comp in boxes_from_scores(text, None, t_text, 0.5, scale):
        if len(comp.pixels) < min_pixels:
            continue
        q = comp.quad
        short = min(np.hypot(*(q[1] - q[0])), np.hypot(*(q[3] - q[0])))
        q = expand_quad(q, unclip * short)
        script, frac, flagged = assign_script(probs, comp.quad, scale)
        out.append(DetectedWord(q, script, comp.confidence, frac, flagged))
    return out


def save_detections(path, words: list[DetectedWord]) -> None:
    Path(path).write_text(json.dumps([w.to_json() for w in words], indent=1, sort_keys=True) + "\n")


def load_detections(path) -> list[DetectedWord]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError(f"{path}: detection file must hold a JSON list")
    return [DetectedWord.from_json(d) for d in doc]


def draw_overlay(img: np.ndarray, words: list[DetectedWord]) -> np.ndarray:
    """Copy of ``img`` with each word outlined in its script colour."""
    out = np.array(img, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    for wd in words:
        color = COLORS[wd.script]
        for a, b in zip(wd.quad, np.roll(wd.quad, -1, axis=0)):
            n = int(np.ceil(np.hypot(*(b - a)))) * 2 + 2
            t = np.linspace(0.0, 1.0, n)[:, None]
            pts = np.floor(a + t * (b - a)).astype(int)
            ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
            out[pts[ok, 1], pts[ok, 0]] = color
    return out
