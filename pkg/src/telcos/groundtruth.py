"""Region / affinity / script-class ground truth rendered at half resolution.

Each character quad receives a Gaussian bump warped into the quad through the
homography that maps the quad onto the centred unit square.  Affinity quads
join the upper and lower triangle centroids of neighbouring characters.  A
pixel takes its word's script class wherever max(region, affinity) exceeds
the script threshold; everywhere else it is class None.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .geometry import apply_homography, homography, polygon_area

log = logging.getLogger(__name__)

__all__ = [
    "Script",
    "CharBox",
    "WordAnnotation",
    "GroundTruthMaps",
    "gaussian_patch",
    "warp_gaussian_to_quad",
    "affinity_boxes",
    "render_ground_truth",
    "load_annotations",
    "save_annotations",
    "validate_annotation",
    "THETA_S",
    "SIGMA_FRAC",
]

THETA_S = 0.4
SIGMA_FRAC = 0.25
_UNIT = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])


class Script(IntEnum):
    LATIN = 0
    CJK = 1
    OTHER = 2
    NONE = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, s: str) -> "Script":
        try:
            return cls[s.upper()]
        except KeyError:
            raise ValueError(f"unknown script group {s!r}") from None


@dataclass
class CharBox:
    quad: np.ndarray

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=np.float64).reshape(4, 2)


@dataclass
class WordAnnotation:
    quad: np.ndarray
    script: Script
    chars: list[CharBox] = field(default_factory=list)
    text: str = ""
    fine_script: str | None = None

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=np.float64).reshape(4, 2)
        self.chars = [c if isinstance(c, CharBox) else CharBox(c) for c in self.chars]
        if not isinstance(self.script, Script):
            self.script = Script.parse(self.script)

    def to_json(self) -> dict:
        d = {
            "quad": _round(self.quad),
            "script": self.script.label,
            "chars": [_round(c.quad) for c in self.chars],
            "text": self.text,
        }
        if self.fine_script:
            d["fine_script"] = self.fine_script
        return d

    @classmethod
    def from_json(cls, d: dict) -> "WordAnnotation":
        return cls(d["quad"], Script.parse(d["script"]), d.get("chars", []), d.get("text", ""), d.get("fine_script"))

    def transformed(self, fn) -> "WordAnnotation":
        """Copy with every point mapped through ``fn`` (an (N, 2) -> (N, 2) map)."""
        return WordAnnotation(fn(self.quad), self.script, [CharBox(fn(c.quad)) for c in self.chars], self.text, self.fine_script)


def _round(q: np.ndarray) -> list[list[float]]:
    return [[round(float(x), 4), round(float(y), 4)] for x, y in q]


@dataclass
class GroundTruthMaps:
    region: np.ndarray  # (h/2, w/2)
    affinity: np.ndarray  # (h/2, w/2)
    script: np.ndarray  # (4, h/2, w/2) one-hot
    clipped: int = 0
    skipped: int = 0

    @property
    def script_index(self) -> np.ndarray:
        return self.script.argmax(axis=0)


# ---------------------------------------------------------------------------


def _gauss(u: np.ndarray, v: np.ndarray, sigma_frac: float) -> np.ndarray:
    return np.exp(-(u * u + v * v) / (2.0 * sigma_frac * sigma_frac))


def gaussian_patch(n: int, sigma_frac: float = SIGMA_FRAC) -> np.ndarray:
    """n x n isotropic Gaussian on coordinates spanning [-0.5, 0.5]."""
    if n < 3:
        raise ValueError(f"gaussian patch needs n >= 3, got {n}")
    t = (np.arange(n) - (n - 1) / 2) / (n - 1)  # exactly mirror-symmetric
    return _gauss(t[None, :], t[:, None], sigma_frac)


def warp_gaussian_to_quad(quad, canvas: np.ndarray, sigma_frac: float = SIGMA_FRAC) -> bool:
    """Max-blend a perspective-warped Gaussian into ``canvas`` in place.

    ``quad`` is in canvas pixel coordinates.  Returns False (and leaves the
    canvas untouched) for degenerate quads.
    """
    q = np.asarray(quad, dtype=np.float64)
    if abs(polygon_area(q)) < 1.0:
        return False
    try:
        h = homography(q, _UNIT)
    except np.linalg.LinAlgError:
        return False
    hgt, wid = canvas.shape
    x0 = max(int(np.floor(q[:, 0].min())), 0)
    x1 = min(int(np.ceil(q[:, 0].max())) + 1, wid)
    y0 = max(int(np.floor(q[:, 1].min())), 0)
    y1 = min(int(np.ceil(q[:, 1].max())) + 1, hgt)
    if x0 >= x1 or y0 >= y1:
        return True
    ys, xs = np.mgrid[y0:y1, x0:x1]
    pts = np.stack([xs + 0.5, ys + 0.5], axis=-1)
    uv = apply_homography(h, pts)
    u, v = uv[..., 0], uv[..., 1]
    inside = (np.abs(u) <= 0.5) & (np.abs(v) <= 0.5)
    val = np.where(inside, _gauss(u, v, sigma_frac), 0.0)
    sub = canvas[y0:y1, x0:x1]
    np.maximum(sub, val, out=sub)
    return True


def _triangle_centroids(quad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = quad.mean(axis=0)
    top = (quad[0] + quad[1] + c) / 3.0
    bottom = (quad[2] + quad[3] + c) / 3.0
    return top, bottom


def affinity_boxes(word: WordAnnotation) -> list[np.ndarray]:
    """One quad per adjacent character pair, linking their triangle centroids."""
    out = []
    for a, b in zip(word.chars, word.chars[1:]):
        ta, ba = _triangle_centroids(a.quad)
        tb, bb = _triangle_centroids(b.quad)
        out.append(np.array([ta, tb, bb, ba]))
    return out


def render_ground_truth(
    annotations: list[WordAnnotation],
    h: int,
    w: int,
    theta_s: float = THETA_S,
    sigma_frac: float = SIGMA_FRAC,
) -> GroundTruthMaps:
    """Render the three target maps for an h x w image at (h/2, w/2)."""
    if h % 32 or w % 32:
        raise ValueError(f"image extents must be multiples of 32, got {h}x{w}")
    hh, ww = h // 2, w // 2
    region = np.zeros((hh, ww))
    affinity = np.zeros((hh, ww))
    best = np.zeros((hh, ww))
    cls = np.full((hh, ww), int(Script.NONE), dtype=np.int64)
    clipped = skipped = 0
    for word in annotations:
        pts = np.concatenate([word.quad] + [c.quad for c in word.chars])
        if pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or pts[:, 0].max() > w or pts[:, 1].max() > h:
            clipped += 1
        wr = np.zeros((hh, ww))
        wa = np.zeros((hh, ww))
        for ch in word.chars:
            if not warp_gaussian_to_quad(ch.quad / 2.0, wr, sigma_frac):
                skipped += 1
        for aq in affinity_boxes(word):
            if not warp_gaussian_to_quad(aq / 2.0, wa, sigma_frac):
                skipped += 1
        np.maximum(region, wr, out=region)
        np.maximum(affinity, wa, out=affinity)
        score = np.maximum(wr, wa)
        win = score > best
        best[win] = score[win]
        cls[win] = int(word.script)
    cls[np.maximum(region, affinity) <= theta_s] = int(Script.NONE)
    if skipped:
        log.warning("skipped %d degenerate quads", skipped)
    script = np.zeros((4, hh, ww))
    np.put_along_axis(script, cls[None], 1.0, axis=0)
    return GroundTruthMaps(region, affinity, script, clipped, skipped)


# ---------------------------------------------------------------------------
# annotation files


def validate_annotation(doc: dict) -> None:
    """Raise ValueError unless ``doc`` follows the annotation schema."""

    def quad_ok(q):
        return isinstance(q, list) and len(q) == 4 and all(
            isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) for v in p) for p in q
        )

    if not isinstance(doc, dict) or not isinstance(doc.get("image"), str) or not isinstance(doc.get("words"), list):
        raise ValueError("annotation needs an 'image' string and a 'words' list")
    for i, w in enumerate(doc["words"]):
        if not quad_ok(w.get("quad")):
            raise ValueError(f"word {i}: 'quad' must be four [x, y] points")
        if w.get("script") not in ("latin", "cjk", "other"):
            raise ValueError(f"word {i}: script must be latin|cjk|other, got {w.get('script')!r}")
        if not isinstance(w.get("chars"), list) or not all(quad_ok(c) for c in w["chars"]):
            raise ValueError(f"word {i}: 'chars' must be a list of quads")
        if not isinstance(w.get("text", ""), str):
            raise ValueError(f"word {i}: 'text' must be a string")


def save_annotations(path, image: str, words: list[WordAnnotation]) -> None:
    doc = {"image": image, "words": [w.to_json() for w in words]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_annotations(path) -> tuple[str, list[WordAnnotation]]:
    doc = json.loads(Path(path).read_text())
    validate_annotation(doc)
    return doc["image"], [WordAnnotation.from_json(w) for w in doc["words"]]
