"""Image in, routed words out: the inference path shared by the CLI and the toy checks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .evaluate import EvalReport, evaluate_pairs
from .netgraph import INPUT_MULTIPLE, NetworkSpec, Widths, forward, preprocess
from .postproc import DetectedWord, assign_script, boxes_from_scores, expand_quad, unclip_ratio, words_from_script_map
from .scriptid import ScriptIdModel, reclassify_other

__all__ = ["TOY_WIDTHS", "TOY_STUDENT_WIDTHS", "pad_to_multiple", "words_from_loc_maps", "detect", "evaluate_detector"]

# desk-scale presets for 128 x 128 synthetic data
TOY_WIDTHS = Widths(16, ((16, 32), (32, 48), (48, 64), (64, 96)), 96, ((96, 48), (48, 32), (32, 24)), (16, 16, 8))
TOY_STUDENT_WIDTHS = Widths(8, ((8, 16), (16, 24), (24, 32), (32, 48)), 48, ((48, 24), (24, 16), (16, 12)), (12, 12, 8))


def pad_to_multiple(img: np.ndarray, m: int = INPUT_MULTIPLE) -> np.ndarray:
    """Zero-pad bottom/right so both extents are multiples of ``m``; pixel coordinates are unchanged."""
    h, w = img.shape[:2]
    ph, pw = -h % m, -w % m
    if not ph and not pw:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)))


def words_from_loc_maps(
    loc: np.ndarray,
    probs: np.ndarray,
    t_r: float = 0.5,
    t_a: float = 0.5,
    min_pixels: int = 4,
    scale: float = 2.0,
) -> list[DetectedWord]:
    """Words from (2, h', w') region/affinity maps, each labelled by the script-map vote."""
    out = []
    for comp in boxes_from_scores(loc[0], loc[1], t_r, t_a, scale):
        if len(comp.pixels) < min_pixels:
            continue
        q = comp.quad
        short = min(np.hypot(*(q[1] - q[0])), np.hypot(*(q[3] - q[0])))
        script, frac, flagged = assign_script(probs, q, scale)
        out.append(DetectedWord(expand_quad(q, unclip_ratio(t_r) * short), script, comp.confidence, frac, flagged))
    return out


def detect(
    net: NetworkSpec,
    image: np.ndarray,
    t_text: float = 0.5,
    min_pixels: int = 4,
    scriptid: ScriptIdModel | None = None,
    source: str = "script",
    t_r: float = 0.5,
    t_a: float = 0.5,
) -> list[DetectedWord]:
    """Detect words in one uint8 image; with ``scriptid`` the "other" words get a fine script.

    ``source="script"`` thresholds 1 - p(None) at ``t_text``; ``source="loc"``
    links region pixels above ``t_r`` through affinity above ``t_a``.
    """
    if source not in ("script", "loc"):
        raise ValueError(f"unknown detection source {source!r}")
    padded = pad_to_multiple(np.asarray(image, dtype=np.uint8))
    taps = ["conv2"] if scriptid is not None else []
    out = forward(net, preprocess(padded), "infer" if source == "script" else "train", capture=taps)
    probs = out.script_probs()[0]
    if source == "script":
        words = words_from_script_map(probs, t_text, min_pixels)
    else:
        words = words_from_loc_maps(out.loc.data[0], probs, t_r, t_a, min_pixels)
    if scriptid is not None:
        words = reclassify_other(words, out.taps["conv2"][0], scriptid)
    return words


def evaluate_detector(net: NetworkSpec, samples: Sequence, iou_thresh: float = 0.5, t_text: float = 0.5) -> EvalReport:
    """Pooled detection and script scores of ``net`` over annotated samples."""
    return evaluate_pairs([(detect(net, s.image, t_text), s.words) for s in samples], iou_thresh)
