"""Contour-density driven synthetic scene text.

Backgrounds are median-blurred per channel, edge-detected, and split by a
quadtree on edge density.  Text is rendered only inside patches whose edge
density is under the placement threshold, through an exact homography, so
every character quad in the annotation is the image of its layout cell.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import apply_homography, homography
from .glyphs import FONT_ROWS, GlyphSet, get_glyph_set
from .groundtruth import WordAnnotation, save_annotations
from .imageio import ImageFormatError, read_image, resize_bilinear, write_ppm

log = logging.getLogger(__name__)

__all__ = [
    "Patch",
    "PatchGrid",
    "PlacementRequest",
    "median_blur_channelwise",
    "edge_map",
    "contour_density_patches",
    "place_text",
    "procedural_background",
    "generate_image",
    "GenConfig",
    "generate_dataset",
    "SPLIT_THRESHOLD",
    "PLACEMENT_THRESHOLD",
]

SPLIT_THRESHOLD = 0.02
PLACEMENT_THRESHOLD = 0.01
_RES = 4  # mask pixels per font unit
_TRANSFORMS = ("identity", "rotate", "affine", "perspective", "sine")


def median_blur_channelwise(img: np.ndarray, k: int) -> np.ndarray:
    """k x k median per channel with edge replication."""
    if k < 3 or k % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 3, got {k}")
    return ndimage.median_filter(img, size=(k, k, 1), mode="nearest")


def _gray(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a
    return 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]


def edge_map(img: np.ndarray, lo: float = 100.0, hi: float = 200.0) -> np.ndarray:
    """Sobel magnitude with hysteresis: strong >= hi, weak >= lo kept if 8-connected to strong."""
    if not 0 <= lo < hi:
        raise ValueError(f"need 0 <= lo < hi, got lo={lo}, hi={hi}")
    g = _gray(img)
    mag = np.hypot(ndimage.sobel(g, axis=1, mode="nearest"), ndimage.sobel(g, axis=0, mode="nearest"))
    weak = mag >= lo
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(g.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[mag >= hi])] = True
    keep[0] = False
    return keep[labels]


@dataclass
class Patch:
    x: int
    y: int
    w: int
    h: int
    density: float

    @property
    def area(self) -> int:
        return self.w * self.h


@dataclass
class PatchGrid:
    patches: list[Patch]
    shape: tuple[int, int]

    def __iter__(self):
        return iter(self.patches)

    def __len__(self):
        return len(self.patches)


def contour_density_patches(edges: np.ndarray, min_patch: int = 16, split_threshold: float = SPLIT_THRESHOLD) -> PatchGrid:
    """Quadtree split while edge density exceeds ``split_threshold``."""
    if min_patch < 16:
        raise ValueError(f"min_patch must be >= 16, got {min_patch}")
    e = np.asarray(edges, dtype=bool)
    out: list[Patch] = []

    def visit(x, y, w, h):
        dens = float(e[y : y + h, x : x + w].sum()) / (w * h)
        if dens > split_threshold and w >= 2 * min_patch and h >= 2 * min_patch:
            w1, h1 = w // 2, h // 2
            visit(x, y, w1, h1)
            visit(x + w1, y, w - w1, h1)
            visit(x, y + h1, w1, h - h1)
            visit(x + w1, y + h1, w - w1, h - h1)
        else:
            out.append(Patch(x, y, w, h, dens))

    visit(0, 0, e.shape[1], e.shape[0])
    return PatchGrid(out, e.shape)


# ---------------------------------------------------------------------------
# text layout and placement


@dataclass
class PlacementRequest:
    level: str = "word"  # word | line | para
    script: str = "latin"
    length: int = 4
    transform: str = "identity"
    scale: float = 2.0  # image pixels per font unit
    angle: float = 0.0  # degrees, for "rotate"
    shear: float = 0.0  # for "affine"
    jitter: float = 0.1  # corner jitter fraction, for "perspective"
    amplitude: float = 0.2  # fraction of glyph height, for "sine"
    wavelength: float = 24.0  # font units, for "sine"
    text: list[str] | None = None  # explicit words; line/para split them across lines
    position: tuple[float, float] | None = None  # where the layout origin lands
    finish: str = "none"  # none | smooth | sharpen
    opacity: float = 1.0
    color: tuple[int, int, int] | None = None
    placement_threshold: float = PLACEMENT_THRESHOLD


@dataclass
class _Layout:
    words: list[tuple[str, list[tuple[float, float, float, float]]]]
    mask: np.ndarray
    size: tuple[float, float]  # (width, height) in font units


def _words_for(req: PlacementRequest, gs: GlyphSet, rng: np.random.Generator) -> list[list[str]]:
    if req.text is not None:
        words = list(req.text)
    else:
        n = {"word": 1, "line": int(rng.integers(2, 4)), "para": int(rng.integers(3, 6))}[req.level]
        words = [gs.random_text(rng, max(1, int(req.length + rng.integers(-1, 2) * (n > 1)))) for _ in range(n)]
    if req.level == "para":
        per_line = max(1, math.ceil(len(words) / 2))
        return [words[i : i + per_line] for i in range(0, len(words), per_line)]
    if req.level in ("word", "line"):
        return [words]
    raise ValueError(f"unknown placement level {req.level!r}")


def _layout(gs: GlyphSet, lines: list[list[str]], req: PlacementRequest) -> _Layout:
    amp = req.amplitude * 7 if req.transform == "sine" else 0.0
    space = gs.advance // 2 + 2
    words = []
    y = amp
    width = 0.0
    for line in lines:
        x = 0.0
        for text in line:
            boxes = []
            for ch in text:
                if ch not in gs.bitmaps:
                    raise KeyError(f"glyph {ch!r} missing from atlas {gs.name!r}")
                dy = 0.0
                if amp:
                    dy = round(amp * math.sin(2 * math.pi * x / req.wavelength) * _RES) / _RES
                boxes.append((x, y + dy, x + gs.advance, y + dy + FONT_ROWS))
                x += gs.advance
            words.append((text, boxes))
            x += space
        width = max(width, x - space)
        y += FONT_ROWS + 2
    height = y - 2 + amp
    mask = np.zeros((int(math.ceil(height * _RES)) + 1, int(math.ceil(width * _RES)) + 1))
    for text, boxes in words:
        for ch, (x0, y0, _, _) in zip(text, boxes):
            bm = gs.bitmaps[ch]
            big = np.kron(bm.astype(np.float64), np.ones((_RES, _RES)))
            ox = int(round((x0 + (gs.advance - bm.shape[1]) / 2) * _RES))
            oy = int(round((y0 + 1) * _RES))
            mask[oy : oy + big.shape[0], ox : ox + big.shape[1]] = np.maximum(
                mask[oy : oy + big.shape[0], ox : ox + big.shape[1]], big
            )
    return _Layout(words, mask, (width, height))


def _geometric(req: PlacementRequest, size: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    s = req.scale
    w, h = size
    if req.transform in ("identity", "sine"):
        return np.diag([s, s, 1.0])
    if req.transform == "rotate":
        t = math.radians(req.angle)
        c, n = math.cos(t), math.sin(t)
        return np.array([[s * c, -s * n, 0], [s * n, s * c, 0], [0, 0, 1.0]])
    if req.transform == "affine":
        return np.array([[s, s * req.shear, 0], [0, s, 0], [0, 0, 1.0]])
    if req.transform == "perspective":
        src = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
        jit = rng.uniform(-req.jitter, req.jitter, (4, 2)) * np.array([w, h])
        return homography(src, (src + jit) * s)
    raise ValueError(f"unknown transform {req.transform!r}; expected one of {_TRANSFORMS}")


def _patch_candidates(grid: PatchGrid, bw: int, bh: int, thr: float) -> list[Patch]:
    return [p for p in grid if p.density <= thr and p.w >= bw + 2 and p.h >= bh + 2]


def place_text(
    img: np.ndarray,
    grid: PatchGrid,
    req: PlacementRequest,
    rng: np.random.Generator | None = None,
    occupied: np.ndarray | None = None,
) -> tuple[np.ndarray, list[WordAnnotation]]:
    """Render text into a low-density patch; returns the new image and its words.

    When no patch qualifies the input image is returned unchanged with an
    empty annotation list.  ``occupied`` (bool, H x W) is updated in place.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    gs = get_glyph_set(req.script)
    lines = _words_for(req, gs, rng)
    lay = _layout(gs, lines, req)
    m = _geometric(req, lay.size, rng)
    w, h = lay.size
    corners = apply_homography(m, np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64))
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    bw, bh = int(math.ceil(hi[0] - lo[0])), int(math.ceil(hi[1] - lo[1]))
    H, W = img.shape[:2]

    origin = None
    if req.position is not None:
        ox, oy = req.position
        x0, y0 = ox + lo[0], oy + lo[1]
        if x0 >= 0 and y0 >= 0 and x0 + bw <= W and y0 + bh <= H:
            origin = (ox, oy)
    else:
        cands = _patch_candidates(grid, bw, bh, req.placement_threshold)
        for _ in range(30 if cands else 0):
            p = cands[int(rng.integers(len(cands)))]
            px = p.x + 1 + int(rng.integers(0, p.w - bw - 1))
            py = p.y + 1 + int(rng.integers(0, p.h - bh - 1))
            if occupied is not None and occupied[max(py - 2, 0) : py + bh + 2, max(px - 2, 0) : px + bw + 2].any():
                continue
            origin = (px - lo[0], py - lo[1])
            break
    if origin is None:
        log.info("no patch fits a %dx%d %s placement; skipped", bw, bh, req.level)
        return img, []

    full = np.array([[1, 0, origin[0]], [0, 1, origin[1]], [0, 0, 1.0]]) @ m
    inv = np.linalg.inv(full)
    bx0, by0 = int(math.floor(origin[0] + lo[0])), int(math.floor(origin[1] + lo[1]))
    bx1, by1 = min(int(math.ceil(origin[0] + hi[0])) + 1, W), min(int(math.ceil(origin[1] + hi[1])) + 1, H)
    bx0, by0 = max(bx0, 0), max(by0, 0)
    ys, xs = np.mgrid[by0:by1, bx0:bx1]
    uv = apply_homography(inv, np.stack([xs + 0.5, ys + 0.5], axis=-1))
    alpha = ndimage.map_coordinates(
        lay.mask, [uv[..., 1] * _RES - 0.5, uv[..., 0] * _RES - 0.5], order=1, mode="constant", cval=0.0
    )
    if req.finish == "smooth":
        alpha = ndimage.gaussian_filter(alpha, 0.6)
    alpha = np.clip(alpha * req.opacity, 0.0, 1.0)

    region = img[by0:by1, bx0:bx1].astype(np.float64)
    if req.color is not None:
        color = np.asarray(req.color, dtype=np.float64)
    else:
        lum = _gray(region).mean() if region.size else 128.0
        base = rng.uniform(0, 60) if lum > 127 else rng.uniform(195, 255)
        color = np.clip(base + rng.uniform(-20, 20, 3), 0, 255)
    blended = alpha[..., None] * color + (1 - alpha[..., None]) * region
    if req.finish == "sharpen":
        soft = ndimage.gaussian_filter(blended, (1.0, 1.0, 0))
        sharp = blended + 0.6 * (blended - soft)
        blended = np.where(alpha[..., None] > 0, sharp, blended)
    out = img.copy()
    out[by0:by1, bx0:bx1] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    if occupied is not None:
        occupied[by0:by1, bx0:bx1] |= alpha > 0.05

    words = []
    for text, boxes in lay.words:
        cells = [np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]) for x0, y0, x1, y1 in boxes]
        xs0 = min(b[0] for b in boxes)
        xs1 = max(b[2] for b in boxes)
        ys0 = min(b[1] for b in boxes)
        ys1 = max(b[3] for b in boxes)
        wq = np.array([[xs0, ys0], [xs1, ys0], [xs1, ys1], [xs0, ys1]], dtype=np.float64)
        words.append(
            WordAnnotation(
                apply_homography(full, wq),
                gs.group,
                [apply_homography(full, c) for c in cells],
                text,
                gs.name,
            )
        )
    return out, words


# ---------------------------------------------------------------------------
# backgrounds and datasets


def procedural_background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth colour field with a few cluttered regions (lines, boxes, noise)."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(30, 225, 3)
    grad = rng.uniform(-60, 60, (2, 3))
    img = base + xx[..., None] * grad[0] + yy[..., None] * grad[1]
    blobs = ndimage.gaussian_filter(rng.normal(0, 1, (h, w, 3)), (h / 8, w / 8, 0))
    img += blobs / (np.abs(blobs).max() + 1e-9) * rng.uniform(10, 40)
    for _ in range(int(rng.integers(0, 4))):
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        cw, chh = int(rng.integers(w // 8, w // 3)), int(rng.integers(h // 8, h // 3))
        kind = rng.integers(0, 3)
        sl = (slice(y0, y0 + chh), slice(x0, x0 + cw))
        if kind == 0:
            img[sl] = rng.uniform(0, 255, 3)
        elif kind == 1:
            stripes = (np.arange(img[sl].shape[1]) // int(rng.integers(2, 5))) % 2
            img[sl] += stripes[None, :, None] * rng.uniform(-90, 90)
        else:
            img[sl] += rng.normal(0, 45, img[sl].shape)
    img += rng.normal(0, 2.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class GenConfig:
    height: int = 128
    width: int = 128
    scripts: tuple[str, ...] = ("latin", "hanzi")
    words: tuple[int, int] = (1, 3)
    length: tuple[int, int] = (2, 5)
    scale: tuple[float, float] = (1.7, 2.3)
    levels: tuple[str, ...] = ("word", "word", "word", "line")
    transforms: tuple[str, ...] = ("identity", "identity", "rotate", "affine", "perspective", "sine")
    max_angle: float = 12.0
    blur: int = 3
    edge_lo: float = 100.0
    edge_hi: float = 200.0
    min_patch: int = 16
    split_threshold: float = SPLIT_THRESHOLD
    placement_threshold: float = PLACEMENT_THRESHOLD
    extra: dict = field(default_factory=dict)


def _fit_background(bg: np.ndarray, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    bh, bw = bg.shape[:2]
    target = w / h
    if bw / bh > target:
        cw, ch = int(round(bh * target)), bh
    else:
        cw, ch = bw, int(round(bw / target))
    x0 = int(rng.integers(0, bw - cw + 1))
    y0 = int(rng.integers(0, bh - ch + 1))
    crop = bg[y0 : y0 + ch, x0 : x0 + cw]
    if crop.shape[:2] == (h, w):
        return crop.copy()
    return resize_bilinear(crop, h, w)


def generate_image(background: np.ndarray, rng: np.random.Generator, cfg: GenConfig) -> tuple[np.ndarray, list[WordAnnotation], int]:
    """One synthetic image: returns (image, words, skipped placements)."""
    img = _fit_background(background, cfg.height, cfg.width, rng)
    edges = edge_map(median_blur_channelwise(img, cfg.blur), cfg.edge_lo, cfg.edge_hi)
    grid = contour_density_patches(edges, cfg.min_patch, cfg.split_threshold)
    occupied = np.zeros(img.shape[:2], dtype=bool)
    words: list[WordAnnotation] = []
    skipped = 0
    for _ in range(int(rng.integers(cfg.words[0], cfg.words[1] + 1))):
        transform = cfg.transforms[int(rng.integers(len(cfg.transforms)))]
        req = PlacementRequest(
            level=cfg.levels[int(rng.integers(len(cfg.levels)))],
            script=cfg.scripts[int(rng.integers(len(cfg.scripts)))],
            length=int(rng.integers(cfg.length[0], cfg.length[1] + 1)),
            transform=transform,
            scale=float(rng.uniform(*cfg.scale)),
            angle=float(rng.uniform(-cfg.max_angle, cfg.max_angle)),
            shear=float(rng.uniform(-0.25, 0.25)),
            jitter=0.08,
            amplitude=float(rng.uniform(0.1, 0.3)),
            wavelength=float(rng.uniform(18, 40)),
            finish=("none", "none", "smooth", "sharpen")[int(rng.integers(4))],
            opacity=float(rng.uniform(0.85, 1.0)),
            placement_threshold=cfg.placement_threshold,
        )
        img, placed = place_text(img, grid, req, rng, occupied)
        skipped += not placed
        words += placed
    return img, words, skipped


def _load_background(bg) -> np.ndarray | None:
    if isinstance(bg, np.ndarray):
        return bg
    try:
        return read_image(bg)
    except (OSError, ImageFormatError) as exc:
        log.warning("skipping unreadable background %s: %s", bg, exc)
        return None


def _gen_one(args):
    idx, seed, bg_items, cfg, out_dir = args
    rng = np.random.default_rng([seed, idx])
    bg = bg_items[int(rng.integers(len(bg_items)))]
    img, words, skipped = generate_image(bg, rng, cfg)
    stem = f"img_{idx:05d}"
    write_ppm(Path(out_dir) / f"{stem}.ppm", img)
    save_annotations(Path(out_dir) / f"{stem}.json", f"{stem}.ppm", words)
    return {"image": f"{stem}.ppm", "annotation": f"{stem}.json", "words": len(words), "skipped_placements": skipped}


def generate_dataset(
    backgrounds: Sequence,
    count: int,
    seed: int,
    out_dir,
    cfg: GenConfig | None = None,
    workers: int = 1,
) -> dict:
    """Write ``count`` image/annotation pairs plus ``manifest.json``.

    Image i draws from its own random stream seeded by (seed, i), so output
    does not depend on ``workers``.
    """
    cfg = cfg or GenConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not backgrounds:
        raise ValueError("need at least one background")
    loaded = [_load_background(b) for b in backgrounds]
    usable = [b for b in loaded if b is not None]
    bad = len(loaded) - len(usable)
    if count and not usable:
        raise ValueError("no readable backgrounds")
    jobs = [(i, seed, usable, cfg, str(out)) for i in range(count)]
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(workers) as pool:
            items = list(pool.map(_gen_one, jobs, chunksize=8))
    else:
        items = [_gen_one(j) for j in jobs]
    manifest = {
        "seed": seed,
        "count": count,
        "size": [cfg.height, cfg.width],
        "skipped_backgrounds": bad,
        "items": items,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
