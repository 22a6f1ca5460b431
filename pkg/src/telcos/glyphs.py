"""Bundled bitmap glyph atlases for three toy scripts.

``latin`` is a hand-drawn 5x7 capital alphabet.  ``hanzi`` and ``deva`` are
generated once from fixed seeds: dense boxy 7x7 ideograph-like glyphs, and
6x7 glyphs hanging from a head bar, respectively.  They only need to be
visually distinct from each other, not legible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .groundtruth import Script

__all__ = ["GlyphSet", "get_glyph_set", "SCRIPT_GROUPS", "FONT_ROWS"]

FONT_ROWS = 9  # cell height in font units: 7 rows of ink plus 1 above and 1 below

_LATIN = {
    "A": ".###. #...# #...# ##### #...# #...# #...#",
    "B": "####. #...# #...# ####. #...# #...# ####.",
    "C": ".###. #...# #.... #.... #.... #...# .###.",
    "D": "####. #...# #...# #...# #...# #...# ####.",
    "E": "##### #.... #.... ####. #.... #.... #####",
    "F": "##### #.... #.... ####. #.... #.... #....",
    "G": ".###. #...# #.... #.### #...# #...# .###.",
    "H": "#...# #...# #...# ##### #...# #...# #...#",
    "I": ".###. ..#.. ..#.. ..#.. ..#.. ..#.. .###.",
    "J": "..### ...#. ...#. ...#. #..#. #..#. .##..",
    "K": "#...# #..#. #.#.. ##... #.#.. #..#. #...#",
    "L": "#.... #.... #.... #.... #.... #.... #####",
    "M": "#...# ##.## #.#.# #.#.# #...# #...# #...#",
    "N": "#...# ##..# #.#.# #..## #...# #...# #...#",
    "O": ".###. #...# #...# #...# #...# #...# .###.",
    "P": "####. #...# #...# ####. #.... #.... #....",
    "Q": ".###. #...# #...# #...# #.#.# #..#. .##.#",
    "R": "####. #...# #...# ####. #.#.. #..#. #...#",
    "S": ".#### #.... #.... .###. ....# ....# ####.",
    "T": "##### ..#.. ..#.. ..#.. ..#.. ..#.. ..#..",
    "U": "#...# #...# #...# #...# #...# #...# .###.",
    "V": "#...# #...# #...# #...# #...# .#.#. ..#..",
    "W": "#...# #...# #...# #.#.# #.#.# #.#.# .#.#.",
    "X": "#...# #...# .#.#. ..#.. .#.#. #...# #...#",
    "Y": "#...# #...# .#.#. ..#.. ..#.. ..#.. ..#..",
    "Z": "##### ....# ...#. ..#.. .#... #.... #####",
}

SCRIPT_GROUPS = {"latin": Script.LATIN, "hanzi": Script.CJK, "deva": Script.OTHER}


@dataclass(frozen=True)
class GlyphSet:
    name: str
    group: Script
    bitmaps: dict[str, np.ndarray]  # char -> (7, w) bool
    advance: int  # cell width in font units

    @property
    def alphabet(self) -> str:
        return "".join(self.bitmaps)

    def random_text(self, rng: np.random.Generator, length: int) -> str:
        chars = list(self.bitmaps)
        return "".join(chars[i] for i in rng.integers(0, len(chars), length))


def _latin() -> GlyphSet:
    maps = {}
    for ch, rows in _LATIN.items():
        maps[ch] = np.array([[c == "#" for c in r] for r in rows.split()], dtype=bool)
    return GlyphSet("latin", Script.LATIN, maps, advance=6)


def _hanzi(count: int = 40) -> GlyphSet:
    rng = np.random.default_rng(20_201)
    maps = {}
    for i in range(count):
        g = np.zeros((7, 7), dtype=bool)
        g[rng.integers(0, 2), :] = True  # top stroke
        g[:, rng.integers(2, 5)] = True  # central vertical
        for _ in range(rng.integers(2, 4)):
            r = rng.integers(2, 7)
            a, b = sorted(rng.choice(7, 2, replace=False))
            g[r, a : b + 1] = True
        if rng.random() < 0.6:
            r0, c0 = rng.integers(3, 5), rng.integers(0, 3)
            g[r0, c0 : c0 + 4] = g[6, c0 : c0 + 4] = True
            g[r0:7, c0] = g[r0:7, c0 + 3] = True
        maps[chr(0x4E00 + 7 * i)] = g
    return GlyphSet("hanzi", Script.CJK, maps, advance=8)


def _deva(count: int = 30) -> GlyphSet:
    rng = np.random.default_rng(10_905)
    maps = {}
    for i in range(count):
        g = np.zeros((7, 6), dtype=bool)
        g[1, :] = True  # head bar
        stem = rng.integers(3, 6)
        g[1:, stem] = True
        r = rng.integers(3, 6)
        g[r, rng.integers(0, 2) : stem] = True
        loop = rng.integers(0, 2)
        g[r : r + 2, loop] = True
        g[min(r + 2, 6), loop : stem] = rng.random() < 0.7
        if rng.random() < 0.5:
            g[0, rng.integers(0, 6)] = True
        maps[chr(0x0905 + i)] = g
    return GlyphSet("deva", Script.OTHER, maps, advance=7)


@lru_cache(maxsize=None)
def get_glyph_set(name: str) -> GlyphSet:
    builders = {"latin": _latin, "hanzi": _hanzi, "deva": _deva}
    if name not in builders:
        raise KeyError(f"unknown glyph set {name!r}; bundled: {sorted(builders)}")
    return builders[name]()
