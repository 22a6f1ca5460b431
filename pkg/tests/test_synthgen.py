import json

import numpy as np
import pytest

from telcos.geometry import points_in_convex
from telcos.groundtruth import load_annotations
from telcos.imageio import read_image, write_ppm
from telcos.synthgen import (
    PLACEMENT_THRESHOLD,
    GenConfig,
    PatchGrid,
    Patch,
    PlacementRequest,
    contour_density_patches,
    edge_map,
    generate_dataset,
    median_blur_channelwise,
    place_text,
    procedural_background,
)


def _flat(h=64, w=128, v=200):
    return np.full((h, w, 3), v, dtype=np.uint8)


def _blank_grid(img):
    return contour_density_patches(np.zeros(img.shape[:2], bool))


# -- median -------------------------------------------------------------------


def test_median_constant_unchanged():
    img = _flat(10, 10, 77)
    assert np.array_equal(median_blur_channelwise(img, 5), img)


def test_median_removes_salt():
    img = _flat(9, 9, 10)
    img[4, 4] = 255
    assert np.array_equal(median_blur_channelwise(img, 3), _flat(9, 9, 10))


def test_median_3x3_direct_sort():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (3, 3, 3), dtype=np.uint8)
    out = median_blur_channelwise(img, 3)
    for c in range(3):
        assert out[1, 1, c] == np.sort(img[:, :, c].ravel())[4]


def test_median_rejects_even():
    with pytest.raises(ValueError):
        median_blur_channelwise(_flat(), 4)


# -- edges --------------------------------------------------------------------


def test_edges_constant_image():
    assert not edge_map(_flat()).any()


def test_edges_vertical_step():
    img = _flat(20, 20, 0)
    img[:, 10:] = 255
    e = edge_map(img, 100, 200)
    cols = np.where(e.any(axis=0))[0]
    # Sobel responds on the two columns flanking the step
    assert set(cols) <= {9, 10} and len(cols) >= 1
    assert e[:, cols].all()


def test_edges_weak_isolated_suppressed():
    img = _flat(15, 15, 100)
    img[7, 7] = 130  # peak gradient 2*30 = 60 with Sobel: weak at lo=50, never strong
    assert edge_map(img, 50, 200).sum() == 0
    assert edge_map(img, 50, 55).any()


def test_edges_weak_kept_when_linked():
    img = _flat(30, 30, 0)
    img[:10, 10:] = 255  # strong step (Sobel magnitude 4 * 255)
    img[10:20, 10:] = 40  # weak step continuing it (magnitude 160)
    img[25:, 20:] = 40  # weak step, separated from any strong pixel
    e = edge_map(img, 100, 800)
    assert e[12:18, 9:11].any(axis=1).all()
    assert not e[22:, 15:].any()


def test_edges_bad_thresholds():
    with pytest.raises(ValueError):
        edge_map(_flat(), 5, 5)


# -- quadtree -----------------------------------------------------------------


def test_quadtree_empty():
    grid = contour_density_patches(np.zeros((64, 64), bool))
    assert len(grid) == 1 and grid.patches[0].density == 0 and grid.patches[0].area == 64 * 64


def test_quadtree_top_left_trace():
    e = np.zeros((64, 64), bool)
    e[:32, :32] = np.random.default_rng(0).random((32, 32)) < 0.3
    grid = contour_density_patches(e, 16)
    rects = sorted((p.x, p.y, p.w, p.h) for p in grid)
    # root splits; only the busy top-left quadrant splits again
    expected = sorted([(32, 0, 32, 32), (0, 32, 32, 32), (32, 32, 32, 32),
                       (0, 0, 16, 16), (16, 0, 16, 16), (0, 16, 16, 16), (16, 16, 16, 16)])
    assert rects == expected


def test_quadtree_densities_and_tiling():
    e = np.random.default_rng(1).random((96, 80)) < 0.05
    grid = contour_density_patches(e, 16)
    cover = np.zeros(e.shape, int)
    for p in grid:
        assert p.density == e[p.y : p.y + p.h, p.x : p.x + p.w].sum() / (p.w * p.h)
        cover[p.y : p.y + p.h, p.x : p.x + p.w] += 1
    assert (cover == 1).all()


def test_quadtree_min_patch():
    with pytest.raises(ValueError):
        contour_density_patches(np.zeros((64, 64), bool), 8)


# -- placement ----------------------------------------------------------------


def test_blank_background_always_places():
    img = _flat()
    for seed in range(10):
        rng = np.random.default_rng(seed)
        out, words = place_text(img, _blank_grid(img), PlacementRequest(script="latin", length=4), rng)
        assert len(words) == 1 and len(words[0].chars) == len(words[0].text) == 4
        assert not np.array_equal(out, img)


def test_identity_layout_axis_aligned():
    img = _flat()
    _, (word,) = place_text(img, _blank_grid(img), PlacementRequest(text=["ABCDE"], scale=2.0), np.random.default_rng(0))
    qs = np.array([c.quad for c in word.chars])
    widths = qs[:, 1, 0] - qs[:, 0, 0]
    assert np.allclose(widths, 12.0)  # advance 6 font units at 2 px/unit
    assert np.allclose(qs[:, 0, 1], qs[:, 1, 1]) and np.allclose(qs[:, 0, 0], qs[:, 3, 0])
    assert np.all(np.diff(qs[:, 0, 0]) > 0)
    assert np.allclose(qs[1:, 0, 0], qs[:-1, 1, 0])


def test_rotation_90_about_anchor():
    img = _flat(128, 128)
    grid = _blank_grid(img)
    base = PlacementRequest(text=["ABC"], scale=2.0, position=(40.0, 30.0))
    rot = PlacementRequest(text=["ABC"], scale=2.0, transform="rotate", angle=90.0, position=(80.0, 30.0))
    _, (w0,) = place_text(img, grid, base)
    _, (w1,) = place_text(img, grid, rot)
    r = np.array([[0.0, -1.0], [1.0, 0.0]])
    for c0, c1 in zip(w0.chars, w1.chars):
        expect = (c0.quad - [40.0, 30.0]) @ r.T + [80.0, 30.0]
        assert np.allclose(c1.quad, expect, atol=1e-9)


@pytest.mark.parametrize("transform", ["identity", "rotate", "affine", "perspective", "sine"])
def test_char_quads_inside_image(transform):
    img = _flat(96, 128)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        req = PlacementRequest(level="line", transform=transform, angle=20.0, shear=0.2, length=3)
        _, words = place_text(img, _blank_grid(img), req, rng)
        for w in words:
            for c in w.chars:
                assert (c.quad >= 0).all() and (c.quad[:, 0] <= 128).all() and (c.quad[:, 1] <= 96).all()


def test_sine_amplitude_bound():
    img = _flat(96, 160)
    req = PlacementRequest(text=["ABCDEFGHIJ"], transform="sine", amplitude=0.3, wavelength=20.0, scale=1.0)
    _, (w,) = place_text(img, _blank_grid(img), req, np.random.default_rng(0))
    tops = np.array([c.quad[0, 1] for c in w.chars])
    assert tops.max() - tops.min() <= 2 * 0.3 * 7 + 1e-9
    assert tops.max() > tops.min()


def test_no_qualifying_patch_skips():
    img = _flat()
    busy = PatchGrid([Patch(0, 0, 128, 64, 0.5)], (64, 128))
    out, words = place_text(img, busy, PlacementRequest(), np.random.default_rng(0))
    assert words == [] and out is img


def test_never_placed_in_dense_patch():
    rng = np.random.default_rng(3)
    for i in range(6):
        img = procedural_background(128, 128, rng)
        e = edge_map(median_blur_channelwise(img, 3))
        grid = contour_density_patches(e)
        occ = np.zeros((128, 128), bool)
        _, words = place_text(img, grid, PlacementRequest(length=3), rng, occ)
        for w in words:
            lo = w.quad.min(axis=0)
            hosts = [p for p in grid if p.x <= lo[0] < p.x + p.w and p.y <= lo[1] < p.y + p.h]
            assert hosts and hosts[0].density <= PLACEMENT_THRESHOLD


def test_annotation_covers_changed_pixels():
    img = _flat(96, 256, 180)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        out, words = place_text(img, _blank_grid(img), PlacementRequest(level="line", length=4), rng)
        assert words
        changed = np.argwhere((out != img).any(axis=2))
        centres = changed[:, ::-1] + 0.5
        covered = np.zeros(len(centres), bool)
        for w in words:
            for c in w.chars:
                covered |= points_in_convex(c.quad, centres)
        assert covered.mean() >= 0.95


# -- dataset ------------------------------------------------------------------


def test_empty_manifest(tmp_path):
    m = generate_dataset([_flat()], 0, 1, tmp_path)
    assert m["items"] == [] and json.loads((tmp_path / "manifest.json").read_text())["count"] == 0


def test_dataset_deterministic(tmp_path):
    bgs = [procedural_background(100, 140, np.random.default_rng(i)) for i in range(3)]
    generate_dataset(bgs, 6, 42, tmp_path / "a")
    generate_dataset(bgs, 6, 42, tmp_path / "b", workers=2)
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_hundred_valid(tmp_path):
    bg_dir = tmp_path / "bg"
    bg_dir.mkdir()
    paths = []
    for i in range(10):
        p = bg_dir / f"bg{i}.ppm"
        write_ppm(p, procedural_background(120, 160, np.random.default_rng(i)))
        paths.append(p)
    (bg_dir / "broken.ppm").write_bytes(b"P6\n10 10\n255\n\x00")
    paths.append(bg_dir / "broken.ppm")
    m = generate_dataset(paths, 100, 7, tmp_path / "out", GenConfig())
    assert m["skipped_backgrounds"] == 1 and len(m["items"]) == 100
    total = 0
    for item in m["items"]:
        image, words = load_annotations(tmp_path / "out" / item["annotation"])
        assert read_image(tmp_path / "out" / image).shape == (128, 128, 3)
        total += len(words)
    assert total > 100
