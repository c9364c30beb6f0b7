from __future__ import annotations

from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pix2graph.dataset import ImageBuffer, load_image
from pix2graph.errors import ValidationError
from pix2graph.segmentation import SegmentMap, apply_mask, patch_segment, slico_segment


def _uniform(h, w, rgb=(120, 80, 60)):
    return ImageBuffer(np.broadcast_to(np.array(rgb, np.uint8), (h, w, 3)).copy())


def _random(h, w, seed=0):
    return ImageBuffer(np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8))


def _components(mask: np.ndarray) -> int:
    """4-connected component count by breadth-first flood fill."""
    seen = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    count = 0
    for y, x in zip(*np.nonzero(mask)):
        if seen[y, x]:
            continue
        count += 1
        q = deque([(y, x)])
        seen[y, x] = True
        while q:
            cy, cx = q.popleft()
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = cy + dy, cx + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    q.append((ny, nx))
    return count


def _kmeans_xy(h: int, w: int, k_side: int, iters: int = 20) -> np.ndarray:
    """Plain Lloyd k-means on pixel coordinates from a regular grid start."""
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([ys.ravel(), xs.ravel()], 1).astype(float)
    step_y, step_x = h / k_side, w / k_side
    centers = np.array([((i + 0.5) * step_y, (j + 0.5) * step_x) for i in range(k_side) for j in range(k_side)])
    for _ in range(iters):
        d = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        centers = np.array([pts[lab == c].mean(0) for c in range(len(centers))])
    return np.bincount(lab, minlength=len(centers))


class TestPatch:
    def test_paper_grid(self):
        seg = patch_segment(_random(450, 600), 4, 5)
        assert seg.n == 20
        assert sum(s.size for s in seg.segments) == 450 * 600

    def test_single_patch_centroid(self):
        seg = patch_segment(_random(5, 7), 1, 1)
        assert seg.n == 1 and seg.segments[0].size == 35
        assert seg.segments[0].centroid == pytest.approx((3.0, 2.0))

    def test_remainder_rule(self):
        seg = patch_segment(_random(5, 5), 2, 2)
        assert [s.size for s in seg.segments] == [4, 6, 6, 9]
        assert seg.segments[3].bbox == (2, 2, 5, 5)

    def test_errors(self):
        with pytest.raises(ValidationError):
            patch_segment(_random(5, 5), 0, 2)
        with pytest.raises(ValidationError):
            patch_segment(_random(5, 5), 6, 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 40), st.integers(2, 40), st.data())
    def test_partition(self, h, w, data):
        rows = data.draw(st.integers(1, h))
        cols = data.draw(st.integers(1, w))
        seg = patch_segment(_random(h, w), rows, cols)
        assert seg.n == rows * cols
        assert sum(s.size for s in seg.segments) == h * w
        assert (seg.labels >= 0).all()

    def test_masked_patches_drop_empty(self):
        img = _random(8, 10)
        mask = np.zeros((8, 10), bool)
        mask[:4, :4] = True
        _, _, work = apply_mask(img, mask)
        seg = patch_segment(work, 2, 2)
        assert seg.n == 1
        assert (seg.labels[~mask] == -1).all()


class TestMask:
    def test_identity_mask(self):
        img = _random(6, 7)
        lesion, background, work = apply_mask(img, np.ones((6, 7), bool))
        assert not background.any() and lesion.all()
        assert np.array_equal(work.pixels, img.pixels)

    def test_left_half(self):
        img = _random(6, 7)
        mask = np.zeros((6, 7), bool)
        mask[:, :4] = True
        lesion, background, _ = apply_mask(img, mask)
        assert lesion.sum() == 4 * 6 and background.sum() == 3 * 6

    def test_empty_lesion(self):
        with pytest.raises(ValidationError):
            apply_mask(_random(6, 7), np.zeros((6, 7), bool))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            apply_mask(_random(6, 7), np.ones((5, 7), bool))


class TestSlico:
    def test_uniform_image_matches_kmeans_oracle(self):
        seg = slico_segment(_uniform(64, 64), 4, 10)
        sizes = sorted(s.size for s in seg.segments)
        oracle = sorted(_kmeans_xy(64, 64, 2))
        assert seg.n == 4
        assert all(abs(s - 1024) <= 64 for s in sizes)
        assert all(abs(a - b) <= 0.1 * b for a, b in zip(sizes, oracle))

    def test_single_target(self):
        seg = slico_segment(_random(20, 30), 1)
        assert seg.n == 1 and seg.segments[0].size == 600

    def test_connected_and_complete(self):
        img = _random(60, 80, seed=4)
        seg = slico_segment(img, 20)
        assert (seg.labels >= 0).all()
        assert sum(s.size for s in seg.segments) == 60 * 80
        for i in range(seg.n):
            assert _components(seg.region(i)) == 1
        assert 10 <= seg.n <= 30

    def test_deterministic(self):
        img = _random(40, 50, seed=9)
        assert np.array_equal(slico_segment(img, 12).labels, slico_segment(img, 12).labels)

    def test_masked_excludes_background(self, small_corpus):
        img = load_image(small_corpus[0])
        _, _, work = apply_mask(img, img.mask)
        seg = slico_segment(work, 20)
        assert (seg.labels[~img.mask] == -1).all()
        assert (seg.labels[img.mask] >= 0).all()
        for i, s in enumerate(seg.segments):
            assert _components(seg.region(i)) == 1
            cx, cy = s.centroid
            assert 0 <= cx < img.width and 0 <= cy < img.height
        assert 12 <= seg.n <= 26

    def test_unmasked_corpus_near_target(self, small_corpus):
        ns = [slico_segment(load_image(r), 20).n for r in small_corpus[:10]]
        assert 17 <= np.mean(ns) <= 23


class TestSegmentMap:
    def test_noncontiguous_rejected(self):
        with pytest.raises(ValidationError):
            SegmentMap.from_labels(np.array([[0, 2], [2, 0]]))

    def test_save_load_roundtrip(self, tmp_path):
        seg = slico_segment(_random(30, 40, seed=2), 8)
        seg.save(tmp_path / "seg.png")
        back = SegmentMap.load(tmp_path / "seg.png")
        assert np.array_equal(back.labels, seg.labels)
        assert back.segments == seg.segments
