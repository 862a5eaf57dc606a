"""Preprocessing stages: embedding, keyframe clustering, detection, resize."""

import itertools

import numpy as np
import pytest

from gestrec.preproc import (BBox, PreprocConfig, VideoClip, crop_resize, detect_subject,
                             embed_frame, embed_frames, preprocess_clip, select_keyframes)
from gestrec.rng import Rng


class TestEmbedFrame:
    def test_constant_frame(self):
        frame = np.full((1, 8, 8), 3.0, np.float32)
        feat = embed_frame(frame, grid=2)
        assert np.allclose(feat.vector, [3, 0, 3, 0, 3, 0, 3, 0])
        assert feat.vector.shape == (8,)

    def test_zero_frame(self):
        assert np.allclose(embed_frame(np.zeros((2, 4, 4), np.float32), grid=2).vector, 0.0)

    def test_checkerboard(self):
        frame = np.indices((8, 8)).sum(axis=0) % 2
        feat = embed_frame(frame[None].astype(np.float32), grid=1)
        assert np.allclose(feat.vector, [0.5, 0.5])

    def test_feature_dim(self):
        r = Rng(0)
        for C, g in [(1, 2), (3, 2), (2, 4)]:
            feats = embed_frames(r.normal((5, C, 12, 12)), g)
            assert feats.shape == (5, 2 * C * g * g)

    def test_pads_non_divisible(self):
        feats = embed_frames(Rng(1).normal((2, 1, 7, 9)), grid=2)
        assert feats.shape == (2, 8) and np.isfinite(feats).all()

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            embed_frames(np.zeros((1, 1, 4, 4), np.float32), grid=0)


def _brute_force_min_inertia(x: np.ndarray, k: int) -> float:
    """Exhaustive minimum within-cluster SSE over all partitions into k
    non-empty groups (independent oracle)."""
    n = len(x)

    def partitions(items, k):
        if not items:
            if k == 0:
                yield []
            return
        first, rest = items[0], items[1:]
        for p in partitions(rest, k):
            for i in range(len(p)):
                yield p[:i] + [p[i] + [first]] + p[i + 1:]
        if k > 0:
            for p in partitions(rest, k - 1):
                yield p + [[first]]

    best = np.inf
    for part in partitions(list(range(n)), k):
        sse = 0.0
        for group in part:
            pts = x[group]
            sse += ((pts - pts.mean(axis=0)) ** 2).sum()
        best = min(best, sse)
    return float(best)


class TestSelectKeyframes:
    def test_identity_when_k_equals_n(self):
        feats = Rng(0).normal((8, 4))
        sel = select_keyframes(feats, 8, Rng(1))
        assert sel.indices == list(range(8))
        assert sel.inertia == 0.0

    def test_separated_duplicates(self):
        feats = np.array([[0.0, 0.0]] * 4 + [[10.0, 10.0]] * 4, np.float32)
        sel = select_keyframes(feats, 2, Rng(2))
        assert sel.inertia == 0.0
        assert len(sel.indices) == 2
        groups = {0 if i < 4 else 1 for i in sel.indices}
        assert groups == {0, 1}

    def test_matches_exhaustive_minimum(self):
        for seed in range(20):
            r = Rng(100 + seed)
            n = 5 + seed % 4            # 5..8 points
            k = 2 + seed % 3            # 2..4 clusters
            x = r.normal((n, 2), dtype=np.float64)
            sel = select_keyframes(x, k, r.child(1), restarts=8)
            oracle = _brute_force_min_inertia(x, k)
            assert sel.inertia == pytest.approx(oracle, rel=1e-9, abs=1e-9), seed

    def test_inertia_non_increasing(self):
        for seed in range(10):
            r = Rng(seed)
            sel = select_keyframes(r.normal((30, 4)), 5, r.child(1))
            hist = sel.inertia_history
            assert all(hist[i + 1] <= hist[i] + 1e-9 for i in range(len(hist) - 1))

    def test_duplicated_cluster_invariance(self):
        a = np.array([[0.0, 0.0]] * 3 + [[9.0, 9.0]] * 3, np.float32)
        b = np.array([[0.0, 0.0]] * 5 + [[9.0, 9.0]] * 5, np.float32)
        sel_a = select_keyframes(a, 2, Rng(5))
        sel_b = select_keyframes(b, 2, Rng(5))
        pick = lambda sel, split: tuple(i < split for i in sel.indices)
        assert sorted(pick(sel_a, 3)) == sorted(pick(sel_b, 5))

    def test_sorted_chronologically(self):
        r = Rng(3)
        sel = select_keyframes(r.normal((40, 6)), 7, r.child(1))
        assert sel.indices == sorted(sel.indices)
        assert len(set(sel.indices)) == 7

    def test_errors(self):
        feats = Rng(0).normal((4, 2))
        with pytest.raises(ValueError):
            select_keyframes(feats, 5, Rng(1))
        with pytest.raises(ValueError):
            select_keyframes(feats, 0, Rng(1))

    def test_deterministic(self):
        feats = Rng(7).normal((20, 4))
        a = select_keyframes(feats, 4, Rng(9))
        b = select_keyframes(feats, 4, Rng(9))
        assert a.indices == b.indices and a.inertia == b.inertia


def _make_clip(frames):
    return VideoClip(frames=np.asarray(frames, np.float32), distance_m=5.0, label=0)


class TestDetectSubject:
    def test_oscillating_patch(self):
        frames = np.zeros((6, 1, 40, 60), np.float32)
        frames[::2, :, 10:14, 20:24] = 1.0
        box = detect_subject(_make_clip(frames), theta=0.5, rho=0.0)
        assert (box.x0, box.y0, box.x1, box.y1) == (20, 10, 24, 14)

    def test_identical_frames_whole_box(self):
        frames = np.tile(Rng(0).normal((1, 1, 16, 24)), (5, 1, 1, 1))
        box = detect_subject(_make_clip(frames), mode="motion")
        assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 24, 16)

    def test_dilation_and_clipping(self):
        frames = np.zeros((4, 1, 30, 30), np.float32)
        frames[::2, :, 0:10, 0:10] = 1.0
        box = detect_subject(_make_clip(frames), theta=0.5, rho=0.2)
        assert (box.x0, box.y0) == (0, 0)
        assert (box.x1, box.y1) == (12, 12)

    def test_intensity_mode_static_subject(self):
        frames = np.zeros((3, 1, 20, 20), np.float32)
        frames[:, :, 5:10, 8:12] = 1.0
        box = detect_subject(_make_clip(frames), theta=0.5, rho=0.0, mode="intensity")
        assert (box.x0, box.y0, box.x1, box.y1) == (8, 5, 12, 10)

    def test_auto_mode_switches_for_static(self):
        frames = np.zeros((3, 1, 20, 20), np.float32)
        frames[:, :, 5:10, 8:12] = 1.0
        box = detect_subject(_make_clip(frames), theta=0.5, rho=0.0, mode="auto")
        assert (box.x0, box.y0, box.x1, box.y1) == (8, 5, 12, 10)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            detect_subject(_make_clip(np.zeros((2, 1, 4, 4))), mode="saliency")

    def test_box_invariants_hold(self):
        for seed in range(20):
            frames = Rng(seed).normal((5, 1, 17, 23), scale=0.2)
            box = detect_subject(_make_clip(frames))
            assert 0 <= box.x0 < box.x1 <= 23
            assert 0 <= box.y0 < box.y1 <= 17


class TestCropResize:
    def test_whole_frame_identity(self):
        frame = Rng(0).normal((2, 9, 11))
        out = crop_resize(frame, BBox(0, 0, 11, 9), out_hw=(9, 11))
        assert np.allclose(out, frame, atol=1e-6)

    def test_constant_frame(self):
        out = crop_resize(np.full((1, 6, 6), 4.0, np.float32), BBox(1, 1, 5, 5), (10, 3))
        assert np.allclose(out, 4.0, atol=1e-6)

    def test_bilinear_exact_values(self):
        frame = np.array([[[0.0, 1.0], [0.0, 1.0]]], np.float32)
        out = crop_resize(frame, BBox(0, 0, 2, 2), out_hw=(2, 4))
        assert np.allclose(out[0, 0], [0, 1 / 3, 2 / 3, 1], atol=1e-6)

    def test_range_preserved(self):
        frame = Rng(1).normal((1, 16, 16))
        out = crop_resize(frame, BBox(2, 3, 14, 13), out_hw=(32, 32))
        assert out.min() >= frame.min() - 1e-6 and out.max() <= frame.max() + 1e-6

    def test_box_exceeding_frame_rejected(self):
        with pytest.raises(ValueError):
            crop_resize(np.zeros((1, 8, 8), np.float32), BBox(0, 0, 9, 8), (4, 4))

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BBox(3, 3, 3, 5)


class TestPreprocessClip:
    def test_output_shape_and_dtype(self):
        r = Rng(0)
        clip = VideoClip(frames=r.normal((20, 1, 24, 24), scale=0.3), distance_m=8.0, label=1)
        out = preprocess_clip(clip, PreprocConfig(k=6, out_hw=(16, 16)), rng=Rng(1))
        assert out.shape == (6, 1, 16, 16) and out.dtype == np.float32

    def test_deterministic(self):
        clip = VideoClip(frames=Rng(2).normal((15, 1, 20, 20)), distance_m=6.0, label=0)
        cfg = PreprocConfig(k=4, out_hw=(8, 8))
        a = preprocess_clip(clip, cfg, rng=Rng(3))
        b = preprocess_clip(clip, cfg, rng=Rng(3))
        assert np.array_equal(a, b)

    def test_k_equals_n_full_frame_subject(self):
        # static clip in motion mode -> whole-frame box; k == n -> identity
        # selection; same-size resize -> output equals the input frames
        frames = np.tile(Rng(4).normal((1, 1, 10, 10)), (5, 1, 1, 1))
        clip = VideoClip(frames=frames, distance_m=5.0, label=0)
        out = preprocess_clip(clip, PreprocConfig(k=5, out_hw=(10, 10),
                                                  detect_mode="motion"), rng=Rng(5))
        assert np.allclose(out, clip.frames, atol=1e-6)

    def test_k_exceeds_n_rejected(self):
        clip = VideoClip(frames=np.zeros((3, 1, 8, 8), np.float32), distance_m=4.0, label=0)
        with pytest.raises(ValueError):
            preprocess_clip(clip, PreprocConfig(k=4), rng=Rng(0))


class TestVideoClipInvariants:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            VideoClip(frames=np.zeros((4, 4), np.float32), distance_m=5.0, label=0)

    def test_rejects_nonpositive_distance(self):
        with pytest.raises(ValueError):
            VideoClip(frames=np.zeros((2, 1, 4, 4), np.float32), distance_m=0.0, label=0)
