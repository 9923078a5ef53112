import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import brute_nearest
from fsp_lidar.background import (BackgroundMap, ForegroundParams, build_background, extract_foreground,
                                  nearest_background_distance, sidecar_path)
from fsp_lidar.cloud_ops import FrameTag, PointCloudFrame, voxel_centroids
from fsp_lidar.errors import InvalidParameterError


def leveled(points, fid=0):
    return PointCloudFrame(fid, float(fid), np.asarray(points, dtype=float).reshape(-1, 3), FrameTag.LEVELED)


def grid_background(step=1.0, n=10):
    g = np.arange(n) * step
    xx, yy = np.meshgrid(g, g)
    return BackgroundMap(np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)]))


# building

def test_single_frame_map_is_its_dedup():
    pts = np.random.default_rng(0).uniform(0, 5, (500, 3))
    bg = build_background([leveled(pts)], dedup_voxel=0.3)
    assert np.array_equal(bg.points, voxel_centroids(pts, 0.3)[0])


def test_identical_frames_merge_to_one():
    pts = np.random.default_rng(1).uniform(0, 5, (400, 3))
    one = build_background([leveled(pts)], 0.1)
    two = build_background([leveled(pts, 0), leveled(pts, 1)], 0.1)
    assert np.allclose(one.points, two.points, atol=1e-12)


def test_disjoint_frames_sum():
    a = np.random.default_rng(2).uniform(0, 1, (50, 3)) * [100, 100, 1]
    b = a + [1000.0, 0, 0]
    bg = build_background([leveled(a), leveled(b, 1)], 0.01)
    assert len(bg) == len(voxel_centroids(a, 0.01)[0]) + len(voxel_centroids(b, 0.01)[0])
    assert bg.source_frame_ids == (0, 1)


def test_empty_frame_list_rejected():
    with pytest.raises(InvalidParameterError):
        build_background([], 0.1)


def test_sensor_frames_rejected():
    with pytest.raises(InvalidParameterError):
        build_background([PointCloudFrame(0, 0.0, np.zeros((1, 3)))], 0.1)


def test_save_load_round_trip(tmp_path):
    pts = np.random.default_rng(3).uniform(-5, 5, (200, 3))
    bg = build_background([leveled(pts, 4), leveled(pts + 20, 7)], 0.2, created_at="2026-01-01T00:00:00")
    path = tmp_path / "bg.txt"
    bg.save(path)
    assert sidecar_path(path).exists()
    back = BackgroundMap.load(path)
    assert np.allclose(back.points, bg.points, atol=1e-6)
    assert back.dedup_voxel == 0.2
    assert back.source_frame_ids == (4, 7)
    assert back.created_at == "2026-01-01T00:00:00"


# distances

def test_coincident_point_distance_zero():
    bg = grid_background()
    assert nearest_background_distance([3.0, 4.0, 0.0], bg) == 0.0


def test_three_four_five():
    bg = BackgroundMap(np.zeros((1, 3)))
    assert nearest_background_distance([3.0, 4.0, 0.0], bg) == 5.0


def test_distances_match_exhaustive_scan_exactly():
    rng = np.random.default_rng(4)
    bg = BackgroundMap(rng.uniform(-10, 10, (500, 3)))
    q = rng.uniform(-30, 30, (100, 3))  # many queries fall outside the bounded first pass
    assert np.array_equal(nearest_background_distance(q, bg), brute_nearest(q, bg.points))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 2.0))
def test_bounded_query_is_exact_for_any_dedup(seed, dedup):
    rng = np.random.default_rng(seed)
    bg = BackgroundMap(rng.uniform(-5, 5, (200, 3)), dedup_voxel=dedup)
    q = rng.uniform(-12, 12, (60, 3))
    assert np.array_equal(nearest_background_distance(q, bg), brute_nearest(q, bg.points))


# foreground

def test_static_scene_gives_empty_foreground():
    bg = grid_background()
    out = extract_foreground(leveled(bg.points), bg, ForegroundParams(alpha=2.0))
    assert len(out) == 0
    assert out.diagnostics["tau"] == 0.0


def test_one_far_point_among_ninety_nine():
    bg = BackgroundMap(np.zeros((1, 3)))
    pts = np.zeros((100, 3))
    pts[57] = [0.0, 0.0, 5.0]
    out = extract_foreground(leveled(pts), bg, ForegroundParams(alpha=2.0))
    # hand arithmetic: mu = 5/100, sigma = sqrt(25/100 - mu^2), tau = mu + 2 sigma
    mu = 0.05
    sigma = math.sqrt(0.25 - mu * mu)
    assert out.diagnostics["mu_d"] == pytest.approx(mu, abs=1e-15)
    assert out.diagnostics["sigma_d"] == pytest.approx(sigma, abs=1e-15)
    assert out.diagnostics["tau"] == pytest.approx(1.045, abs=1e-3)
    assert out.points.tolist() == [[0.0, 0.0, 5.0]]


def test_empty_frame_gives_empty_foreground():
    out = extract_foreground(leveled(np.empty((0, 3))), grid_background(), ForegroundParams())
    assert len(out) == 0


def test_single_point_frame_is_empty_by_strict_threshold():
    out = extract_foreground(leveled([[100.0, 100.0, 100.0]]), grid_background(), ForegroundParams())
    assert len(out) == 0
    assert out.diagnostics["sigma_d"] == 0.0


def test_alpha_must_be_positive():
    with pytest.raises(InvalidParameterError):
        ForegroundParams(alpha=0.0)


def test_clamp_limits_threshold():
    bg = BackgroundMap(np.zeros((1, 3)))
    pts = np.column_stack([np.zeros(50), np.zeros(50), np.linspace(0, 10, 50)])
    free = extract_foreground(leveled(pts), bg, ForegroundParams(alpha=2.0))
    clamped = extract_foreground(leveled(pts), bg, ForegroundParams(alpha=2.0, clamp=True, tau_max=2.0))
    assert free.diagnostics["tau"] > 2.0
    assert clamped.diagnostics["tau"] == 2.0
    assert len(clamped) > len(free)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
def test_foreground_threshold_split_and_subset(seed, alpha):
    rng = np.random.default_rng(seed)
    bg = BackgroundMap(rng.uniform(0, 10, (300, 3)))
    pts = np.vstack([bg.points[rng.integers(0, 300, 150)] + rng.normal(0, 0.05, (150, 3)),
                     rng.uniform(-5, 15, (40, 3))])
    out = extract_foreground(leveled(pts), bg, ForegroundParams(alpha=alpha))
    tau = out.diagnostics["tau"]
    d = brute_nearest(pts, bg.points)
    keep = d > tau
    assert np.array_equal(out.points, pts[keep])  # also preserves order
    # population standard deviation
    assert out.diagnostics["sigma_d"] == pytest.approx(np.sqrt(np.mean((d - d.mean()) ** 2)), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 3.0), st.floats(0.0, 3.0))
def test_raising_alpha_never_grows_foreground(seed, alpha, extra):
    rng = np.random.default_rng(seed)
    bg = BackgroundMap(rng.uniform(0, 10, (200, 3)))
    f = leveled(rng.uniform(-2, 12, (120, 3)))
    lo = extract_foreground(f, bg, ForegroundParams(alpha=alpha))
    hi = extract_foreground(f, bg, ForegroundParams(alpha=alpha + extra))
    lo_set = {tuple(p) for p in lo.points}
    assert {tuple(p) for p in hi.points} <= lo_set
