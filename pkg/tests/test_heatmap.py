import math
from collections import deque
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from towelfold.heatmap import (
    DetectedKeypoint,
    average_precision,
    extract_keypoints,
    metrics_record,
    render_target,
)


# ------------------------------------------------------------- targets

def test_single_keypoint_analytic():
    h = render_target([(32.0, 32.0)], sigma=2.0, resolution=64)
    assert h.shape == (64, 64)
    assert h[32, 32] == 1.0
    assert h[32, 36] == pytest.approx(math.exp(-2), abs=1e-12)  # (u=36, v=32)
    assert h[36, 32] == pytest.approx(math.exp(-2), abs=1e-12)


def test_empty_and_duplicate():
    assert not render_target([], 2.0, 16).any()
    one = render_target([(5.3, 7.1)], 2.0, 16)
    np.testing.assert_array_equal(render_target([(5.3, 7.1), (5.3, 7.1)], 2.0, 16), one)


def test_rectangular_resolution():
    h = render_target([(10, 2)], 1.5, (20, 8))
    assert h.shape == (8, 20)
    assert h[2, 10] == 1.0


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        render_target([(1, 1)], 0.0, 8)


@settings(max_examples=100, deadline=None)
@given(
    pts=st.lists(st.tuples(st.floats(-5, 37), st.floats(-5, 37)), min_size=0, max_size=6),
    extra=st.lists(st.tuples(st.floats(-5, 37), st.floats(-5, 37)), min_size=1, max_size=4),
    sigma=st.floats(0.5, 5.0),
)
def test_monotone_under_inclusion(pts, extra, sigma):
    small = render_target(pts, sigma, 32)
    big = render_target(pts + extra, sigma, 32)
    assert np.all(small <= big)


# ----------------------------------------------------------- extraction

def brute_force_peaks(h, min_probability, window):
    """O(W*H*window^2) scan plus flood-fill plateau resolution."""
    rows, cols = h.shape
    r = window // 2
    qual = np.zeros_like(h, dtype=bool)
    for v in range(rows):
        for u in range(cols):
            best = -np.inf
            for dv in range(-r, r + 1):
                for du in range(-r, r + 1):
                    vv, uu = v + dv, u + du
                    if 0 <= vv < rows and 0 <= uu < cols:
                        best = max(best, h[vv, uu])
            qual[v, u] = h[v, u] == best and h[v, u] >= min_probability
    seen = np.zeros_like(qual)
    found = []
    for v in range(rows):
        for u in range(cols):
            if qual[v, u] and not seen[v, u]:
                found.append((u, v, float(h[v, u])))  # first pixel in row-major order
                queue = deque([(v, u)])
                seen[v, u] = True
                while queue:
                    cv, cu = queue.popleft()
                    for dv in (-1, 0, 1):
                        for du in (-1, 0, 1):
                            nv, nu = cv + dv, cu + du
                            if 0 <= nv < rows and 0 <= nu < cols and qual[nv, nu] and not seen[nv, nu]:
                                seen[nv, nu] = True
                                queue.append((nv, nu))
    return sorted(found, key=lambda t: (-t[2], t[1], t[0]))


def test_single_peak():
    h = np.zeros((32, 32))
    h[20, 10] = 1.0  # (u=10, v=20)
    assert extract_keypoints(h, 0.5, 5) == [DetectedKeypoint(10, 20, 1.0)]


def test_all_zero():
    assert extract_keypoints(np.zeros((16, 16)), 0.3, 5) == []


def test_window_validation():
    with pytest.raises(ValueError):
        extract_keypoints(np.zeros((8, 8)), 0.3, 4)
    with pytest.raises(ValueError):
        extract_keypoints(np.zeros((8, 8)), 1.5, 5)


def test_plateau_reports_first_pixel():
    h = np.zeros((10, 10))
    h[4:6, 3:6] = 0.8
    assert extract_keypoints(h, 0.5, 3) == [DetectedKeypoint(3, 4, 0.8)]


def test_matches_brute_force_small_sample():
    rng = np.random.default_rng(7)
    for i in range(40):
        h = rng.random((12, 15))
        if i % 2:
            h = np.round(h * 4) / 4  # plenty of plateaus
        window = int(rng.choice([3, 5, 7]))
        got = [(k.u, k.v, k.probability) for k in extract_keypoints(h, 0.3, window)]
        assert got == brute_force_peaks(h, 0.3, window)


@settings(max_examples=50, deadline=None)
@given(
    pts=st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=4, unique=True),
    window=st.sampled_from([3, 5]),
)
def test_extract_recovers_separated_keypoints(pts, window):
    # lattice spacing 2*window+1 keeps points >= 2*window apart and >= window from borders
    step = 2 * window + 1
    kps = [(window + step * a + 0.3, window + step * b - 0.2) for a, b in pts]
    size = window * 2 + step * 6
    h = render_target(kps, 2.0, size)
    got = sorted((k.u, k.v) for k in extract_keypoints(h, 0.5, window))
    assert got == sorted((round(u), round(v)) for u, v in kps)


# ------------------------------------------------------------------- AP

def truth(corners, visible=None):
    corners = np.asarray(corners, dtype=float)
    return SimpleNamespace(corners_px=corners, visible=[True] * len(corners) if visible is None else visible)


def brute_force_ap(detections, truths, threshold):
    """Recomputes the greedy match for every prefix of the ranked list."""
    ranked = sorted(
        [(d.probability, i, j, k, d) for i, (k, ds) in enumerate(detections.items()) for j, d in enumerate(ds)],
        key=lambda r: (-r[0], r[1], r[2]),
    )
    n_pos = sum(int(np.sum(t.visible)) for t in truths.values())

    def tp_count(prefix):
        used = {k: set() for k in truths}
        tp = []
        for _, _, _, key, d in prefix:
            t = truths[key]
            best, best_d = None, math.inf
            for idx, (c, vis) in enumerate(zip(t.corners_px, t.visible)):
                if vis and idx not in used[key]:
                    dist = math.dist(c, (d.u, d.v))
                    if dist < best_d:
                        best, best_d = idx, dist
            hit = best is not None and best_d <= threshold
            if hit:
                used[key].add(best)
            tp.append(hit)
        return tp

    prec = []
    for k in range(1, len(ranked) + 1):
        prec.append(sum(tp_count(ranked[:k])) / k)
    hits = tp_count(ranked)
    return sum(max(prec[j] for j in range(i, len(ranked))) / n_pos for i in range(len(ranked)) if hits[i])


def test_perfect_detections():
    truths = {"a": truth([(10, 10), (20, 10), (20, 20), (10, 20)])}
    dets = {"a": [DetectedKeypoint(10, 10, 0.9), DetectedKeypoint(20, 10, 0.8),
                  DetectedKeypoint(20, 20, 0.7), DetectedKeypoint(10, 20, 0.6)]}
    assert average_precision(dets, truths, 2.0) == 1.0


def test_no_detections():
    truths = {"a": truth([(10, 10)])}
    assert average_precision({"a": []}, truths, 2.0) == 0.0
    assert average_precision({}, truths, 2.0) == 0.0


def test_unknown_image_id():
    with pytest.raises(ValueError):
        average_precision({"zzz": []}, {"a": truth([(1, 1)])})


def test_invisible_corners_do_not_count():
    truths = {"a": truth([(10, 10), (30, 30)], visible=[True, False])}
    dets = {"a": [DetectedKeypoint(10, 10, 0.9)]}
    assert average_precision(dets, truths) == 1.0


def test_toy_three_image_set_matches_brute_force():
    truths = {
        "img0": truth([(10.2, 10.4), (40.0, 10.0), (40.0, 40.0), (10.0, 40.0)]),
        "img1": truth([(5.0, 5.0), (25.0, 5.0), (25.0, 25.0), (5.0, 25.0)], [True, True, False, True]),
        "img2": truth([(60.0, 60.0), (90.0, 60.0), (90.0, 90.0), (60.0, 90.0)]),
    }
    D = DetectedKeypoint
    dets = {
        "img0": [D(10, 10, 0.95), D(41, 11, 0.6), D(30, 30, 0.55), D(10, 43, 0.2)],
        "img1": [D(5, 5, 0.9), D(6, 6, 0.85), D(25, 25, 0.7), D(5, 24, 0.4)],
        "img2": [D(61, 60, 0.8), D(89, 91, 0.5), D(75, 75, 0.3)],
    }
    ap = average_precision(dets, truths, 2.0)
    assert ap == pytest.approx(brute_force_ap(dets, truths, 2.0), abs=1e-12)
    assert 0 < ap < 1
    rec = metrics_record(dets, truths, 2.0)
    assert rec["n_images"] == 3 and rec["n_detections"] == 11 and rec["threshold_px"] == 2.0


def test_random_sets_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(30):
        truths, dets = {}, {}
        for i in range(3):
            corners = rng.uniform(0, 30, (4, 2))
            truths[f"i{i}"] = truth(corners, list(rng.random(4) < 0.8))
            near = corners[rng.random(4) < 0.7] + rng.normal(0, 1.5, (1, 2))
            far = rng.uniform(0, 30, (rng.integers(0, 3), 2))
            pts = np.round(np.vstack([near, far]))
            dets[f"i{i}"] = [DetectedKeypoint(int(u), int(v), float(rng.random())) for u, v in pts]
        assert average_precision(dets, truths, 2.0) == pytest.approx(brute_force_ap(dets, truths, 2.0), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), power=st.floats(0.2, 5.0))
def test_ap_invariant_to_monotone_rescaling(seed, power):
    rng = np.random.default_rng(seed)
    truths = {"a": truth(rng.uniform(0, 20, (4, 2))), "b": truth(rng.uniform(0, 20, (4, 2)))}
    dets = {
        k: [DetectedKeypoint(int(u), int(v), float(p)) for (u, v), p in
            zip(np.round(t.corners_px + rng.normal(0, 1.5, (4, 2))), rng.uniform(0.05, 1, 4))]
        for k, t in truths.items()
    }
    rescaled = {k: [DetectedKeypoint(d.u, d.v, d.probability ** power) for d in ds] for k, ds in dets.items()}
    assert average_precision(dets, truths) == pytest.approx(average_precision(rescaled, truths), abs=1e-12)


def test_constant_heatmap_is_one_plateau():
    assert extract_keypoints(np.full((16, 16), 0.5), 0.3, 5) == [DetectedKeypoint(0, 0, 0.5)]
