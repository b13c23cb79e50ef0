"""Gaussian heatmap targets, local-maximum keypoint extraction and AP@k px."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_SIGMA = 2.0
DEFAULT_MIN_PROBABILITY = 0.3
DEFAULT_WINDOW = 5


@dataclass(frozen=True)
class DetectedKeypoint:
    u: int
    v: int
    probability: float

    def to_dict(self) -> dict:
        return {"u": self.u, "v": self.v, "probability": self.probability}


def _size(resolution) -> tuple[int, int]:
    if np.isscalar(resolution):
        return int(resolution), int(resolution)
    w, h = resolution
    return int(w), int(h)


def render_target(keypoints, sigma: float = DEFAULT_SIGMA, resolution=128, dtype=np.float64) -> np.ndarray:
    """Pixel-wise maximum of unnormalised Gaussians centred on ``keypoints``.

    ``keypoints`` is a sequence of (u, v) pixel coordinates; ``resolution`` is
    an int or a (width, height) pair. Returns an (H, W) array with value 1
    exactly at any keypoint that falls on a pixel centre.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    w, h = _size(resolution)
    out = np.zeros((h, w), dtype=np.float64)
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    us, vs = np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64)
    for ku, kv in kps:
        gu = np.exp(-((us - ku) ** 2) / (2 * sigma * sigma))
        gv = np.exp(-((vs - kv) ** 2) / (2 * sigma * sigma))
        np.maximum(out, np.outer(gv, gu), out=out)
    return out.astype(dtype, copy=False)


def extract_keypoints(
    heatmap: np.ndarray,
    min_probability: float = DEFAULT_MIN_PROBABILITY,
    window: int = DEFAULT_WINDOW,
) -> list[DetectedKeypoint]:
    """Local maxima of ``heatmap`` above ``min_probability``, strongest first.

    A pixel qualifies when it equals the maximum of its ``window`` x ``window``
    neighbourhood (clipped at the image border). Connected plateaus of
    qualifying pixels are reported once, at their first pixel in row-major
    order.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if not 0 < min_probability < 1:
        raise ValueError(f"min_probability must lie in (0, 1), got {min_probability}")
    h = np.asarray(heatmap)
    if h.ndim != 2:
        h = h.reshape(h.shape[-2:])
    local_max = ndimage.maximum_filter(h, size=window, mode="constant", cval=-np.inf)
    peaks = (h == local_max) & (h >= min_probability)
    if not peaks.any():
        return []
    labels, n = ndimage.label(peaks, structure=np.ones((3, 3), dtype=bool))
    uniq, first = np.unique(labels.ravel(), return_index=True)
    first = first[uniq > 0]  # drop the background label 0 when present
    vs, us = np.unravel_index(first, h.shape)
    probs = h[vs, us]
    order = np.lexsort((us, vs, -probs))
    return [DetectedKeypoint(int(us[i]), int(vs[i]), float(probs[i])) for i in order]


def _visible_truths(truth) -> np.ndarray:
    corners = np.asarray(truth.corners_px, dtype=np.float64).reshape(-1, 2)
    visible = np.asarray(truth.visible, dtype=bool).reshape(-1)
    return corners[visible]


def match_detections(
    detections: Mapping[str, Sequence[DetectedKeypoint]],
    truths: Mapping[str, object],
    threshold: float = 2.0,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy pooled matching.

    Returns ``(scores, is_true_positive, n_positives)`` with detections in
    ranked order. ``truths`` values need ``corners_px`` and ``visible``.
    """
    unknown = set(detections) - set(truths)
    if unknown:
        raise ValueError(f"detections reference unknown image ids: {sorted(unknown)[:5]}")
    gts = {k: _visible_truths(t) for k, t in truths.items()}
    n_pos = int(sum(len(g) for g in gts.values()))

    pooled = [
        (det.probability, img_idx, det_idx, image_id, det)
        for img_idx, (image_id, dets) in enumerate(detections.items())
        for det_idx, det in enumerate(dets)
    ]
    pooled.sort(key=lambda r: (-r[0], r[1], r[2]))

    matched = {k: np.zeros(len(g), dtype=bool) for k, g in gts.items()}
    scores = np.empty(len(pooled))
    tp = np.zeros(len(pooled), dtype=bool)
    for i, (prob, _, _, image_id, det) in enumerate(pooled):
        scores[i] = prob
        gt = gts[image_id]
        free = ~matched[image_id]
        if not free.any():
            continue
        d = np.hypot(gt[:, 0] - det.u, gt[:, 1] - det.v)
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= threshold:
            matched[image_id][j] = True
            tp[i] = True
    return scores, tp, n_pos


def average_precision(
    detections: Mapping[str, Sequence[DetectedKeypoint]],
    truths: Mapping[str, object],
    threshold: float = 2.0,
) -> float:
    """Pooled all-points-interpolated average precision at ``threshold`` pixels.

    With no visible ground truth the result is 1.0 when there are also no
    detections and 0.0 otherwise.
    """
    _, tp, n_pos = match_detections(detections, truths, threshold)
    if n_pos == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_pos
    # precision envelope, then sum over recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def metrics_record(detections, truths, threshold: float = 2.0) -> dict:
    """JSON-ready AP summary."""
    return {
        "ap": average_precision(detections, truths, threshold),
        "threshold_px": threshold,
        "n_images": len(truths),
        "n_detections": int(sum(len(d) for d in detections.values())),
        "pooling": "pooled",
    }
