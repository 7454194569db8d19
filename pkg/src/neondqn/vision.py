"""Low-dimensional observation filter and histogram-based collision check.

Frames are ``(H, W, 3)`` uint8 arrays in B, G, R channel order, which is
what a screen grabber hands back. Gray images are ``(H, W)`` uint8 and
observations are ``(90, 160)`` uint8 arrays holding only 0 and 1.

Every stage works in exact integer arithmetic so that results do not
depend on floating point summation order.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

OBS_WIDTH = 160
OBS_HEIGHT = 90
TOP_CROP = 0.5384
BOTTOM_CROP = 0.20
SIDE_CROP = 0.20
GAME_OVER_DISTANCE = 0.15


def _check_frame(frame):
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"frame must have shape (H, W, 3), got {frame.shape}")
    if frame.dtype != np.uint8:
        raise ValueError(f"frame must be uint8, got {frame.dtype}")
    return frame


def to_grayscale(frame):
    """Luma ``0.299 R + 0.587 G + 0.114 B`` rounded half away from zero."""
    frame = _check_frame(frame)
    b = frame[..., 0].astype(np.int32)
    g = frame[..., 1].astype(np.int32)
    r = frame[..., 2].astype(np.int32)
    acc = 299 * r + 587 * g + 114 * b
    return ((acc + 500) // 1000).astype(np.uint8)


def _floor_frac(frac, extent):
    return math.floor(Fraction(repr(float(frac))) * extent)


def crop_bounds(height, width, top_frac=TOP_CROP, bottom_frac=BOTTOM_CROP, side_frac=SIDE_CROP):
    """Return ``(row0, row1, col0, col1)`` of the kept half-open window."""
    for name, f in (("top_frac", top_frac), ("bottom_frac", bottom_frac), ("side_frac", side_frac)):
        if not 0 <= f <= 1:
            raise ValueError(f"{name} must lie in [0, 1], got {f}")
    row0 = _floor_frac(top_frac, height)
    row1 = height - _floor_frac(bottom_frac, height)
    side = _floor_frac(side_frac, width)
    col0, col1 = side, width - side
    if row1 <= row0 or col1 <= col0:
        raise ValueError(
            f"crop of {width}x{height} with fractions top={top_frac}, bottom={bottom_frac}, "
            f"side={side_frac} leaves an empty region"
        )
    return row0, row1, col0, col1


def crop(image, top_frac=TOP_CROP, bottom_frac=BOTTOM_CROP, side_frac=SIDE_CROP):
    image = np.asarray(image)
    r0, r1, c0, c1 = crop_bounds(image.shape[0], image.shape[1], top_frac, bottom_frac, side_frac)
    return image[r0:r1, c0:c1]


def _gray_counts(gray):
    return np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.int64)


def triangle_threshold_from_histogram(hist):
    """Zack's triangle threshold on a 256-bin histogram.

    The line runs from the peak bin (lowest index on ties) to the farthest
    nonempty bin on the longer side of the peak; ties in side length go to
    the bright side. The threshold is the bin between those two endpoints
    with the largest distance below that line, lowest index winning ties.
    The perpendicular distance differs from the vertical gap
    ``line(i) - h[i]`` only by a constant factor, so the integer vertical
    gap scaled by the run length is maximised instead.
    """
    h = np.asarray(hist, dtype=np.int64)
    if h.shape != (256,):
        raise ValueError(f"histogram must have 256 bins, got shape {h.shape}")
    nz = np.flatnonzero(h)
    if nz.size == 0:
        raise ValueError("empty histogram")
    lo, hi = int(nz[0]), int(nz[-1])
    peak = int(np.argmax(h))
    if lo == hi:
        return lo
    end = hi if hi - peak >= peak - lo else lo
    a, b = (peak, end) if peak < end else (end, peak)
    idx = np.arange(a, b + 1)
    run = end - peak  # signed
    # (line(i) - h[i]) * run, sign-corrected so larger means further below the line
    gap = h[peak] * run + (h[end] - h[peak]) * (idx - peak) - h[idx] * run
    if run < 0:
        gap = -gap
    return int(idx[int(np.argmax(gap))])


def triangle_threshold(gray):
    """Return ``(threshold, binary)`` where ``binary = gray > threshold``."""
    gray = np.asarray(gray)
    if gray.dtype != np.uint8:
        raise ValueError(f"gray image must be uint8, got {gray.dtype}")
    t = triangle_threshold_from_histogram(_gray_counts(gray))
    return t, (gray > t).astype(np.uint8)


def _overlap_matrix(n_in, n_out):
    """Integer overlap lengths between source and destination cells.

    Source cell ``i`` spans ``[i * n_out, (i + 1) * n_out)`` and destination
    cell ``j`` spans ``[j * n_in, (j + 1) * n_in)`` on a common axis, so each
    destination row sums to ``n_in``.
    """
    src_lo = np.arange(n_in) * n_out
    dst_lo = np.arange(n_out) * n_in
    lo = np.maximum(dst_lo[:, None], src_lo[None, :])
    hi = np.minimum(dst_lo[:, None] + n_in, src_lo[None, :] + n_out)
    return np.clip(hi - lo, 0, None)


def resize_area(image, out_w=OBS_WIDTH, out_h=OBS_HEIGHT, binary=False):
    """Downscale by exact area averaging.

    8-bit images are rounded half up to the nearest level. With
    ``binary=True`` the input must hold 0/1 and a destination pixel is 1
    when at least half of its area is 1.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"resize_area expects a 2-D image, got shape {image.shape}")
    in_h, in_w = image.shape
    if out_w > in_w or out_h > in_h:
        raise ValueError(f"resize_area only downscales: requested {out_w}x{out_h} from {in_w}x{in_h}")
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output extents must be positive, got {out_w}x{out_h}")
    ay = _overlap_matrix(in_h, out_h).astype(np.float64)
    ax = _overlap_matrix(in_w, out_w).astype(np.float64)
    # every intermediate is an integer well below 2**53, so float64 is exact
    sums = np.rint(ay @ image.astype(np.float64) @ ax.T).astype(np.int64)
    denom = in_h * in_w
    if binary:
        return (2 * sums >= denom).astype(np.uint8)
    return ((2 * sums + denom) // (2 * denom)).astype(np.uint8)


def preprocess(frame):
    """Grayscale, crop, triangle-binarise and shrink a frame to 160x90."""
    return preprocess_gray(to_grayscale(frame))


def preprocess_gray(gray):
    """:func:`preprocess` for a frame that is already grayscale."""
    _, binary = triangle_threshold(crop(gray))
    return resize_area(binary, OBS_WIDTH, OBS_HEIGHT, binary=True)


def diff_observation(current, previous):
    current = np.asarray(current)
    previous = np.asarray(previous)
    if current.shape != previous.shape:
        raise ValueError(f"observation shapes differ: {current.shape} vs {previous.shape}")
    return current.astype(np.int8) - previous.astype(np.int8)


def add_salt_pepper(frame, p, rng):
    """Replace each pixel with black or white (all channels) with probability ``p``."""
    frame = _check_frame(frame)
    if not 0 <= p <= 1:
        raise ValueError(f"noise fraction must lie in [0, 1], got {p}")
    u = rng.random(frame.shape[:2])
    out = frame.copy()
    # u < p hits the pixel; the lower half of that range is pepper
    out[u < 0.5 * p] = 0
    out[(u >= 0.5 * p) & (u < p)] = 255
    return out


def gray_histogram(frame):
    return _gray_counts(to_grayscale(frame))


def gray_level_histogram(gray):
    return _gray_counts(gray)


def bhattacharyya(h1, h2):
    """Bhattacharyya distance between two histograms, in [0, 1]."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ValueError(f"histogram shapes differ: {h1.shape} vs {h2.shape}")
    s1, s2 = h1.sum(), h2.sum()
    if s1 <= 0 or s2 <= 0:
        raise ValueError("histograms must be nonempty")
    coeff = np.sqrt(h1 * h2).sum() / math.sqrt(s1 * s2)
    return math.sqrt(max(0.0, 1.0 - coeff))


def detect_game_over(frame, reference, threshold=GAME_OVER_DISTANCE):
    """True when the frame's gray histogram is within ``threshold`` of the reference.

    ``reference`` is either the game-over frame itself or its precomputed
    256-bin gray histogram.
    """
    ref = np.asarray(reference)
    ref_hist = ref if ref.ndim == 1 else gray_histogram(ref)
    return bhattacharyya(gray_histogram(frame), ref_hist) <= threshold
