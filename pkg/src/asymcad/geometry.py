"""Breast segmentation, pectoral line fitting, landmark extraction, and the
linear location mapping between paired images.

A location q in the source image maps to q' = q - p + p', where p combines
the row of the breast-front point and the column of the chest/pectoral
point. MLO views fit the pectoral edge with a linear Hough transform; CC
views use the chest-side image border as the reference line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class SegmentationError(Exception):
    pass


class MappingConfigError(Exception):
    pass


THETA_RANGE_DEG = (20, 80)  # pectoral angle from vertical
HOUGH_VOTE_THRESHOLD = 25
JITTER_SIGMA_PX = 10.0
JITTER_COUNT = 64


@dataclass
class Landmarks:
    p1: tuple[float, float]  # breast-front point (row, col)
    p2: tuple[float, float]  # chest/pectoral point (row, col)
    pectoral: tuple[float, float] | None  # (rho, theta) or None for border
    fallback: bool = False

    @property
    def vector(self) -> tuple[float, float]:
        """The mapping offset p = (p1 row, p2 column)."""
        return (self.p1[0], self.p2[1])


@dataclass
class MappedLocation:
    source: tuple[float, float]
    target: tuple[float, float]
    clipped: bool = False
    jitter_samples: list[tuple[int, int]] | None = None


def otsu_threshold(pixels: np.ndarray, n_bins: int = 256) -> float:
    """Histogram Otsu between the image min and max, so adding a constant
    to every pixel shifts the threshold by exactly that constant."""
    vals = pixels.astype(np.float64).ravel()
    lo, hi = vals.min(), vals.max()
    if hi <= lo:
        raise SegmentationError("constant image has no foreground")
    hist, edges = np.histogram(vals, bins=n_bins, range=(lo, hi))
    p = hist / vals.size
    omega = np.cumsum(p)
    mu = np.cumsum(p * (edges[:-1] + edges[1:]) / 2)
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    k = int(np.argmax(sigma_b))
    return float((edges[k] + edges[k + 1]) / 2)


def segment_breast(pixels: np.ndarray) -> np.ndarray:
    """Largest connected component above an Otsu threshold, holes filled."""
    thr = otsu_threshold(pixels)
    fg = pixels.astype(np.float64) > thr
    if not fg.any():
        raise SegmentationError("empty foreground after thresholding")
    labels, n = ndimage.label(fg)
    if n == 0:
        raise SegmentationError("no connected foreground component")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    mask = labels == (1 + int(np.argmax(sizes)))
    return ndimage.binary_fill_holes(mask)


def fit_pectoral(pixels: np.ndarray, mask: np.ndarray,
                 vote_threshold: int = HOUGH_VOTE_THRESHOLD):
    """Strongest Hough line among strong-gradient pixels in the chest-side
    upper region; returns ((rho, theta), fallback_used).

    Line parametrization: col*cos(theta) + row*sin(theta) = rho with theta
    measured from vertical, constrained to [20, 80] degrees.
    """
    h, w = pixels.shape
    smooth = ndimage.gaussian_filter(pixels.astype(np.float64), 1.5)
    gr = ndimage.sobel(smooth, axis=0)
    gc = ndimage.sobel(smooth, axis=1)
    gmag = np.hypot(gr, gc)
    region = np.zeros_like(mask)
    region[: int(0.75 * h), : int(0.6 * w)] = True
    # stay a few pixels inside the breast so the skin line does not vote
    region &= ndimage.binary_erosion(mask, iterations=4)
    gmag[~region] = 0.0
    cutoff = gmag.max() * 0.5
    rows, cols = np.nonzero(gmag > cutoff)
    thetas = np.deg2rad(np.arange(THETA_RANGE_DEG[0], THETA_RANGE_DEG[1] + 1))
    rho_max = int(math.hypot(h, w)) + 1
    acc = np.zeros((thetas.size, 2 * rho_max))
    for ti, th in enumerate(thetas):
        rho = cols * math.cos(th) + rows * math.sin(th)
        np.add.at(acc[ti], np.round(rho).astype(int) + rho_max, 1.0)
    best = np.unravel_index(np.argmax(acc), acc.shape)
    if acc[best] < vote_threshold:
        return (0.0, 0.0), True  # chest-side border: col = 0
    # sub-bin refinement: vote-weighted centroid of the 3x3 peak neighborhood
    t0, r0 = best
    tl, th_ = max(0, t0 - 1), min(acc.shape[0], t0 + 2)
    rl, rh = max(0, r0 - 1), min(acc.shape[1], r0 + 2)
    patch = acc[tl:th_, rl:rh]
    ti, ri = np.mgrid[tl:th_, rl:rh]
    w_sum = patch.sum()
    theta = float(np.deg2rad(THETA_RANGE_DEG[0]) + np.deg2rad(1.0) * (ti * patch).sum() / w_sum)
    rho = float((ri * patch).sum() / w_sum - rho_max)
    return (rho, theta), False


def _line_distance(r, c, line) -> float:
    rho, theta = line
    return abs(c * math.cos(theta) + r * math.sin(theta) - rho)


def extract_landmarks(pixels: np.ndarray, view: str,
                      mask: np.ndarray | None = None) -> Landmarks:
    """Breast-front point p1 (farthest contour point from the reference
    line) and chest point p2 (foot of the perpendicular from p1)."""
    if mask is None:
        mask = segment_breast(pixels)
    h, w = pixels.shape
    if view == "MLO":
        line, fallback = fit_pectoral(pixels, mask)
        if fallback:
            line = (0.0, 0.0)
    else:
        line, fallback = (0.0, 0.0), False
    contour = mask & ~ndimage.binary_erosion(mask)
    rows, cols = np.nonzero(contour)
    if rows.size == 0:
        raise SegmentationError("empty breast contour")
    rho, theta = line
    d = np.abs(cols * math.cos(theta) + rows * math.sin(theta) - rho)
    # the distance profile is flat around its peak; the centroid of the
    # near-maximal plateau is far more stable than a single argmax pixel
    plateau = d >= d.max() - 1.0
    p1 = (float(rows[plateau].mean()), float(cols[plateau].mean()))
    # project p1 onto the reference line; normal is (sin t, cos t) in (r, c)
    offset = p1[1] * math.cos(theta) + p1[0] * math.sin(theta) - rho
    p2 = (p1[0] - offset * math.sin(theta), p1[1] - offset * math.cos(theta))
    p2 = (min(max(p2[0], 0.0), h - 1.0), min(max(p2[1], 0.0), w - 1.0))
    return Landmarks(p1=p1, p2=p2, pectoral=line if view == "MLO" and not fallback else None,
                     fallback=fallback)


def map_location(q: tuple[float, float], src: Landmarks, dst: Landmarks,
                 dst_shape: tuple[int, int] | None = None) -> MappedLocation:
    """q' = q - p + p', optionally clipped to the destination image."""
    p = src.vector
    pp = dst.vector
    target = (q[0] - p[0] + pp[0], q[1] - p[1] + pp[1])
    clipped = False
    if dst_shape is not None:
        h, w = dst_shape
        clamped = (min(max(target[0], 0.0), h - 1.0), min(max(target[1], 0.0), w - 1.0))
        clipped = clamped != target
        target = clamped
    return MappedLocation(source=tuple(q), target=target, clipped=clipped)


def jitter(q: tuple[float, float], n: int = JITTER_COUNT,
           sigma_px: float = JITTER_SIGMA_PX, seed: int = 0,
           bounds: tuple[int, int] | None = None) -> list[tuple[int, int]]:
    """n i.i.d. integer-pixel samples from N(q, sigma^2 I), clipped."""
    if n < 1:
        raise MappingConfigError("jitter needs n >= 1")
    rng = np.random.default_rng(seed)
    pts = np.round(np.asarray(q, dtype=np.float64) + sigma_px * rng.standard_normal((n, 2)))
    if bounds is not None:
        pts[:, 0] = np.clip(pts[:, 0], 0, bounds[0] - 1)
        pts[:, 1] = np.clip(pts[:, 1], 0, bounds[1] - 1)
    return [(int(r), int(c)) for r, c in pts]
