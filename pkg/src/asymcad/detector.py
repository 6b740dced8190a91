"""First-stage candidate detection.

Five per-pixel features from first- and second-order Gaussian derivatives
(two focal-mass responses, two spiculation responses, plus the argmax
scale), a bagged random-forest pixel classifier producing a likelihood
map, non-maximum suppression, fixed-physical-size patch extraction with
zero padding, and the lazy augmentation scheme (16 translations + 16
scalings, all times four 90-degree rotations, for positives; four
rotations for negatives).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve
from sklearn.ensemble import RandomForestClassifier

from .phantom import PhantomImage


class DetectorConfigError(Exception):
    pass


class TrainingError(Exception):
    pass


POSITIVE_RADIUS_CM = 0.7  # candidate counts as malignant within this distance
NMS_RADIUS_CM = 0.5
PATCH_SIDE_CM = 5.0
TRANSLATE_RANGE_CM = 0.5  # +-25 px at 200 micron
SCALE_RANGE_CM = 0.6  # +-30 px at 200 micron
N_TRANSLATIONS = 16
N_SCALINGS = 16

DEFAULT_SCALES_CM = (0.08, 0.16, 0.32, 0.64)

_EPS = 1e-12


@dataclass
class FeatureStack:
    planes: np.ndarray  # (5, H, W): blob, convergence, spic strength, spic excess, scale idx
    scale_set: list[float]

    def as_rows(self) -> np.ndarray:
        return self.planes.reshape(5, -1).T


@dataclass
class Candidate:
    image_ref: tuple  # (case_id, exam_ts, laterality, view)
    center: tuple[int, int]
    detector_score: float
    label: str = "normal"  # malignant | normal
    counterpart_centers: dict = field(default_factory=dict)


def _disc_offsets_kernel(radius: int):
    rr, cc = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    dist = np.hypot(rr, cc)
    disc = (dist <= radius) & (dist > 0)
    return rr, cc, dist, disc


def compute_features(pixels: np.ndarray, scales_px: list[float]) -> FeatureStack:
    """Five orientation-free feature planes at the per-pixel best scale."""
    if len(scales_px) < 2:
        raise DetectorConfigError("need at least two scales")
    h, w = pixels.shape
    if max(scales_px) * 4 > min(h, w):
        raise DetectorConfigError("scale too large for image extent")
    img = pixels.astype(np.float64)
    img = img / max(img.max(), 1.0)

    blob = np.full((len(scales_px), h, w), -np.inf)
    conv = np.zeros((len(scales_px), h, w))
    spic_r = np.zeros((len(scales_px), h, w))
    spic_z = np.zeros((len(scales_px), h, w))

    for si, sigma in enumerate(scales_px):
        # focal mass: scale-normalized negative Laplacian of Gaussian
        blob[si] = -(sigma**2) * ndimage.gaussian_laplace(img, sigma)

        # gradient convergence: mean inward component of surrounding unit
        # gradients over a disc
        gr = ndimage.gaussian_filter(img, sigma, order=(1, 0))
        gc = ndimage.gaussian_filter(img, sigma, order=(0, 1))
        gmag = np.hypot(gr, gc)
        ur = gr / (gmag + _EPS)
        uc = gc / (gmag + _EPS)
        radius = max(3, int(round(2 * sigma)))
        rr, cc, dist, disc = _disc_offsets_kernel(radius)
        kr = np.where(disc, -rr / (dist + _EPS), 0.0)
        kc = np.where(disc, -cc / (dist + _EPS), 0.0)
        n_off = disc.sum()
        # correlation with the flipped kernel == convolution with the kernel
        # itself (the kernels are antisymmetric, flip = negate)
        conv[si] = -(fftconvolve(ur, kr, mode="same") + fftconvolve(uc, kc, mode="same")) / n_off

        # spiculation: concentration of second-derivative line orientations
        # pointing at the center, weighted by line saliency
        hrr = ndimage.gaussian_filter(img, sigma, order=(2, 0))
        hcc = ndimage.gaussian_filter(img, sigma, order=(0, 2))
        hrc = ndimage.gaussian_filter(img, sigma, order=(1, 1))
        m = np.sqrt((hrr - hcc) ** 2 + 4 * hrc**2)
        lam1 = 0.5 * (hrr + hcc - m)  # most negative curvature: bright lines
        sal = np.maximum(0.0, -lam1)
        # line orientation: eigen direction of the larger (along-ridge)
        # Hessian eigenvalue, encoded as the doubled angle
        cos2a = np.where(m > _EPS, (hrr - hcc) / (m + _EPS), 0.0)
        sin2a = np.where(m > _EPS, 2 * hrc / (m + _EPS), 0.0)
        phi = np.arctan2(cc, rr)  # offset direction angle
        # annulus: the immediate center has no usable line orientation
        ring = disc & (dist > radius / 2.0)
        wcos = np.where(ring, np.cos(2 * phi), 0.0)
        wsin = np.where(ring, np.sin(2 * phi), 0.0)
        # symmetric kernels: correlation equals convolution
        num = fftconvolve(sal * cos2a, wcos, mode="same") + \
            fftconvolve(sal * sin2a, wsin, mode="same")
        den = fftconvolve(sal, np.where(ring, 1.0, 0.0), mode="same")
        den2 = fftconvolve(sal**2, np.where(ring, 1.0, 0.0), mode="same")
        # floor keeps near-empty neighborhoods from amplifying noise to
        # spuriously high concentrations
        floor = 1e-3 * float(sal.mean()) * ring.sum()
        spic_r[si] = num / np.maximum(den, floor + _EPS)
        spic_z[si] = num / np.sqrt(np.maximum(den2, (floor / ring.sum()) ** 2 * ring.sum() + _EPS) / 2.0)

    best = np.argmax(blob, axis=0)
    take = lambda stack: np.take_along_axis(stack, best[None], axis=0)[0]
    best_spic = np.argmax(spic_r, axis=0)
    take_s = lambda stack: np.take_along_axis(stack, best_spic[None], axis=0)[0]
    planes = np.stack([
        take(blob),
        take(conv),
        take_s(spic_r),
        take_s(spic_z),
        best.astype(np.float64),
    ])
    return FeatureStack(planes=planes, scale_set=list(scales_px))


# ---------------------------------------------------------------------------
# pixel classifier

RF_TREES = 64
RF_MAX_DEPTH = 12


def sample_training_pixels(stack: FeatureStack, target: np.ndarray,
                           mask: np.ndarray | None, rng: np.random.Generator,
                           n_neg: int = 2000):
    """All positive pixels plus a random negative subsample inside the mask."""
    pos_idx = np.flatnonzero(target.ravel())
    neg_mask = ~target if mask is None else (~target & mask)
    neg_idx = np.flatnonzero(neg_mask.ravel())
    if neg_idx.size > n_neg:
        neg_idx = rng.choice(neg_idx, n_neg, replace=False)
    rows = stack.as_rows()
    X = np.r_[rows[pos_idx], rows[neg_idx]]
    y = np.r_[np.ones(pos_idx.size, int), np.zeros(neg_idx.size, int)]
    return X, y


def train_pixel_classifier(X: np.ndarray, y: np.ndarray, seed: int = 0) -> RandomForestClassifier:
    if len(np.unique(y)) < 2:
        raise TrainingError("pixel classifier needs both classes")
    forest = RandomForestClassifier(
        n_estimators=RF_TREES, max_depth=RF_MAX_DEPTH, max_features="sqrt",
        bootstrap=True, random_state=seed, n_jobs=1)
    forest.fit(X, y)
    return forest


def likelihood_map(forest: RandomForestClassifier, stack: FeatureStack) -> np.ndarray:
    h, w = stack.planes.shape[1:]
    probs = forest.predict_proba(stack.as_rows())[:, 1]
    return probs.reshape(h, w)


# ---------------------------------------------------------------------------
# non-maximum suppression


def nonmax_suppress(score_map: np.ndarray, radius_px: float, threshold: float):
    """Strict local maxima >= threshold, greedily thinned so any two kept
    peaks are more than radius apart; (row, col, score) by descending score."""
    if radius_px <= 0:
        raise DetectorConfigError("radius must be positive")
    r = int(math.ceil(radius_px))
    rr, cc = np.mgrid[-r : r + 1, -r : r + 1]
    foot = (np.hypot(rr, cc) <= radius_px)
    foot[r, r] = False
    neighborhood_max = ndimage.maximum_filter(score_map, footprint=foot, mode="constant", cval=-np.inf)
    peaks = (score_map > neighborhood_max) & (score_map >= threshold)
    prows, pcols = np.nonzero(peaks)
    scores = score_map[prows, pcols]
    order = np.lexsort((pcols, prows, -scores))
    kept: list[tuple[int, int, float]] = []
    for i in order:
        pr, pc, ps = int(prows[i]), int(pcols[i]), float(scores[i])
        if all((pr - kr) ** 2 + (pc - kc) ** 2 > radius_px**2 for kr, kc, _ in kept):
            kept.append((pr, pc, ps))
    return kept


def label_candidates(centers, image: PhantomImage) -> list[str]:
    """malignant iff within 0.7 cm of an annotated malignant lesion center."""
    radius_px = image.cm_to_px(POSITIVE_RADIUS_CM)
    truths = [t.center for t in image.truth if t.malignant]
    labels = []
    for (r, c) in centers:
        hit = any(math.hypot(r - tr, c - tc) <= radius_px for tr, tc in truths)
        labels.append("malignant" if hit else "normal")
    return labels


# ---------------------------------------------------------------------------
# patch extraction


def patch_side_px(spacing_microns: float, side_cm: float = PATCH_SIDE_CM) -> int:
    return int(round(side_cm * 10000.0 / spacing_microns))


def extract_patch(pixels: np.ndarray, center: tuple[int, int], side_px: int) -> np.ndarray:
    """Patch of side_px centered on the candidate; outside area zero-filled."""
    h, w = pixels.shape
    r0 = int(round(center[0])) - side_px // 2
    c0 = int(round(center[1])) - side_px // 2
    out = np.zeros((side_px, side_px), dtype=np.float64)
    rs, re = max(0, r0), min(h, r0 + side_px)
    cs, ce = max(0, c0), min(w, c0 + side_px)
    if rs < re and cs < ce:
        out[rs - r0 : re - r0, cs - c0 : ce - c0] = pixels[rs:re, cs:ce]
    return out


@dataclass(frozen=True)
class AugmentSpec:
    """Lazy description of one augmented patch: applied at load time."""

    offset: tuple[int, int] = (0, 0)  # candidate-center translation, px
    bbox_jitter: tuple[int, int, int, int] = (0, 0, 0, 0)  # d(top,left,bottom,right)
    rotations: int = 0  # number of 90-degree rotations


def augment(kind: str, spacing_microns: float, seed: int) -> list[AugmentSpec]:
    """(1 + 16 + 16) x 4 = 132 specs for positives, 4 for negatives."""
    if kind == "negative":
        return [AugmentSpec(rotations=k) for k in range(4)]
    if kind != "positive":
        raise DetectorConfigError(f"unknown augmentation kind {kind!r}")
    rng = np.random.default_rng(seed)
    t = int(round(TRANSLATE_RANGE_CM * 10000.0 / spacing_microns))
    s = int(round(SCALE_RANGE_CM * 10000.0 / spacing_microns))
    base = [AugmentSpec()]
    for _ in range(N_TRANSLATIONS):
        dr, dc = rng.integers(-t, t + 1, 2)
        base.append(AugmentSpec(offset=(int(dr), int(dc))))
    for _ in range(N_SCALINGS):
        jit = tuple(int(v) for v in rng.integers(-s, s + 1, 4))
        base.append(AugmentSpec(bbox_jitter=jit))
    return [AugmentSpec(offset=a.offset, bbox_jitter=a.bbox_jitter, rotations=k)
            for a in base for k in range(4)]


def materialize(pixels: np.ndarray, center: tuple[int, int], spec: AugmentSpec,
                side_px: int) -> np.ndarray:
    """Apply an augmentation spec: shift and/or rescale, then rotate."""
    r = center[0] + spec.offset[0]
    c = center[1] + spec.offset[1]
    if spec.bbox_jitter != (0, 0, 0, 0):
        dt, dl, db, dr_ = spec.bbox_jitter
        half = side_px // 2
        top, left = r - half + dt, c - half + dl
        bottom, right = r + half + db, c + half + dr_
        if bottom - top < 4 or right - left < 4:
            top, left, bottom, right = r - half, c - half, r + half, c + half
        crop = extract_patch(pixels, ((top + bottom) // 2, (left + right) // 2),
                             max(bottom - top, right - left))
        zoom = side_px / crop.shape[0]
        patch = ndimage.zoom(crop, zoom, order=1)
        patch = patch[:side_px, :side_px]
        if patch.shape != (side_px, side_px):
            pad = np.zeros((side_px, side_px))
            pad[: patch.shape[0], : patch.shape[1]] = patch
            patch = pad
    else:
        patch = extract_patch(pixels, (r, c), side_px)
    return np.rot90(patch, spec.rotations)


# ---------------------------------------------------------------------------
# candidates CSV

CSV_FIELDS = ["case_id", "exam_ts", "laterality", "view", "row", "col", "score",
              "label", "contra_row", "contra_col", "prior_row", "prior_col"]


def write_candidates_csv(path, candidates: list[Candidate]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for cand in candidates:
            case_id, ts, lat, view = cand.image_ref
            contra = cand.counterpart_centers.get("contralateral", [])
            prior = cand.counterpart_centers.get("prior", [])
            writer.writerow({
                "case_id": case_id, "exam_ts": ts, "laterality": lat, "view": view,
                "row": cand.center[0], "col": cand.center[1],
                "score": f"{cand.detector_score:.6f}", "label": cand.label,
                "contra_row": contra[0][0] if contra else "",
                "contra_col": contra[0][1] if contra else "",
                "prior_row": prior[0][0] if prior else "",
                "prior_col": prior[0][1] if prior else "",
            })


def read_candidates_csv(path) -> list[Candidate]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            counterparts = {}
            if row["contra_row"] != "":
                counterparts["contralateral"] = [(int(row["contra_row"]), int(row["contra_col"]))]
            if row["prior_row"] != "":
                counterparts["prior"] = [(int(row["prior_row"]), int(row["prior_col"]))]
            out.append(Candidate(
                image_ref=(row["case_id"], int(row["exam_ts"]), row["laterality"], row["view"]),
                center=(int(row["row"]), int(row["col"])),
                detector_score=float(row["score"]),
                label=row["label"],
                counterpart_centers=counterparts,
            ))
    return out
