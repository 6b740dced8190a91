"""Synthetic paired mammogram-like phantoms.

Each study case holds one or two exams of up to four views (left/right x
CC/MLO) rendered in a canonical orientation with the chest wall at column
zero. The generator knows the full truth: breast mask, pectoral geometry,
landmark points, and every rendered focal density, which is what the
detector, mapping, and fusion stages are validated against.

Raw pixel values emulate attenuation-exponential detector counts so that
the log transform recovers a linear-attenuation representation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .splits import DEFAULT_FRACTIONS, split_cases

VIEWS = (("L", "CC"), ("L", "MLO"), ("R", "CC"), ("R", "MLO"))

RAW_LOG_GAIN = 3.0  # attenuation -> raw counts: raw ~ expm1(gain * A)
RAW_MAX = 60000


class GenerationError(Exception):
    pass


@dataclass
class LesionTruth:
    center: tuple[int, int]  # (row, col)
    radius_px: float
    malignant: bool
    asymmetry_strength: float
    growth_rate: float

    def __post_init__(self):
        if self.radius_px <= 0:
            raise GenerationError("lesion radius must be positive")


@dataclass
class Blob:
    """A rendered focal density: malignant lesion, its counterpart, or a
    benign distractor."""

    center: tuple[int, int]
    radius_px: float
    amplitude: float
    kind: str  # malignant | counterpart | distractor


@dataclass
class PhantomImage:
    pixels: np.ndarray  # uint16, HxW
    spacing_microns: float
    laterality: str  # L | R
    view: str  # CC | MLO
    truth: list[LesionTruth] = field(default_factory=list)
    blobs: list[Blob] = field(default_factory=list)
    true_mask: np.ndarray | None = None
    true_landmarks: tuple[tuple[float, float], tuple[float, float]] | None = None
    pectoral: tuple[float, float] | None = None  # (rho, theta) if MLO

    @property
    def shape(self):
        return self.pixels.shape

    def cm_to_px(self, cm: float) -> float:
        return cm * 10000.0 / self.spacing_microns


@dataclass
class Exam:
    views: dict  # (laterality, view) -> PhantomImage
    timestamp: int


@dataclass
class StudyCase:
    case_id: str
    exams: list[Exam]  # oldest -> newest
    split_tag: str = ""

    @property
    def current(self) -> Exam:
        return self.exams[-1]


@dataclass
class GenConfig:
    n_cases: int = 100
    image_size: tuple[int, int] = (256, 256)
    spacing_microns: float = 1000.0
    positive_fraction: float = 0.4
    lesion_per_view_prob: float = 0.25
    distractors_per_image: tuple[int, int] = (3, 8)
    asymmetry_strength: float = 1.0
    growth_rate: float = 1.0
    missing_prior_fraction: float = 0.3
    skip_round_fraction: float = 0.15
    malignant_amp: tuple[float, float] = (0.22, 0.42)
    distractor_amp: tuple[float, float] = (0.18, 0.38)
    malignant_radius_cm: tuple[float, float] = (0.55, 1.0)
    distractor_radius_cm: tuple[float, float] = (0.5, 0.95)
    split_fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def validate(self):
        if self.n_cases <= 0:
            raise GenerationError("n_cases must be positive")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise GenerationError("positive_fraction must be in [0,1]")


# ---------------------------------------------------------------------------
# per-view geometry


@dataclass
class ViewGeometry:
    r0: float  # ellipse center row (on the chest wall)
    a: float  # semi-axis along columns
    b: float  # semi-axis along rows
    pect_c_top: float | None  # pectoral line column at row 0 (MLO only)
    pect_theta: float | None  # pectoral angle from vertical, radians (MLO only)

    def inside(self, r: float, c: float) -> bool:
        if c < 0:
            return False
        return (c / self.a) ** 2 + ((r - self.r0) / self.b) ** 2 <= 1.0

    def in_pectoral(self, r: float, c: float) -> bool:
        if self.pect_c_top is None:
            return False
        return c < self.pect_c_top - r * math.tan(self.pect_theta)

    def pectoral_distance(self, r: float, c: float) -> float:
        """Signed-free distance to the reference line (pectoral or chest wall)."""
        if self.pect_c_top is None:
            return abs(c)
        t = math.tan(self.pect_theta)
        # line: c + t*r - c_top = 0
        return abs(c + t * r - self.pect_c_top) / math.sqrt(1.0 + t * t)

    def landmarks(self, shape) -> tuple[tuple[float, float], tuple[float, float]]:
        """(p1, p2): contour point farthest from the reference line and the
        foot of its perpendicular on that line."""
        phis = np.linspace(-math.pi / 2, math.pi / 2, 4001)
        rr = self.r0 + self.b * np.sin(phis)
        cc = self.a * np.cos(phis)
        ok = (rr >= 0) & (rr <= shape[0] - 1) & (cc <= shape[1] - 1)
        rr, cc = rr[ok], cc[ok]
        if self.pect_c_top is None:
            i = int(np.argmax(cc))
            p1 = (float(rr[i]), float(cc[i]))
            p2 = (p1[0], 0.0)
            return p1, p2
        t = math.tan(self.pect_theta)
        d = np.abs(cc + t * rr - self.pect_c_top) / math.sqrt(1.0 + t * t)
        i = int(np.argmax(d))
        p1 = (float(rr[i]), float(cc[i]))
        # project p1 onto the line c + t*r = c_top
        n = np.array([t, 1.0]) / math.sqrt(1.0 + t * t)  # unit normal in (r, c)
        offset = (p1[1] + t * p1[0] - self.pect_c_top) / math.sqrt(1.0 + t * t)
        p2 = (p1[0] - offset * n[0], p1[1] - offset * n[1])
        p2 = (min(max(p2[0], 0.0), shape[0] - 1), min(max(p2[1], 0.0), shape[1] - 1))
        return p1, p2


def _sample_geometry(base: ViewGeometry, view: str, rng: np.random.Generator,
                     shape) -> ViewGeometry:
    h, w = shape
    return ViewGeometry(
        r0=base.r0 + rng.uniform(-3, 3),
        a=min(base.a + rng.uniform(-4, 4), w - 6),
        b=min(base.b + rng.uniform(-4, 4), h * 0.48),
        pect_c_top=(base.pect_c_top + rng.uniform(-3, 3)) if view == "MLO" else None,
        pect_theta=(base.pect_theta + rng.uniform(-0.04, 0.04)) if view == "MLO" else None,
    )


def _base_geometry(rng: np.random.Generator, shape) -> ViewGeometry:
    h, w = shape
    return ViewGeometry(
        r0=h * rng.uniform(0.45, 0.55),
        a=w * rng.uniform(0.6, 0.72),
        b=h * rng.uniform(0.34, 0.42),
        pect_c_top=w * rng.uniform(0.34, 0.46),
        pect_theta=math.radians(rng.uniform(28, 52)),
    )


# ---------------------------------------------------------------------------
# rendering


def _render(geom: ViewGeometry, blobs: list[Blob], shape,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    mask = ((cc / geom.a) ** 2 + ((rr - geom.r0) / geom.b) ** 2) <= 1.0
    atten = np.full(shape, 0.05) + 0.01 * rng.standard_normal(shape)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), 3.0) * 0.12
    atten[mask] = 0.35 + texture[mask]
    if geom.pect_c_top is not None:
        pect = mask & (cc < geom.pect_c_top - np.tan(geom.pect_theta) * rr)
        atten[pect] += 0.18
    for blob in blobs:
        br, bc = blob.center
        sigma = blob.radius_px / 2.0
        r_lo = max(0, int(br - 3 * blob.radius_px))
        r_hi = min(h, int(br + 3 * blob.radius_px) + 1)
        c_lo = max(0, int(bc - 3 * blob.radius_px))
        c_hi = min(w, int(bc + 3 * blob.radius_px) + 1)
        sub_r, sub_c = np.mgrid[r_lo:r_hi, c_lo:c_hi]
        d2 = (sub_r - br) ** 2 + (sub_c - bc) ** 2
        atten[r_lo:r_hi, c_lo:c_hi] += blob.amplitude * np.exp(-d2 / (2 * sigma**2))
    atten = np.clip(atten, 0.0, 1.1)
    raw = np.expm1(RAW_LOG_GAIN * atten) / np.expm1(RAW_LOG_GAIN * 1.1) * RAW_MAX
    return np.clip(raw, 0, 65535).astype(np.uint16), mask


def log_transform_values(raw: np.ndarray) -> np.ndarray:
    """log(1 + raw): pixel values become linear in attenuation."""
    if (np.asarray(raw) < 0).any():
        raise GenerationError("raw pixel values must be non-negative")
    return np.log1p(np.asarray(raw, dtype=np.float64))


def log_transform(image: PhantomImage) -> PhantomImage:
    """Log-transformed copy, rescaled to the 16-bit range (monotone)."""
    vals = log_transform_values(image.pixels)
    out = np.round(vals / math.log1p(65535.0) * 65535.0).astype(np.uint16)
    return PhantomImage(
        pixels=out,
        spacing_microns=image.spacing_microns,
        laterality=image.laterality,
        view=image.view,
        truth=image.truth,
        blobs=image.blobs,
        true_mask=image.true_mask,
        true_landmarks=image.true_landmarks,
        pectoral=image.pectoral,
    )


# ---------------------------------------------------------------------------
# location helpers


def _map_point(q, src_lm, dst_lm):
    """q' = q - p + p' with p = (p1 row, p2 column)."""
    p = (src_lm[0][0], src_lm[1][1])
    pp = (dst_lm[0][0], dst_lm[1][1])
    return (q[0] - p[0] + pp[0], q[1] - p[1] + pp[1])


def _sample_center(geom: ViewGeometry, radius: float, shape,
                   rng: np.random.Generator, max_tries: int = 200):
    h, w = shape
    margin = radius + 4.0
    for _ in range(max_tries):
        phi = rng.uniform(-1.2, 1.2)
        rho = rng.uniform(0.25, 0.85)
        r = geom.r0 + rho * (geom.b - margin) * math.sin(phi)
        c = max(margin, rho * (geom.a - margin) * math.cos(phi))
        if not (margin <= r < h - margin and margin <= c < w - margin):
            continue
        if not geom.inside(r, c) or geom.in_pectoral(r, c):
            continue
        if geom.in_pectoral(r, c + margin) or not geom.inside(r, c + margin):
            continue
        if not geom.inside(r + margin, c) or not geom.inside(r - margin, c):
            continue
        return (float(r), float(c))
    return None


def _nudge_inside(q, geom: ViewGeometry, radius: float, shape):
    """Pull a mapped point toward the breast interior if it fell outside."""
    h, w = shape
    margin = radius + 4.0
    r, c = q
    r = min(max(r, margin), h - 1 - margin)
    c = min(max(c, margin), w - 1 - margin)
    target = (geom.r0, geom.a * 0.45)
    for _ in range(50):
        if geom.inside(r, c + margin) and geom.inside(r + margin, c) and \
                geom.inside(r - margin, c) and not geom.in_pectoral(r, c + margin) \
                and c >= margin:
            return (r, c)
        r += (target[0] - r) * 0.15
        c += (target[1] - c) * 0.15
    return target


# ---------------------------------------------------------------------------
# case generation


def generate_case(config: GenConfig, case_index: int, seed: int) -> StudyCase:
    rng = np.random.default_rng([seed, case_index])
    shape = config.image_size
    is_positive = rng.random() < config.positive_fraction
    has_prior = rng.random() >= config.missing_prior_fraction
    skipped = has_prior and rng.random() < config.skip_round_fraction
    timestamps = ([3 - (2 if skipped else 1), 3] if has_prior else [3])

    base = _base_geometry(rng, shape)
    geoms = {}  # (ts, lat, view) -> ViewGeometry
    landmarks = {}
    for ts in timestamps:
        for lat, view in VIEWS:
            g = _sample_geometry(base, view, rng, shape)
            geoms[(ts, lat, view)] = g
            landmarks[(ts, lat, view)] = g.landmarks(shape)

    cur_ts = timestamps[-1]
    blobs: dict[tuple, list[Blob]] = {k: [] for k in geoms}
    truths: dict[tuple, list[LesionTruth]] = {k: [] for k in geoms}

    def other(lat):
        return "L" if lat == "R" else "R"

    # benign distractor densities: symmetric across lateralities, static in time
    for view in ("CC", "MLO"):
        n = int(rng.integers(config.distractors_per_image[0], config.distractors_per_image[1] + 1))
        for _ in range(n):
            radius = rng.uniform(*config.distractor_radius_cm) * 10000.0 / config.spacing_microns
            amp = rng.uniform(*config.distractor_amp)
            center = _sample_center(geoms[(cur_ts, "R", view)], radius, shape, rng)
            if center is None:
                continue
            for ts in timestamps:
                for lat in ("R", "L"):
                    key = (ts, lat, view)
                    if lat == "R" and ts == cur_ts:
                        q = center
                    else:
                        q = _map_point(center, landmarks[(cur_ts, "R", view)], landmarks[key])
                        q = _nudge_inside(q, geoms[key], radius, shape)
                        q = (q[0] + rng.uniform(-1, 1), q[1] + rng.uniform(-1, 1))
                    blobs[key].append(Blob((q[0], q[1]), radius, amp, "distractor"))

    # malignant lesions: current exam only, suppressed contra-laterally and
    # shrunk (or absent) in the prior
    if is_positive:
        placed = 0
        for attempt in range(8):
            for lat, view in VIEWS:
                if rng.random() >= config.lesion_per_view_prob:
                    continue
                radius = rng.uniform(*config.malignant_radius_cm) * 10000.0 / config.spacing_microns
                amp = rng.uniform(*config.malignant_amp)
                key = (cur_ts, lat, view)
                center = _sample_center(geoms[key], radius, shape, rng)
                if center is None:
                    continue
                placed += 1
                blobs[key].append(Blob(center, radius, amp, "malignant"))
                truths[key].append(LesionTruth(
                    center=(int(round(center[0])), int(round(center[1]))),
                    radius_px=radius, malignant=True,
                    asymmetry_strength=config.asymmetry_strength,
                    growth_rate=config.growth_rate))
                # contra-lateral counterpart, scaled down by asymmetry strength
                contra_amp = amp * (1.0 - config.asymmetry_strength)
                if contra_amp > 1e-6:
                    ckey = (cur_ts, other(lat), view)
                    q = _map_point(center, landmarks[key], landmarks[ckey])
                    q = _nudge_inside(q, geoms[ckey], radius, shape)
                    blobs[ckey].append(Blob(q, radius, contra_amp, "counterpart"))
                # prior counterpart, strictly smaller under positive growth
                if has_prior:
                    prior_ts = timestamps[0]
                    prior_radius = radius / (1.0 + config.growth_rate)
                    prior_amp = amp / (1.0 + config.growth_rate)
                    if prior_amp > 1e-6:
                        pkey = (prior_ts, lat, view)
                        q = _map_point(center, landmarks[key], landmarks[pkey])
                        q = _nudge_inside(q, geoms[pkey], prior_radius, shape)
                        blobs[pkey].append(Blob(q, prior_radius, prior_amp, "counterpart"))
            if placed:
                break

    exams = []
    for ts in timestamps:
        views = {}
        for lat, view in VIEWS:
            key = (ts, lat, view)
            g = geoms[key]
            pixels, mask = _render(g, blobs[key], shape, rng)
            theta = g.pect_theta if view == "MLO" else None
            rho = None
            if theta is not None:
                # (rho, theta) of the line c*cos? use normal form: c + tan(t)*r = c_top
                rho = g.pect_c_top * math.cos(theta)
            views[(lat, view)] = PhantomImage(
                pixels=pixels,
                spacing_microns=config.spacing_microns,
                laterality=lat,
                view=view,
                truth=truths[key],
                blobs=blobs[key],
                true_mask=mask,
                true_landmarks=landmarks[key],
                pectoral=(rho, theta) if theta is not None else None,
            )
        exams.append(Exam(views=views, timestamp=ts))
    return StudyCase(case_id=f"case{case_index:05d}", exams=exams)


def generate_dataset(config: GenConfig, seed: int) -> list[StudyCase]:
    """Deterministic dataset of study cases with case-level split tags."""
    config.validate()
    cases = [generate_case(config, i, seed) for i in range(config.n_cases)]
    if config.n_cases >= 3:
        tags = split_cases([c.case_id for c in cases], config.split_fractions, seed=seed)
        for c in cases:
            c.split_tag = tags[c.case_id]
    return cases


# ---------------------------------------------------------------------------
# generator-truth Bayes oracle

_AMP_NOISE = 0.03


def oracle_entries(cases: list[StudyCase]) -> list[tuple[int, float, float]]:
    """(label, primary amplitude, contra-lateral amplitude) per focal blob of
    every current exam; the 'measurements' an ideal observer would make."""
    out = []
    for case in cases:
        for (lat, view), img in case.current.views.items():
            for blob in img.blobs:
                if blob.kind == "malignant":
                    asym = img.truth[0].asymmetry_strength if img.truth else 1.0
                    out.append((1, blob.amplitude, blob.amplitude * (1.0 - asym)))
                elif blob.kind == "distractor":
                    out.append((0, blob.amplitude, blob.amplitude))
    return out


def bayes_oracle_scores(entries, config: GenConfig, use_secondary: bool,
                        seed: int = 0, noise_sd: float = _AMP_NOISE):
    """Likelihood-ratio scores under the generator's own amplitude model.

    Observations are the true blob amplitudes plus Gaussian readout noise;
    class likelihoods are integrated over the generator's uniform amplitude
    priors by direct quadrature.
    """
    rng = np.random.default_rng(seed)
    labels = np.array([e[0] for e in entries])
    obs_p = np.array([e[1] for e in entries]) + noise_sd * rng.standard_normal(len(entries))
    obs_s = np.array([e[2] for e in entries]) + noise_sd * rng.standard_normal(len(entries))

    grid = np.linspace(0.0, 0.6, 1201)

    def lik(obs_p_i, obs_s_i, amp_range, secondary_gain):
        lo, hi = amp_range
        prior = ((grid >= lo) & (grid <= hi)).astype(float)
        prior /= prior.sum()
        lp = np.exp(-0.5 * ((obs_p_i - grid) / noise_sd) ** 2)
        if use_secondary:
            ls = np.exp(-0.5 * ((obs_s_i - secondary_gain * grid) / noise_sd) ** 2)
        else:
            ls = 1.0
        return float(np.sum(prior * lp * ls))

    scores = np.empty(len(entries))
    for i in range(len(entries)):
        lm = lik(obs_p[i], obs_s[i], config.malignant_amp, 1.0 - config.asymmetry_strength)
        lb = lik(obs_p[i], obs_s[i], config.distractor_amp, 1.0)
        scores[i] = lm / (lm + lb + 1e-300)
    return scores, labels


# ---------------------------------------------------------------------------
# on-disk format: 16-bit PGM + per-case manifest JSON


def write_pgm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(pixels.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise GenerationError(f"not a binary PGM: {path}")
        dims = f.readline().split()
        while dims and dims[0].startswith(b"#"):
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(f.read(), dtype=dtype)[: h * w]
        return data.reshape(h, w).astype(np.uint16)


def save_dataset(cases: list[StudyCase], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for case in cases:
        case_dir = out_dir / case.case_id
        case_dir.mkdir(exist_ok=True)
        manifest = {"case_id": case.case_id, "split_tag": case.split_tag, "exams": []}
        for exam in case.exams:
            exam_entry = {"timestamp": exam.timestamp, "views": []}
            for (lat, view), img in sorted(exam.views.items()):
                name = f"t{exam.timestamp}_{lat}_{view}.pgm"
                write_pgm(case_dir / name, img.pixels)
                mask_name = f"t{exam.timestamp}_{lat}_{view}_mask.pgm"
                write_pgm(case_dir / mask_name, img.true_mask.astype(np.uint16) * 65535)
                exam_entry["views"].append({
                    "laterality": lat,
                    "view": view,
                    "path": name,
                    "mask_path": mask_name,
                    "spacing_microns": img.spacing_microns,
                    "landmarks": [list(img.true_landmarks[0]), list(img.true_landmarks[1])],
                    "pectoral": list(img.pectoral) if img.pectoral else None,
                    "lesions": [
                        {"center": list(t.center), "radius_px": t.radius_px,
                         "malignant": t.malignant,
                         "asymmetry_strength": t.asymmetry_strength,
                         "growth_rate": t.growth_rate}
                        for t in img.truth
                    ],
                    "blobs": [
                        {"center": list(b.center), "radius_px": b.radius_px,
                         "amplitude": b.amplitude, "kind": b.kind}
                        for b in img.blobs
                    ],
                })
            manifest["exams"].append(exam_entry)
        with open(case_dir / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(root) -> list[StudyCase]:
    root = Path(root)
    cases = []
    for case_dir in sorted(p for p in root.iterdir() if (p / "manifest.json").exists()):
        with open(case_dir / "manifest.json") as f:
            manifest = json.load(f)
        exams = []
        for exam_entry in manifest["exams"]:
            views = {}
            for v in exam_entry["views"]:
                img = PhantomImage(
                    pixels=read_pgm(case_dir / v["path"]),
                    spacing_microns=v["spacing_microns"],
                    laterality=v["laterality"],
                    view=v["view"],
                    truth=[LesionTruth(tuple(t["center"]), t["radius_px"], t["malignant"],
                                       t["asymmetry_strength"], t["growth_rate"])
                           for t in v["lesions"]],
                    blobs=[Blob(tuple(b["center"]), b["radius_px"], b["amplitude"], b["kind"])
                           for b in v["blobs"]],
                    true_mask=read_pgm(case_dir / v["mask_path"]) > 0,
                    true_landmarks=(tuple(v["landmarks"][0]), tuple(v["landmarks"][1])),
                    pectoral=tuple(v["pectoral"]) if v["pectoral"] else None,
                )
                views[(v["laterality"], v["view"])] = img
            exams.append(Exam(views=views, timestamp=exam_entry["timestamp"]))
        cases.append(StudyCase(case_id=manifest["case_id"], exams=exams,
                               split_tag=manifest["split_tag"]))
    return cases
