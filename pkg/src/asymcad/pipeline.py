"""Experiment orchestration: generation, detection, mapping, balanced
training, feature extraction, boosted-tree stage, evaluation, reporting.

Every stage reads and writes artifacts under a single output directory so
the stages can also run standalone from the command line. A full run is
deterministic per seed: rerunning emits byte-identical metrics JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import detector as D
from . import evalroc as E
from . import fusion as FU
from . import gbt as GB
from . import geometry as G
from . import network as N
from . import phantom as P
from . import tensor as T


class ConfigError(Exception):
    pass


class TrainingError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


ARCHITECTURES = ("baseline", "twostream", "featgbt")


@dataclass
class DetectorParams:
    scales_cm: tuple = (0.1, 0.2, 0.35, 0.6)
    nms_radius_cm: float = 0.5
    nms_threshold: float = 0.25
    # forest posteriors saturate into flat plateaus over strong blobs; a
    # little smoothing restores a strict peak for the suppression stage
    nms_smooth_sigma: float = 2.0
    max_per_image: int = 8
    pos_pixels_per_image: int = 300
    neg_pixels_per_image: int = 800


@dataclass
class TrainParams:
    learning_rate: float = 0.01
    dropout_rate: float = 0.25
    l2: float = 1e-4
    batch_size: int = 32
    epochs: int = 6


@dataclass
class GbtStageParams:
    cv_grid: tuple = ((0.1, 2), (0.3, 2), (0.1, 3), (0.3, 3))
    cv_rounds: int = 20
    cv_row_cap: int = 600
    final_rounds: int = 60


@dataclass
class EvalParams:
    n_boot: int = 5000
    pauc_interval: tuple = (0.0, 0.2)
    group_by_case: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/latest"
    gen: P.GenConfig = field(default_factory=P.GenConfig)
    detector: DetectorParams = field(default_factory=DetectorParams)
    train: TrainParams = field(default_factory=TrainParams)
    secondary: str = "contralateral"
    imputation: str = "black"
    patch_side_cm: float = 5.0
    gbt: GbtStageParams = field(default_factory=GbtStageParams)
    eval: EvalParams = field(default_factory=EvalParams)

    def patch_side_px(self) -> int:
        return D.patch_side_px(self.gen.spacing_microns, self.patch_side_cm)

    def resolved(self) -> dict:
        """Every field, defaults included, for the config echo."""
        return asdict(self)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = json.load(f)
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig()
    nested = {"gen": P.GenConfig, "detector": DetectorParams, "train": TrainParams,
              "gbt": GbtStageParams, "eval": EvalParams}
    for key, value in raw.items():
        if key in nested:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            section = nested[key]()
            for k, v in value.items():
                if not hasattr(section, k):
                    raise ConfigError(f"unknown config key {key}.{k}")
                setattr(section, k, tuple(v) if isinstance(v, list) else v)
            setattr(cfg, key, section)
        elif hasattr(cfg, key):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if cfg.secondary not in FU.SECONDARY_MODES:
        raise ConfigError(f"unknown secondary mode {cfg.secondary!r}")
    if cfg.imputation not in FU.IMPUTATION_MODES:
        raise ConfigError(f"unknown imputation mode {cfg.imputation!r}")
    return cfg


def write_resolved_config(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w") as f:
        json.dump(cfg.resolved(), f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# balanced minibatch sampler


class BalancedSampler:
    """Half of each minibatch walks the negative pool in order; the other
    half is drawn uniformly from the positive pool. One epoch touches every
    negative exactly once."""

    def __init__(self, positives: list, negatives: list, batch_size: int, seed: int):
        if batch_size < 2 or batch_size % 2:
            raise ConfigError("batch size must be even and >= 2")
        if not positives:
            raise TrainingError("positive pool is empty")
        if not negatives:
            raise TrainingError("negative pool is empty")
        self.positives = positives
        self.negatives = negatives
        self.half = batch_size // 2
        self.rng = np.random.default_rng(seed)

    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.negatives) / self.half)

    def epoch(self):
        for start in range(0, len(self.negatives), self.half):
            neg = self.negatives[start : start + self.half]
            pick = self.rng.integers(0, len(self.positives), len(neg))
            pos = [self.positives[i] for i in pick]
            yield [(p, 1) for p in pos] + [(n, 0) for n in neg]


# ---------------------------------------------------------------------------
# stage: generate


def stage_generate(cfg: RunConfig) -> list[P.StudyCase]:
    cases = P.generate_dataset(cfg.gen, seed=cfg.seed)
    P.save_dataset(cases, Path(cfg.out_dir) / "dataset")
    return cases


def load_cases(cfg: RunConfig) -> list[P.StudyCase]:
    root = Path(cfg.out_dir) / "dataset"
    if not root.exists():
        raise ConfigError(f"no dataset under {root}; run generate first")
    return P.load_dataset(root)


# ---------------------------------------------------------------------------
# stage: detect


def _scales_px(cfg: RunConfig) -> list[float]:
    px = [max(1.0, s * 10000.0 / cfg.gen.spacing_microns) for s in cfg.detector.scales_cm]
    out: list[float] = []
    for v in px:
        if not out or v > out[-1] + 1e-9:
            out.append(v)
    return out


def _blob_target(img: P.PhantomImage) -> np.ndarray:
    rr, cc = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    target = np.zeros(img.shape, bool)
    for blob in img.blobs:
        d2 = (rr - blob.center[0]) ** 2 + (cc - blob.center[1]) ** 2
        target |= d2 <= blob.radius_px**2
    return target


def _cap(idx: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if idx.size <= cap:
        return idx
    return rng.choice(idx, cap, replace=False)


def stage_detect(cfg: RunConfig, cases: list[P.StudyCase]) -> list[D.Candidate]:
    scales = _scales_px(cfg)
    rng = np.random.default_rng([cfg.seed, 101])
    stacks: dict[tuple, D.FeatureStack] = {}
    masks: dict[tuple, np.ndarray] = {}

    def features_for(case, lat, view):
        key = (case.case_id, case.current.timestamp, lat, view)
        if key not in stacks:
            img = case.current.views[(lat, view)]
            log_img = P.log_transform(img)
            stacks[key] = D.compute_features(log_img.pixels.astype(np.float64), scales)
            masks[key] = img.true_mask if img.true_mask is not None \
                else G.segment_breast(log_img.pixels)
        return stacks[key], masks[key]

    # pixel classifier trained strictly on the train split
    xs, ys = [], []
    for case in cases:
        if case.split_tag != "train":
            continue
        for lat, view in P.VIEWS:
            img = case.current.views[(lat, view)]
            stack, mask = features_for(case, lat, view)
            target = _blob_target(img)
            rows = stack.as_rows()
            pos_idx = _cap(np.flatnonzero(target.ravel()),
                           cfg.detector.pos_pixels_per_image, rng)
            neg_idx = _cap(np.flatnonzero((~target & mask).ravel()),
                           cfg.detector.neg_pixels_per_image, rng)
            xs.append(rows[np.r_[pos_idx, neg_idx]])
            ys.append(np.r_[np.ones(pos_idx.size, int), np.zeros(neg_idx.size, int)])
    if not xs:
        raise TrainingError("no train-split cases available for the detector")
    forest = D.train_pixel_classifier(np.vstack(xs), np.concatenate(ys),
                                      seed=cfg.seed & 0x7FFFFFFF)

    radius_px = cfg.detector.nms_radius_cm * 10000.0 / cfg.gen.spacing_microns
    candidates: list[D.Candidate] = []
    for case in cases:
        for lat, view in P.VIEWS:
            img = case.current.views[(lat, view)]
            stack, mask = features_for(case, lat, view)
            prob = D.likelihood_map(forest, stack)
            prob[~mask] = 0.0
            if cfg.detector.nms_smooth_sigma > 0:
                from scipy import ndimage

                prob = ndimage.gaussian_filter(prob, cfg.detector.nms_smooth_sigma)
                prob[~mask] = 0.0
            peaks = D.nonmax_suppress(prob, radius_px, cfg.detector.nms_threshold)
            peaks = peaks[: cfg.detector.max_per_image]
            labels = D.label_candidates([(r, c) for r, c, _ in peaks], img)
            for (r, c, score), label in zip(peaks, labels):
                candidates.append(D.Candidate(
                    image_ref=(case.case_id, case.current.timestamp, lat, view),
                    center=(r, c), detector_score=score, label=label))
    D.write_candidates_csv(Path(cfg.out_dir) / "candidates.csv", candidates)
    return candidates


# ---------------------------------------------------------------------------
# stage: map


def _other(lat: str) -> str:
    return "L" if lat == "R" else "R"


def stage_map(cfg: RunConfig, cases: list[P.StudyCase],
              candidates: list[D.Candidate]) -> list[D.Candidate]:
    """Fills mapped counterpart locations using landmarks estimated from the
    images themselves."""
    landmark_cache: dict[tuple, G.Landmarks] = {}

    def landmarks_of(case, exam, lat, view):
        key = (case.case_id, exam.timestamp, lat, view)
        if key not in landmark_cache:
            pixels = P.log_transform(exam.views[(lat, view)]).pixels
            landmark_cache[key] = G.extract_landmarks(pixels, view)
        return landmark_cache[key]

    by_id = {c.case_id: c for c in cases}
    for cand in candidates:
        case_id, ts, lat, view = cand.image_ref
        case = by_id[case_id]
        src = landmarks_of(case, case.current, lat, view)
        # same view, opposite breast
        contra_img = case.current.views[(_other(lat), view)]
        dst = landmarks_of(case, case.current, _other(lat), view)
        mapped = G.map_location(cand.center, src, dst, dst_shape=contra_img.shape)
        cand.counterpart_centers["contralateral"] = [
            (int(round(mapped.target[0])), int(round(mapped.target[1])))]
        # same view, previous round, if one exists
        priors = [e for e in case.exams if e.timestamp < ts]
        if priors:
            prior = max(priors, key=lambda e: e.timestamp)
            dstp = landmarks_of(case, prior, lat, view)
            mapped = G.map_location(cand.center, src, dstp,
                                    dst_shape=prior.views[(lat, view)].shape)
            cand.counterpart_centers["prior"] = [
                (int(round(mapped.target[0])), int(round(mapped.target[1])))]
    D.write_candidates_csv(Path(cfg.out_dir) / "candidates_mapped.csv", candidates)
    return candidates


# ---------------------------------------------------------------------------
# stage: train


def network_spec(cfg: RunConfig, two_stream: bool) -> N.NetworkSpec:
    side = cfg.patch_side_px()
    return N.NetworkSpec(
        layers=N.vgg_layers(dropout_rate=cfg.train.dropout_rate),
        input_shape=(1, side, side),
        two_stream=two_stream)


@dataclass
class TrainEntry:
    """One (candidate, augmentation) pair in a sampler pool."""

    cand_index: int
    spec: D.AugmentSpec


class PairLoader:
    """Materializes network input patches for candidates, with caching of
    the per-image normalized arrays."""

    def __init__(self, cfg: RunConfig, cases: list[P.StudyCase],
                 candidates: list[D.Candidate]):
        self.cfg = cfg
        self.cases = {c.case_id: c for c in cases}
        self.candidates = candidates
        self.side = cfg.patch_side_px()
        self.fspec = FU.FusionSpec(secondary=cfg.secondary,
                                   imputation=cfg.imputation,
                                   patch_side_px=self.side)
        self._cache: dict[tuple, np.ndarray] = {}

    def _array(self, case, exam, lat, view) -> np.ndarray:
        key = (case.case_id, exam.timestamp, lat, view)
        if key not in self._cache:
            self._cache[key] = FU.patch_input(exam.views[(lat, view)].pixels)
        return self._cache[key]

    def primary(self, cand: D.Candidate, spec: D.AugmentSpec) -> np.ndarray:
        case_id, ts, lat, view = cand.image_ref
        case = self.cases[case_id]
        arr = self._array(case, case.current, lat, view)
        return D.materialize(arr, cand.center, spec, self.side)

    def pair(self, cand: D.Candidate, spec: D.AugmentSpec):
        """(primary, secondary, imputation_used); same augmentation applied
        to both streams."""
        case_id, ts, lat, view = cand.image_ref
        case = self.cases[case_id]
        prim = self.primary(cand, spec)
        img, center, used = FU.secondary_source(case, cand, self.fspec)
        if img is not None:
            exam = case.current if used == "none" and self.fspec.secondary == "contralateral" \
                else next(e for e in case.exams if (lat, view) in e.views
                          and e.views[(lat, view)] is img)
            arr = self._array(case, exam, img.laterality, view)
            sec = D.materialize(arr, center, spec, self.side)
        elif used == "black":
            sec = np.zeros_like(prim)
        else:
            sec = prim.copy()
        return prim, sec, used


def build_pools(cfg: RunConfig, candidates: list[D.Candidate],
                cases: list[P.StudyCase], split: str):
    tags = {c.case_id: c.split_tag for c in cases}
    positives: list[TrainEntry] = []
    negatives: list[TrainEntry] = []
    for i, cand in enumerate(candidates):
        if tags[cand.image_ref[0]] != split:
            continue
        kind = "positive" if cand.label == "malignant" else "negative"
        specs = D.augment(kind, cfg.gen.spacing_microns, seed=cfg.seed + i)
        pool = positives if kind == "positive" else negatives
        pool.extend(TrainEntry(cand_index=i, spec=s) for s in specs)
    return positives, negatives


def _arch_tag(arch: str, cfg: RunConfig) -> str:
    if arch == "baseline":
        return "baseline"
    return f"{arch}_{cfg.secondary}_{cfg.imputation}"


def stage_train(cfg: RunConfig, cases: list[P.StudyCase],
                candidates: list[D.Candidate], arch: str) -> N.NetworkState:
    if arch not in ("baseline", "twostream"):
        raise ConfigError(f"train stage handles baseline|twostream, not {arch!r}")
    two_stream = arch == "twostream"
    spec = network_spec(cfg, two_stream)
    state = N.init_state(spec, seed=cfg.seed)
    loader = PairLoader(cfg, cases, candidates)
    positives, negatives = build_pools(cfg, candidates, cases, "train")
    sampler = BalancedSampler(positives, negatives, cfg.train.batch_size,
                              seed=cfg.seed + 7)
    dropout_rng = np.random.default_rng([cfg.seed, 11])
    params = state.parameters()
    losses = []
    train_case_ids = sorted({candidates[e.cand_index].image_ref[0]
                             for e in positives + negatives})
    for _ in range(cfg.train.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for batch in sampler.epoch():
            state.zero_grads()
            batch_loss = 0.0
            for entry, label in batch:
                cand = candidates[entry.cand_index]
                if two_stream:
                    prim, sec, _ = loader.pair(cand, entry.spec)
                    probs = N.forward_twostream(prim, sec, spec, state, rng=dropout_rng)
                else:
                    prim = loader.primary(cand, entry.spec)
                    probs = N.forward_single(prim, spec, state, rng=dropout_rng)
                loss = T.cross_entropy(probs, label)
                T.backward(loss)
                batch_loss += float(loss.data)
            for p in params:
                p.grad /= len(batch)
            T.sgd_step(params, cfg.train.learning_rate, cfg.train.l2)
            epoch_loss += batch_loss / len(batch)
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    tag = _arch_tag(arch, cfg)
    out = Path(cfg.out_dir)
    N.save_state(state, out / f"model_{tag}.bin")
    with open(out / f"trainlog_{tag}.json", "w") as f:
        json.dump({"epoch_losses": losses, "arch": arch,
                   "train_case_ids": train_case_ids,
                   "n_positive_specs": len(positives),
                   "n_negative_specs": len(negatives)}, f, indent=1, sort_keys=True)
    return state


def score_candidates(cfg: RunConfig, cases: list[P.StudyCase],
                     candidates: list[D.Candidate], arch: str,
                     state: N.NetworkState, split: str):
    """Posterior of the malignant class for every candidate in a split."""
    spec = network_spec(cfg, arch == "twostream")
    loader = PairLoader(cfg, cases, candidates)
    tags = {c.case_id: c.split_tag for c in cases}
    base_spec = D.AugmentSpec()
    scores, labels, groups = [], [], []
    for cand in candidates:
        if tags[cand.image_ref[0]] != split:
            continue
        if arch == "twostream":
            prim, sec, _ = loader.pair(cand, base_spec)
            probs = N.forward_twostream(prim, sec, spec, state, rng=None)
        else:
            prim = loader.primary(cand, base_spec)
            probs = N.forward_single(prim, spec, state, rng=None)
        scores.append(float(probs.data[1]))
        labels.append(1 if cand.label == "malignant" else 0)
        groups.append(cand.image_ref[0])
    return np.array(scores), np.array(labels), np.array(groups)


# ---------------------------------------------------------------------------
# stage: extract features + gbt


def stage_extract(cfg: RunConfig, cases: list[P.StudyCase],
                  candidates: list[D.Candidate],
                  baseline_state: N.NetworkState):
    """Frozen-baseline FC1 features of primary and secondary patches,
    concatenated to one row per candidate."""
    spec = network_spec(cfg, two_stream=False)
    loader = PairLoader(cfg, cases, candidates)
    tags = {c.case_id: c.split_tag for c in cases}
    base_spec = D.AugmentSpec()
    rows, manifest = [], []
    for cand in candidates:
        prim, sec, used = loader.pair(cand, base_spec)
        fp = N.extract_fc1(prim, spec, baseline_state)
        fs = N.extract_fc1(sec, spec, baseline_state)
        rows.append(np.concatenate([fp, fs]))
        case_id, ts, lat, view = cand.image_ref
        manifest.append({
            "case_id": case_id, "exam_ts": ts, "laterality": lat, "view": view,
            "row": cand.center[0], "col": cand.center[1],
            "label": 1 if cand.label == "malignant" else 0,
            "imputation_used": used, "split_tag": tags[case_id]})
    rows = np.array(rows)
    out = Path(cfg.out_dir)
    tag = f"{cfg.secondary}_{cfg.imputation}"
    FU.write_features(out / f"features_{tag}.bin", rows)
    FU.write_pairs_manifest(out / f"pairs_{tag}.csv", manifest)
    return rows, manifest


def stage_gbt(cfg: RunConfig, rows: np.ndarray, manifest: list[dict]):
    """Cross-validated boosted trees on train-split feature rows; scores for
    every candidate row."""
    split = np.array([m["split_tag"] for m in manifest])
    y = np.array([m["label"] for m in manifest])
    train = split == "train"
    Xtr, ytr = rows[train], y[train]
    rng = np.random.default_rng([cfg.seed, 31])
    cap = cfg.gbt.cv_row_cap
    if Xtr.shape[0] > cap:
        # stratified cap: keep every positive (they are scarce), subsample
        # negatives to fill the budget
        pos = np.flatnonzero(ytr == 1)
        neg = np.flatnonzero(ytr == 0)
        n_neg = max(cap - pos.size, min(neg.size, pos.size))
        if neg.size > n_neg:
            neg = np.sort(rng.choice(neg, n_neg, replace=False))
        pick = np.sort(np.r_[pos, neg])
        Xcv, ycv = Xtr[pick], ytr[pick]
    else:
        Xcv, ycv = Xtr, ytr
    cv_skipped = min(int((ycv == 0).sum()), int((ycv == 1).sum())) < GB.N_FOLDS
    if cv_skipped:
        eta, depth = cfg.gbt.cv_grid[0]
        cv_table = {}
    else:
        (eta, depth), cv_table = GB.cross_validate(
            Xcv, ycv, grid=cfg.gbt.cv_grid, seed=cfg.seed, n_rounds=cfg.gbt.cv_rounds)
    model = GB.fit_gbt(Xtr, ytr, GB.GbtParams(
        n_rounds=cfg.gbt.final_rounds, shrinkage=eta, max_depth=depth))
    scores = model.predict_proba(rows)
    out = Path(cfg.out_dir)
    tag = f"{cfg.secondary}_{cfg.imputation}"
    GB.save_model(model, out / f"gbt_{tag}.bin")
    sample_ids = [f"{m['case_id']}:{m['laterality']}:{m['view']}:{m['row']}:{m['col']}"
                  for m in manifest]
    GB.write_predictions_csv(out / f"gbt_predictions_{tag}.csv", sample_ids, scores)
    selection = {"shrinkage": eta, "depth": depth, "cv_skipped": cv_skipped,
                 "cv_table": {f"{e}/{d}": v for (e, d), v in sorted(cv_table.items())}}
    return scores, selection


# ---------------------------------------------------------------------------
# stage: evaluate + report


def evaluate_scores(cfg: RunConfig, scores, labels, groups, seed_offset: int):
    scored = E.ScoredSet(scores, labels,
                         groups if cfg.eval.group_by_case else None)
    result = E.bootstrap_ci(scored, n_boot=cfg.eval.n_boot,
                            seed=cfg.seed + seed_offset)
    pauc = E.partial_auc(scored, cfg.eval.pauc_interval)
    summary = result.to_dict()
    summary["pauc"] = pauc
    summary["pauc_interval"] = list(cfg.eval.pauc_interval)
    summary["n_candidates"] = int(scored.scores.size)
    summary["n_positive"] = int(scored.labels.sum())
    return scored, result, summary


def write_metrics(cfg: RunConfig, metrics: dict) -> Path:
    path = Path(cfg.out_dir) / "metrics.json"
    with open(path, "w") as f:
        json.dump(metrics, f, indent=1, sort_keys=True)
    return path


def write_curves_csv(cfg: RunConfig, results: dict) -> None:
    import csv as _csv

    with open(Path(cfg.out_dir) / "curves.csv", "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["model", "fpr", "tpr"])
        for name, result in results.items():
            for x, y in zip(result.fpr, result.tpr):
                writer.writerow([name, f"{x:.6f}", f"{y:.6f}"])


def stage_report(cfg: RunConfig, results: dict, metrics: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    for name, result in results.items():
        if result.mean_curve is not None:
            grid, mean = result.mean_curve
            lo, hi = metrics[name]["ci95"]
            ax.plot(grid, mean, label=f"{name} AUC {metrics[name]['auc']:.3f} "
                                      f"[{lo:.3f}, {hi:.3f}]")
        else:
            ax.plot(result.fpr, result.tpr, label=name)
    ax.plot([0, 1], [0, 1], "k:", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("candidate classification")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(cfg.out_dir) / "roc_curves.svg", metadata={"Date": None})
    plt.close(fig)
    lines = ["# run report", ""]
    for name in sorted(metrics):
        if isinstance(metrics[name], dict) and "ci95" in metrics[name]:
            m = metrics[name]
            lines.append(f"- {name}: AUC {m['auc']:.4f} "
                         f"[{m['ci95'][0]:.4f}, {m['ci95'][1]:.4f}], "
                         f"pAUC {m['pauc']:.4f}")
    with open(Path(cfg.out_dir) / "report.md", "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# full run


def _stage(name):
    def wrap(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:  # noqa: BLE001 - stage tagging is the point
            raise StageError(name, str(exc)) from exc
    return wrap


def run_experiment(cfg: RunConfig) -> dict:
    """generate -> detect -> map -> train x4 -> extract -> gbt -> evaluate
    -> report; returns the metrics dict."""
    write_resolved_config(cfg)
    cases = _stage("generate")(stage_generate, cfg)
    candidates = _stage("detect")(stage_detect, cfg, cases)
    candidates = _stage("map")(stage_map, cfg, cases, candidates)

    results: dict[str, E.RocResult] = {}
    metrics: dict = {"seed": cfg.seed, "n_cases": cfg.gen.n_cases}
    scored_sets: dict[str, E.ScoredSet] = {}

    def eval_and_record(name, scores, labels, groups, offset):
        scored, result, summary = evaluate_scores(cfg, scores, labels, groups, offset)
        scored_sets[name] = scored
        results[name] = result
        metrics[name] = summary

    # baseline single-patch network
    base_cfg = cfg
    base_state = _stage("train")(stage_train, base_cfg, cases, candidates, "baseline")
    s, l, g = _stage("evaluate")(score_candidates, cfg, cases, candidates,
                                 "baseline", base_state, "test")
    eval_and_record("baseline", s, l, g, 1001)

    # two-stream over the configured comparison
    ts_state = _stage("train")(stage_train, cfg, cases, candidates, "twostream")
    s, l, g = _stage("evaluate")(score_candidates, cfg, cases, candidates,
                                 "twostream", ts_state, "test")
    eval_and_record(_arch_tag("twostream", cfg), s, l, g, 1002)

    # frozen-feature boosted trees over the same comparison
    rows, manifest = _stage("extract-features")(stage_extract, cfg, cases,
                                                candidates, base_state)
    gbt_scores, selection = _stage("gbt")(stage_gbt, cfg, rows, manifest)
    test_rows = [i for i, m in enumerate(manifest) if m["split_tag"] == "test"]
    s = gbt_scores[test_rows]
    l = np.array([manifest[i]["label"] for i in test_rows])
    g = np.array([manifest[i]["case_id"] for i in test_rows])
    eval_and_record(_arch_tag("featgbt", cfg), s, l, g, 1003)
    metrics["gbt_selection"] = selection

    ts_tag = _arch_tag("twostream", cfg)
    metrics["significance"] = {
        "twostream_vs_baseline_auc_p": E.significance_test(
            scored_sets[ts_tag], scored_sets["baseline"],
            metric="auc", n_boot=cfg.eval.n_boot, seed=cfg.seed + 2001),
        "twostream_vs_baseline_pauc_p": E.significance_test(
            scored_sets[ts_tag], scored_sets["baseline"], metric="pauc",
            interval=cfg.eval.pauc_interval, n_boot=cfg.eval.n_boot,
            seed=cfg.seed + 2002),
    }
    _stage("report")(write_metrics, cfg, metrics)
    _stage("report")(write_curves_csv, cfg, results)
    _stage("report")(stage_report, cfg, results, metrics)
    return metrics


def run_replication(cfg: RunConfig) -> dict:
    """Five-model comparison sharing one dataset, candidate set and baseline:
    baseline, two-stream over the opposite breast, frozen-feature boosted
    trees over the opposite breast, and two-stream over the previous round
    under both missing-image substitutes. Returns metrics with a
    `replication` block summarizing the orderings."""
    import dataclasses

    write_resolved_config(cfg)
    cases = _stage("generate")(stage_generate, cfg)
    candidates = _stage("detect")(stage_detect, cfg, cases)
    candidates = _stage("map")(stage_map, cfg, cases, candidates)

    results: dict[str, E.RocResult] = {}
    metrics: dict = {"seed": cfg.seed, "n_cases": cfg.gen.n_cases}
    scored_sets: dict[str, E.ScoredSet] = {}

    def eval_and_record(name, scores, labels, groups, offset):
        scored, result, summary = evaluate_scores(cfg, scores, labels, groups, offset)
        scored_sets[name] = scored
        results[name] = result
        metrics[name] = summary

    base_state = _stage("train")(stage_train, cfg, cases, candidates, "baseline")
    s, l, g = _stage("evaluate")(score_candidates, cfg, cases, candidates,
                                 "baseline", base_state, "test")
    eval_and_record("baseline", s, l, g, 1001)

    variants = [("contralateral", "black", 1002),
                ("prior", "black", 1004),
                ("prior", "copy", 1005)]
    for secondary, imputation, offset in variants:
        vcfg = dataclasses.replace(cfg, secondary=secondary, imputation=imputation)
        state = _stage("train")(stage_train, vcfg, cases, candidates, "twostream")
        s, l, g = _stage("evaluate")(score_candidates, vcfg, cases, candidates,
                                     "twostream", state, "test")
        eval_and_record(_arch_tag("twostream", vcfg), s, l, g, offset)

    sym_cfg = dataclasses.replace(cfg, secondary="contralateral", imputation="black")
    rows, manifest = _stage("extract-features")(stage_extract, sym_cfg, cases,
                                                candidates, base_state)
    gbt_scores, selection = _stage("gbt")(stage_gbt, sym_cfg, rows, manifest)
    test_rows = [i for i, m in enumerate(manifest) if m["split_tag"] == "test"]
    eval_and_record(_arch_tag("featgbt", sym_cfg), gbt_scores[test_rows],
                    np.array([manifest[i]["label"] for i in test_rows]),
                    np.array([manifest[i]["case_id"] for i in test_rows]), 1003)
    metrics["gbt_selection"] = selection

    sym_tag = "twostream_contralateral_black"
    gbt_tag = "featgbt_contralateral_black"
    p_auc = E.significance_test(scored_sets[sym_tag], scored_sets["baseline"],
                                metric="auc", n_boot=cfg.eval.n_boot,
                                seed=cfg.seed + 2001)
    p_pauc = E.significance_test(scored_sets[sym_tag], scored_sets["baseline"],
                                 metric="pauc", interval=cfg.eval.pauc_interval,
                                 n_boot=cfg.eval.n_boot, seed=cfg.seed + 2002)
    metrics["significance"] = {"twostream_vs_baseline_auc_p": p_auc,
                               "twostream_vs_baseline_pauc_p": p_pauc}
    auc = {k: metrics[k]["auc"] for k in
           ("baseline", sym_tag, gbt_tag,
            "twostream_prior_black", "twostream_prior_copy")}
    metrics["replication"] = {
        "auc": auc,
        "symmetry_gain": auc[sym_tag] - auc["baseline"],
        "symmetry_gain_p": p_auc,
        "ordering_twostream_vs_gbt": auc[sym_tag] - auc[gbt_tag],
        "ordering_gbt_vs_baseline": auc[gbt_tag] - auc["baseline"],
        "imputation_black_minus_copy":
            auc["twostream_prior_black"] - auc["twostream_prior_copy"],
    }
    _stage("report")(write_metrics, cfg, metrics)
    _stage("report")(write_curves_csv, cfg, results)
    _stage("report")(stage_report, cfg, results, metrics)
    return metrics


def replication_config(out_dir: str, seed: int = 0) -> RunConfig:
    """Desk-scale configuration for the five-model comparison: small enough
    to finish on one CPU core, large enough that the comparison signal in
    the generator is measurable."""
    return RunConfig(
        seed=seed, out_dir=str(out_dir),
        gen=P.GenConfig(n_cases=72, positive_fraction=0.7,
                        lesion_per_view_prob=0.5, asymmetry_strength=0.85,
                        missing_prior_fraction=0.15, skip_round_fraction=0.1,
                        split_fractions=(0.45, 0.10, 0.45)),
        detector=DetectorParams(max_per_image=4, nms_threshold=0.2,
                                pos_pixels_per_image=200,
                                neg_pixels_per_image=500),
        train=TrainParams(epochs=6),
        gbt=GbtStageParams(cv_grid=((0.1, 2), (0.3, 2), (0.3, 3)),
                           cv_rounds=15, cv_row_cap=400, final_rounds=60),
        eval=EvalParams(n_boot=2000),
    )


# ---------------------------------------------------------------------------
# utilities


def audit_no_test_leakage(cfg: RunConfig) -> None:
    """Every case id recorded in a training log must be train-tagged."""
    out = Path(cfg.out_dir)
    tags = {c.case_id: c.split_tag for c in load_cases(cfg)}
    for log_path in sorted(out.glob("trainlog_*.json")):
        with open(log_path) as f:
            log = json.load(f)
        bad = [cid for cid in log["train_case_ids"] if tags.get(cid) != "train"]
        if bad:
            raise ConfigError(f"{log_path.name} trained on non-train cases: {bad}")


def random_search(cfg: RunConfig, cases, candidates, arch: str,
                  n_trials: int = 8, seed: int = 0) -> dict:
    """Bounded random search of lr / dropout / l2 on the validation split."""
    if n_trials < 1 or n_trials > 20:
        raise ConfigError("random search budget must be 1..20 trials")
    rng = np.random.default_rng(seed)
    best = None
    for trial in range(n_trials):
        import dataclasses

        trial_cfg = dataclasses.replace(cfg, train=TrainParams(
            learning_rate=float(10 ** rng.uniform(-3, -1.3)),
            dropout_rate=float(rng.uniform(0.1, 0.5)),
            l2=float(10 ** rng.uniform(-6, -3)),
            batch_size=cfg.train.batch_size,
            epochs=max(1, cfg.train.epochs // 2)))
        state = stage_train(trial_cfg, cases, candidates, arch)
        s, l, g = score_candidates(trial_cfg, cases, candidates, arch, state, "val")
        if len(np.unique(l)) < 2:
            continue
        auc = E.roc_auc(E.ScoredSet(s, l)).auc
        entry = {"auc": auc, "learning_rate": trial_cfg.train.learning_rate,
                 "dropout_rate": trial_cfg.train.dropout_rate, "l2": trial_cfg.train.l2}
        if best is None or auc > best["auc"]:
            best = entry
    if best is None:
        raise TrainingError("no random-search trial produced a two-class validation set")
    return best
