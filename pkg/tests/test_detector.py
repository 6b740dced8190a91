import math

import numpy as np
import pytest

from asymcad import detector as D
from asymcad import phantom as P


def nms_oracle(score_map, radius, threshold):
    """Brute-force reference: scan every pixel, compare against every other
    pixel within the radius, then greedy suppression from the top."""
    h, w = score_map.shape
    peaks = []
    for r in range(h):
        for c in range(w):
            v = score_map[r, c]
            if v < threshold:
                continue
            strict = True
            for rr in range(h):
                for cc in range(w):
                    if (rr, cc) == (r, c):
                        continue
                    if (rr - r) ** 2 + (cc - c) ** 2 <= radius**2 and score_map[rr, cc] >= v:
                        strict = False
                        break
                if not strict:
                    break
            if strict:
                peaks.append((r, c, float(v)))
    peaks.sort(key=lambda p: (-p[2], p[0], p[1]))
    kept = []
    for r, c, v in peaks:
        if all((r - kr) ** 2 + (c - kc) ** 2 > radius**2 for kr, kc, _ in kept):
            kept.append((r, c, v))
    return kept


class TestNonmaxSuppress:
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        h = int(rng.integers(8, 20))
        w = int(rng.integers(8, 20))
        smooth = int(rng.integers(0, 2))
        m = rng.random((h, w))
        if smooth:
            from scipy import ndimage
            m = ndimage.gaussian_filter(m, 1.0)
        radius = float(rng.uniform(1.5, 4.0))
        threshold = float(np.percentile(m, 60))
        got = D.nonmax_suppress(m, radius, threshold)
        want = nms_oracle(m, radius, threshold)
        assert len(got) == len(want)
        for (gr, gc, gv), (wr, wc, wv) in zip(got, want):
            assert (gr, gc) == (wr, wc)
            assert abs(gv - wv) < 1e-9

    def test_constant_map_empty(self):
        assert D.nonmax_suppress(np.ones((16, 16)), 2.0, 0.0) == []

    def test_two_close_peaks_keep_higher(self):
        m = np.zeros((20, 20))
        m[10, 10] = 1.0
        m[10, 12] = 0.9
        out = D.nonmax_suppress(m, 3.0, 0.5)
        assert out == [(10, 10, 1.0)]

    def test_two_far_peaks_keep_both(self):
        m = np.zeros((20, 20))
        m[4, 4] = 0.8
        m[15, 15] = 0.9
        out = D.nonmax_suppress(m, 3.0, 0.5)
        assert out == [(15, 15, 0.9), (4, 4, 0.8)]

    def test_bad_radius(self):
        with pytest.raises(D.DetectorConfigError):
            D.nonmax_suppress(np.zeros((8, 8)), 0.0, 0.0)


def gaussian_blob_image(shape=(96, 96), center=(48, 48), sigma=5.0, amp=1.0):
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return amp * np.exp(-d2 / (2 * sigma**2))


def star_image(shape=(96, 96), center=(48, 48), n_rays=12):
    img = np.zeros(shape)
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    dr = rr - center[0]
    dc = cc - center[1]
    dist = np.hypot(dr, dc)
    ang = np.arctan2(dc, dr)
    for k in range(n_rays):
        phi = k * math.pi / n_rays
        # thin ray: small perpendicular distance to the line at angle phi
        perp = np.abs(dist * np.sin(ang - phi))
        img += np.exp(-(perp**2) / 2.0) * (dist < 40)
    return img


SCALES = [2.0, 3.0, 5.0, 8.0]


class TestComputeFeatures:
    def test_blob_response_peaks_at_center(self):
        img = gaussian_blob_image(sigma=5.0)
        stack = D.compute_features(img, SCALES)
        peak = np.unravel_index(np.argmax(stack.planes[0]), img.shape)
        assert math.hypot(peak[0] - 48, peak[1] - 48) <= 2.0

    def test_convergence_positive_at_blob_center(self):
        img = gaussian_blob_image(sigma=6.0)
        stack = D.compute_features(img, SCALES)
        assert stack.planes[1][48, 48] > 0.5
        assert abs(stack.planes[1][5, 90]) < 0.3

    def test_scale_index_tracks_blob_size(self):
        small = gaussian_blob_image(sigma=2.5)
        large = gaussian_blob_image(sigma=9.0)
        si_small = D.compute_features(small, SCALES).planes[4][48, 48]
        si_large = D.compute_features(large, SCALES).planes[4][48, 48]
        assert si_small < si_large

    def test_spiculation_high_at_star_center(self):
        img = star_image()
        stack = D.compute_features(img, SCALES)
        region = stack.planes[2][44:53, 44:53]
        assert region.max() > 0.9
        # isotropic texture shows no such concentration anywhere central
        rng = np.random.default_rng(0)
        from scipy import ndimage
        noise = ndimage.gaussian_filter(rng.standard_normal((96, 96)), 2.0)
        flat = D.compute_features(noise - noise.min(), SCALES)
        assert np.abs(flat.planes[2][20:76, 20:76]).max() < region.max()
        assert np.abs(flat.planes[2][20:76, 20:76]).mean() < 0.5

    def test_rotation_90_permutes_planes(self):
        config = P.GenConfig(n_cases=1, image_size=(128, 128))
        case = P.generate_case(config, 0, seed=7)
        img = P.log_transform(case.current.views[("L", "MLO")]).pixels.astype(float)
        a = D.compute_features(img, SCALES).planes
        b = D.compute_features(np.rot90(img), SCALES).planes
        for k in range(4):
            assert np.max(np.abs(np.rot90(a[k]) - b[k])) < 1e-9
        assert np.array_equal(np.rot90(a[4]), b[4])

    def test_too_few_scales(self):
        with pytest.raises(D.DetectorConfigError):
            D.compute_features(np.zeros((64, 64)), [2.0])

    def test_scale_too_large(self):
        with pytest.raises(D.DetectorConfigError):
            D.compute_features(np.zeros((32, 32)), [2.0, 16.0])


def blob_target(img):
    rr, cc = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    target = np.zeros(img.shape[0:2], bool)
    for blob in img.blobs:
        d2 = (rr - blob.center[0]) ** 2 + (cc - blob.center[1]) ** 2
        target |= d2 <= blob.radius_px**2
    return target


class TestPixelClassifier:
    def test_heldout_pixel_auc(self):
        from asymcad import evalroc as E

        config = P.GenConfig(n_cases=10, image_size=(192, 192), positive_fraction=0.6)
        cases = P.generate_dataset(config, seed=11)
        rng = np.random.default_rng(0)
        xs, ys = [], []
        for case in cases[:7]:
            for key in [("L", "CC"), ("R", "MLO")]:
                img = P.log_transform(case.current.views[key])
                stack = D.compute_features(img.pixels.astype(float), SCALES)
                X, y = D.sample_training_pixels(stack, blob_target(img), img.true_mask, rng)
                xs.append(X)
                ys.append(y)
        forest = D.train_pixel_classifier(np.vstack(xs), np.concatenate(ys), seed=0)
        scores, labels = [], []
        for case in cases[7:]:
            for key in [("L", "CC"), ("R", "MLO")]:
                img = P.log_transform(case.current.views[key])
                stack = D.compute_features(img.pixels.astype(float), SCALES)
                prob = D.likelihood_map(forest, stack)
                target = blob_target(img)
                sel = img.true_mask.ravel()
                scores.append(prob.ravel()[sel])
                labels.append(target.ravel()[sel].astype(int))
        auc = E.roc_auc(E.ScoredSet(np.concatenate(scores), np.concatenate(labels))).auc
        assert auc > 0.8

    def test_single_class_errors(self):
        with pytest.raises(D.TrainingError):
            D.train_pixel_classifier(np.zeros((10, 5)), np.zeros(10, int))


class TestLabeling:
    def test_within_and_beyond_radius(self):
        img = P.PhantomImage(
            pixels=np.zeros((100, 100), np.uint16), spacing_microns=1000.0,
            laterality="L", view="CC",
            truth=[P.LesionTruth((50, 50), 5.0, True, 1.0, 1.0)])
        radius_px = img.cm_to_px(D.POSITIVE_RADIUS_CM)
        near = (50, 50 + int(radius_px))
        far = (50, 50 + int(radius_px) + 2)
        labels = D.label_candidates([near, far, (50, 50)], img)
        assert labels == ["malignant", "normal", "malignant"]

    def test_benign_truth_ignored(self):
        img = P.PhantomImage(
            pixels=np.zeros((100, 100), np.uint16), spacing_microns=1000.0,
            laterality="L", view="CC",
            truth=[P.LesionTruth((50, 50), 5.0, False, 1.0, 1.0)])
        assert D.label_candidates([(50, 50)], img) == ["normal"]


class TestExtractPatch:
    def test_side_px(self):
        assert D.patch_side_px(200.0) == 250
        assert D.patch_side_px(1000.0) == 50

    def test_interior_patch(self, rng):
        img = rng.random((100, 100))
        patch = D.extract_patch(img, (50, 50), 20)
        assert patch.shape == (20, 20)
        assert np.array_equal(patch, img[40:60, 40:60])

    def test_zero_padding_at_border(self, rng):
        img = rng.random((100, 100))
        patch = D.extract_patch(img, (0, 0), 20)
        assert patch.shape == (20, 20)
        assert (patch[:10, :10] == 0).all() is np.True_ or (patch[:10, :10] == 0).all()
        assert np.array_equal(patch[10:, 10:], img[:10, :10])

    def test_fully_outside(self):
        patch = D.extract_patch(np.ones((50, 50)), (-100, -100), 20)
        assert (patch == 0).all()


class TestAugment:
    def test_positive_count(self):
        specs = D.augment("positive", 200.0, seed=0)
        assert len(specs) == 132

    def test_negative_count(self):
        specs = D.augment("negative", 200.0, seed=0)
        assert len(specs) == 4
        assert [s.rotations for s in specs] == [0, 1, 2, 3]

    def test_translation_range(self):
        specs = D.augment("positive", 200.0, seed=3)
        offs = [s.offset for s in specs if s.offset != (0, 0)]
        assert offs
        assert all(abs(dr) <= 25 and abs(dc) <= 25 for dr, dc in offs)

    def test_scaling_range(self):
        specs = D.augment("positive", 200.0, seed=3)
        jits = [s.bbox_jitter for s in specs if s.bbox_jitter != (0, 0, 0, 0)]
        assert jits
        assert all(max(abs(v) for v in j) <= 30 for j in jits)

    def test_deterministic(self):
        assert D.augment("positive", 200.0, seed=5) == D.augment("positive", 200.0, seed=5)

    def test_unknown_kind(self):
        with pytest.raises(D.DetectorConfigError):
            D.augment("whatever", 200.0, seed=0)

    def test_rotations_compose_to_identity(self, rng):
        img = rng.random((80, 80))
        base = D.materialize(img, (40, 40), D.AugmentSpec(), 30)
        once = D.materialize(img, (40, 40), D.AugmentSpec(rotations=1), 30)
        assert np.array_equal(np.rot90(base, 1), once)
        four = D.materialize(img, (40, 40), D.AugmentSpec(rotations=4), 30)
        assert np.array_equal(base, four)

    def test_materialize_translation(self, rng):
        img = rng.random((80, 80))
        a = D.materialize(img, (40, 40), D.AugmentSpec(offset=(3, -2)), 20)
        b = D.extract_patch(img, (43, 38), 20)
        assert np.array_equal(a, b)

    def test_materialize_scaling_shape(self, rng):
        img = rng.random((80, 80))
        p = D.materialize(img, (40, 40), D.AugmentSpec(bbox_jitter=(-5, 3, 4, -2)), 30)
        assert p.shape == (30, 30)


class TestCandidatesCsv:
    def test_roundtrip(self, tmp_path):
        cands = [
            D.Candidate(("case00001", 3, "L", "MLO"), (12, 34), 0.875, "malignant",
                        {"contralateral": [(14, 30)], "prior": [(11, 33)]}),
            D.Candidate(("case00002", 3, "R", "CC"), (56, 78), 0.125, "normal", {}),
        ]
        path = tmp_path / "cands.csv"
        D.write_candidates_csv(path, cands)
        back = D.read_candidates_csv(path)
        assert len(back) == 2
        assert back[0].image_ref == ("case00001", 3, "L", "MLO")
        assert back[0].center == (12, 34)
        assert back[0].label == "malignant"
        assert back[0].counterpart_centers["contralateral"] == [(14, 30)]
        assert back[1].counterpart_centers == {}
        assert abs(back[1].detector_score - 0.125) < 1e-9

    def test_header(self, tmp_path):
        path = tmp_path / "c.csv"
        D.write_candidates_csv(path, [])
        header = path.read_text().splitlines()[0]
        assert header.split(",") == D.CSV_FIELDS
