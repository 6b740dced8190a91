import numpy as np
import pytest

from asymcad import fusion as F
from asymcad import phantom as P
from asymcad.detector import Candidate


def make_image(fill, lat, view, shape=(64, 64)):
    return P.PhantomImage(
        pixels=np.full(shape, fill, np.uint16), spacing_microns=1000.0,
        laterality=lat, view=view)


def make_case(timestamps):
    """Case with all four views per exam; pixel fill encodes the timestamp."""
    exams = []
    for ts in timestamps:
        views = {(lat, view): make_image(1000 * ts, lat, view)
                 for lat, view in P.VIEWS}
        exams.append(P.Exam(views=views, timestamp=ts))
    return P.StudyCase(case_id="caseX", exams=exams)


def cand(ts=3, lat="L", view="CC", center=(32, 32), counterparts=None):
    return Candidate(image_ref=("caseX", ts, lat, view), center=center,
                     detector_score=0.5, label="malignant",
                     counterpart_centers=counterparts or {})


class TestFusionSpec:
    def test_bad_secondary(self):
        with pytest.raises(F.FusionError):
            F.FusionSpec(secondary="nope")

    def test_bad_imputation(self):
        with pytest.raises(F.FusionError):
            F.FusionSpec(imputation="zeros")

    def test_tiny_patch(self):
        with pytest.raises(F.FusionError):
            F.FusionSpec(patch_side_px=2)


class TestSecondarySource:
    def test_contralateral_always_available(self):
        case = make_case([3])
        img, center, used = F.secondary_source(
            case, cand(counterparts={"contralateral": [(30, 31)]}),
            F.FusionSpec(secondary="contralateral"))
        assert used == "none"
        assert img.laterality == "R"
        assert center == (30, 31)

    def test_prior_one_round_back(self):
        case = make_case([2, 3])
        img, center, used = F.secondary_source(
            case, cand(counterparts={"prior": [(33, 35)]}),
            F.FusionSpec(secondary="prior"))
        assert used == "none"
        assert img.pixels[0, 0] == 2000
        assert center == (33, 35)

    def test_skipped_round_fallback(self):
        case = make_case([1, 3])
        img, center, used = F.secondary_source(
            case, cand(), F.FusionSpec(secondary="prior"))
        assert used == "skipped_round_fallback"
        assert img.pixels[0, 0] == 1000

    def test_missing_prior_black(self):
        case = make_case([3])
        img, center, used = F.secondary_source(
            case, cand(), F.FusionSpec(secondary="prior", imputation="black"))
        assert img is None and used == "black"

    def test_missing_prior_copy(self):
        case = make_case([3])
        img, center, used = F.secondary_source(
            case, cand(), F.FusionSpec(secondary="prior", imputation="copy"))
        assert img is None and used == "copy_current"


class TestBuildPair:
    def test_contralateral_pair_shapes(self):
        case = make_case([3])
        pair = F.build_pair(case, cand(), F.FusionSpec(patch_side_px=20))
        assert pair.primary.shape == (20, 20)
        assert pair.secondary.shape == (20, 20)
        assert pair.label == 1

    def test_black_imputation_zero_patch(self):
        case = make_case([3])
        pair = F.build_pair(case, cand(),
                            F.FusionSpec(secondary="prior", imputation="black",
                                         patch_side_px=16))
        assert pair.imputation_used == "black"
        assert (pair.secondary == 0).all()
        assert pair.primary.max() > 0

    def test_copy_imputation_duplicates_primary(self):
        case = make_case([3])
        pair = F.build_pair(case, cand(),
                            F.FusionSpec(secondary="prior", imputation="copy",
                                         patch_side_px=16))
        assert pair.imputation_used == "copy_current"
        assert np.array_equal(pair.secondary, pair.primary)
        assert pair.secondary is not pair.primary

    def test_prior_patch_from_prior_exam(self):
        case = make_case([2, 3])
        pair = F.build_pair(case, cand(),
                            F.FusionSpec(secondary="prior", patch_side_px=16))
        assert pair.imputation_used == "none"
        # the prior pixels differ from the current ones, so must the patches
        assert not np.array_equal(pair.secondary, pair.primary)

    def test_normal_label(self):
        case = make_case([3])
        c = cand()
        c.label = "normal"
        pair = F.build_pair(case, c, F.FusionSpec(patch_side_px=16))
        assert pair.label == 0

    def test_input_scaling(self):
        img = make_image(65535, "L", "CC")
        scaled = F.patch_input(img.pixels)
        assert abs(scaled.max() - 1.0) < 1e-12


class TestFeatureFile:
    def test_roundtrip_exact(self, rng, tmp_path):
        rows = rng.standard_normal((37, 1024))
        path = tmp_path / "feat.bin"
        F.write_features(path, rows)
        back = F.read_features(path)
        assert back.shape == (37, 1024)
        assert np.array_equal(back, rows)

    def test_header_layout(self, tmp_path):
        import struct
        path = tmp_path / "feat.bin"
        F.write_features(path, np.zeros((3, 5)))
        raw = path.read_bytes()
        count, width = struct.unpack("<II", raw[:8])
        assert (count, width) == (3, 5)
        assert len(raw) == 8 + 3 * 5 * 8

    def test_truncated_errors(self, tmp_path):
        path = tmp_path / "feat.bin"
        F.write_features(path, np.zeros((4, 4)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(F.FusionError):
            F.read_features(path)

    def test_empty_file_errors(self, tmp_path):
        path = tmp_path / "feat.bin"
        path.write_bytes(b"\x01")
        with pytest.raises(F.FusionError):
            F.read_features(path)

    def test_not_2d(self, tmp_path):
        with pytest.raises(F.FusionError):
            F.write_features(tmp_path / "x.bin", np.zeros(5))


class TestPairsManifest:
    def test_roundtrip(self, tmp_path):
        rows = [
            {"case_id": "caseA", "exam_ts": 3, "laterality": "L", "view": "MLO",
             "row": 10, "col": 20, "label": 1, "imputation_used": "none",
             "split_tag": "train"},
            {"case_id": "caseB", "exam_ts": 3, "laterality": "R", "view": "CC",
             "row": 30, "col": 40, "label": 0, "imputation_used": "black",
             "split_tag": "test"},
        ]
        path = tmp_path / "pairs.csv"
        F.write_pairs_manifest(path, rows)
        back = F.read_pairs_manifest(path)
        assert back == rows
