import json
import math

import numpy as np
import pytest

from asymcad import phantom as P
from asymcad import pipeline as PL


class TestConfig:
    def test_defaults(self):
        cfg = PL.load_config()
        assert cfg.seed == 0
        assert cfg.secondary == "contralateral"
        assert cfg.train.batch_size == 32

    def test_overrides(self):
        cfg = PL.load_config(overrides={"seed": 9, "out_dir": "/tmp/x",
                                        "secondary": "prior", "imputation": "copy"})
        assert cfg.seed == 9
        assert cfg.secondary == "prior"
        assert cfg.imputation == "copy"

    def test_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 3, "train": {"epochs": 2},
                                    "gen": {"n_cases": 7}}))
        cfg = PL.load_config(path)
        assert cfg.seed == 3
        assert cfg.train.epochs == 2
        assert cfg.gen.n_cases == 7
        # untouched section fields keep defaults
        assert cfg.train.batch_size == 32

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"nonsense": 1}))
        with pytest.raises(PL.ConfigError):
            PL.load_config(path)

    def test_unknown_nested_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train": {"warp_speed": 9}}))
        with pytest.raises(PL.ConfigError):
            PL.load_config(path)

    def test_bad_mode(self):
        with pytest.raises(PL.ConfigError):
            PL.load_config(overrides={"secondary": "future"})

    def test_resolved_echo_has_all_defaults(self, tmp_path):
        cfg = PL.RunConfig(out_dir=str(tmp_path))
        PL.write_resolved_config(cfg)
        with open(tmp_path / "resolved_config.json") as f:
            echo = json.load(f)
        assert echo["train"]["learning_rate"] == cfg.train.learning_rate
        assert echo["gen"]["n_cases"] == cfg.gen.n_cases
        assert echo["eval"]["n_boot"] == cfg.eval.n_boot
        assert echo["detector"]["nms_radius_cm"] == cfg.detector.nms_radius_cm


class TestBalancedSampler:
    def test_exact_balance_and_coverage(self):
        negatives = list(range(100))
        positives = [f"p{i}" for i in range(7)]
        sampler = PL.BalancedSampler(positives, negatives, 32, seed=0)
        seen_negatives = []
        for batch in sampler.epoch():
            pos = [e for e, y in batch if y == 1]
            neg = [e for e, y in batch if y == 0]
            assert len(pos) == len(neg)
            seen_negatives.extend(neg)
        assert sorted(seen_negatives) == negatives

    def test_batch_count(self):
        sampler = PL.BalancedSampler(["p"], list(range(100)), 32, seed=0)
        assert sampler.batches_per_epoch() == math.ceil(100 / 16)
        assert sum(1 for _ in sampler.epoch()) == math.ceil(100 / 16)

    def test_last_batch_smaller_but_balanced(self):
        sampler = PL.BalancedSampler(["p"], list(range(35)), 32, seed=0)
        batches = list(sampler.epoch())
        last = batches[-1]
        assert len(last) == 2 * (35 - 2 * 16)
        assert sum(1 for _, y in last if y == 1) == len(last) // 2

    def test_full_batch_is_16_16(self):
        sampler = PL.BalancedSampler(["a", "b"], list(range(64)), 32, seed=0)
        batch = next(iter(sampler.epoch()))
        assert sum(1 for _, y in batch if y == 1) == 16
        assert sum(1 for _, y in batch if y == 0) == 16

    def test_empty_pools(self):
        with pytest.raises(PL.TrainingError):
            PL.BalancedSampler([], [1], 32, seed=0)
        with pytest.raises(PL.TrainingError):
            PL.BalancedSampler([1], [], 32, seed=0)

    def test_odd_batch_size(self):
        with pytest.raises(PL.ConfigError):
            PL.BalancedSampler([1], [1], 31, seed=0)

    def test_positive_sampling_uniformity(self):
        n_pos = 10
        positives = list(range(n_pos))
        negatives = list(range(10_000))
        sampler = PL.BalancedSampler(positives, negatives, 32, seed=4)
        counts = np.zeros(n_pos)
        draws = 0
        for batch in sampler.epoch():
            for e, y in batch:
                if y == 1:
                    counts[e] += 1
                    draws += 1
        expect = draws / n_pos
        sigma = math.sqrt(draws * (1 / n_pos) * (1 - 1 / n_pos))
        assert np.abs(counts - expect).max() <= 3 * sigma


def smoke_config(out_dir, seed=5):
    return PL.RunConfig(
        seed=seed, out_dir=str(out_dir),
        gen=P.GenConfig(n_cases=24, image_size=(128, 128), positive_fraction=0.7,
                        lesion_per_view_prob=0.5),
        detector=PL.DetectorParams(max_per_image=8, pos_pixels_per_image=150,
                                   neg_pixels_per_image=400, nms_threshold=0.2),
        train=PL.TrainParams(epochs=1),
        gbt=PL.GbtStageParams(cv_grid=((0.3, 2),), cv_rounds=5, cv_row_cap=200,
                              final_rounds=10),
        eval=PL.EvalParams(n_boot=40),
    )


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run1")
    cfg = smoke_config(out)
    metrics = PL.run_experiment(cfg)
    return cfg, metrics


class TestRunExperiment:
    EXPECTED_FILES = [
        "resolved_config.json", "candidates.csv", "candidates_mapped.csv",
        "model_baseline.bin", "model_twostream_contralateral_black.bin",
        "trainlog_baseline.json", "trainlog_twostream_contralateral_black.json",
        "features_contralateral_black.bin", "pairs_contralateral_black.csv",
        "gbt_contralateral_black.bin", "gbt_predictions_contralateral_black.csv",
        "metrics.json", "curves.csv", "roc_curves.svg", "report.md",
    ]

    def test_emits_all_declared_files(self, smoke_run):
        cfg, _ = smoke_run
        from pathlib import Path
        out = Path(cfg.out_dir)
        for name in self.EXPECTED_FILES:
            assert (out / name).exists(), name
        assert (out / "dataset").is_dir()

    def test_metrics_structure(self, smoke_run):
        _, metrics = smoke_run
        for key in ("baseline", "twostream_contralateral_black",
                    "featgbt_contralateral_black"):
            assert 0.0 <= metrics[key]["auc"] <= 1.0
            lo, hi = metrics[key]["ci95"]
            assert lo <= hi
            assert 0.0 <= metrics[key]["pauc"] <= 1.0
        p = metrics["significance"]["twostream_vs_baseline_auc_p"]
        assert 0.0 <= p <= 1.0

    def test_rerun_byte_identical_metrics(self, smoke_run, tmp_path):
        cfg, _ = smoke_run
        from pathlib import Path
        cfg2 = smoke_config(tmp_path / "run2", seed=cfg.seed)
        PL.run_experiment(cfg2)
        a = (Path(cfg.out_dir) / "metrics.json").read_bytes()
        b = (Path(cfg2.out_dir) / "metrics.json").read_bytes()
        assert a == b

    def test_leakage_audit_passes(self, smoke_run):
        cfg, _ = smoke_run
        PL.audit_no_test_leakage(cfg)

    def test_leakage_audit_catches_corruption(self, smoke_run, tmp_path):
        import shutil
        from pathlib import Path
        cfg, _ = smoke_run
        bad_dir = tmp_path / "bad"
        shutil.copytree(cfg.out_dir, bad_dir)
        log_path = bad_dir / "trainlog_baseline.json"
        log = json.loads(log_path.read_text())
        tags = {c.case_id: c.split_tag for c in PL.load_cases(cfg)}
        test_id = next(cid for cid, t in tags.items() if t == "test")
        log["train_case_ids"].append(test_id)
        log_path.write_text(json.dumps(log))
        bad_cfg = smoke_config(bad_dir, seed=cfg.seed)
        with pytest.raises(PL.ConfigError):
            PL.audit_no_test_leakage(bad_cfg)

    def test_stage_error_tags_stage(self, tmp_path):
        cfg = smoke_config(tmp_path / "nodata")
        with pytest.raises(PL.ConfigError):
            PL.load_cases(cfg)


class TestCli:
    def test_staged_commands_on_existing_run(self, smoke_run, capsys):
        from asymcad.cli import main
        cfg, _ = smoke_run
        base = ["--out-dir", cfg.out_dir, "--seed", str(cfg.seed)]
        # evaluate and report run standalone against the emitted artifacts
        assert main(["evaluate"] + base) == 0
        assert main(["report"] + base) == 0

    def test_detect_without_dataset_fails(self, tmp_path, capsys):
        from asymcad.cli import main
        rc = main(["detect", "--out-dir", str(tmp_path / "void")])
        assert rc == 1
        assert "[detect]" in capsys.readouterr().err

    def test_train_featgbt_rejected(self, smoke_run, capsys):
        from asymcad.cli import main
        cfg, _ = smoke_run
        rc = main(["train", "--arch", "featgbt", "--out-dir", cfg.out_dir])
        assert rc == 1
        assert "[train]" in capsys.readouterr().err

    def test_parser_rejects_unknown_arch(self):
        from asymcad.cli import build_parser
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--arch", "warpdrive"])


class TestScalesPx:
    def test_floor_and_dedupe(self):
        cfg = PL.RunConfig(gen=P.GenConfig(spacing_microns=2000.0),
                           detector=PL.DetectorParams(scales_cm=(0.1, 0.2, 0.35, 0.6)))
        scales = PL._scales_px(cfg)
        assert scales[0] >= 1.0
        assert all(b > a for a, b in zip(scales, scales[1:]))


class TestRandomSearch:
    def test_budget_bounds(self):
        cfg = PL.RunConfig()
        with pytest.raises(PL.ConfigError):
            PL.random_search(cfg, [], [], "baseline", n_trials=0)
        with pytest.raises(PL.ConfigError):
            PL.random_search(cfg, [], [], "baseline", n_trials=21)
