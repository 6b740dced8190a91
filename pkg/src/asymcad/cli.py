"""Command line interface for the candidate-comparison CAD pipeline.

Each subcommand runs one stage against an output directory; `run-all`
chains every stage and emits the metrics bundle.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import detector as D
from . import evalroc as E
from . import fusion as FU
from . import network as N
from . import pipeline as PL

STAGES = ("generate", "detect", "map", "train", "extract-features", "gbt",
          "evaluate", "report", "run-all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asymcad",
        description="two-stream comparison CAD pipeline on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file; defaults are used otherwise")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", type=str, default=None)
        p.add_argument("--arch", choices=["baseline", "twostream", "featgbt"],
                       default=None)
        p.add_argument("--secondary", choices=["contralateral", "prior"],
                       default=None)
        p.add_argument("--imputation", choices=["black", "copy"], default=None)
    return parser


def _config_from_args(args) -> PL.RunConfig:
    overrides = {"seed": args.seed, "out_dir": args.out_dir,
                 "secondary": args.secondary, "imputation": args.imputation}
    return PL.load_config(args.config, overrides)


def _load_candidates(cfg: PL.RunConfig, mapped: bool):
    name = "candidates_mapped.csv" if mapped else "candidates.csv"
    path = Path(cfg.out_dir) / name
    if not path.exists():
        raise PL.ConfigError(f"missing {path}; run the earlier stages first")
    return D.read_candidates_csv(path)


def _load_model(cfg: PL.RunConfig, arch: str) -> N.NetworkState:
    tag = PL._arch_tag(arch, cfg)
    path = Path(cfg.out_dir) / f"model_{tag}.bin"
    if not path.exists():
        raise PL.ConfigError(f"missing model file {path}")
    return N.load_state(path)


def _evaluate(cfg: PL.RunConfig, with_report: bool) -> dict:
    cases = PL.load_cases(cfg)
    candidates = _load_candidates(cfg, mapped=True)
    results, metrics = {}, {"seed": cfg.seed, "n_cases": len(cases)}
    offset = 1001
    for arch in ("baseline", "twostream"):
        tag = PL._arch_tag(arch, cfg)
        path = Path(cfg.out_dir) / f"model_{tag}.bin"
        if not path.exists():
            continue
        state = N.load_state(path)
        s, l, g = PL.score_candidates(cfg, cases, candidates, arch, state, "test")
        _, result, summary = PL.evaluate_scores(cfg, s, l, g, offset)
        results[tag], metrics[tag] = result, summary
        offset += 1
    ftag = f"{cfg.secondary}_{cfg.imputation}"
    pairs_path = Path(cfg.out_dir) / f"pairs_{ftag}.csv"
    pred_path = Path(cfg.out_dir) / f"gbt_predictions_{ftag}.csv"
    if pairs_path.exists() and pred_path.exists():
        manifest = FU.read_pairs_manifest(pairs_path)
        with open(pred_path) as f:
            next(f)
            preds = [float(line.rsplit(",", 1)[1]) for line in f]
        idx = [i for i, m in enumerate(manifest) if m["split_tag"] == "test"]
        s = np.array([preds[i] for i in idx])
        l = np.array([manifest[i]["label"] for i in idx])
        g = np.array([manifest[i]["case_id"] for i in idx])
        tag = PL._arch_tag("featgbt", cfg)
        _, result, summary = PL.evaluate_scores(cfg, s, l, g, offset)
        results[tag], metrics[tag] = result, summary
    if not results:
        raise PL.ConfigError("nothing to evaluate: no models or predictions found")
    PL.write_metrics(cfg, metrics)
    PL.write_curves_csv(cfg, results)
    if with_report:
        PL.stage_report(cfg, results, metrics)
    return metrics


def dispatch(args) -> int:
    cfg = _config_from_args(args)
    command = args.command
    try:
        if command == "run-all":
            PL.run_experiment(cfg)
        elif command == "generate":
            PL.write_resolved_config(cfg)
            PL.stage_generate(cfg)
        elif command == "detect":
            PL.stage_detect(cfg, PL.load_cases(cfg))
        elif command == "map":
            PL.stage_map(cfg, PL.load_cases(cfg), _load_candidates(cfg, mapped=False))
        elif command == "train":
            arch = args.arch or "baseline"
            if arch == "featgbt":
                raise PL.ConfigError("featgbt is trained by extract-features + gbt")
            PL.stage_train(cfg, PL.load_cases(cfg), _load_candidates(cfg, True), arch)
        elif command == "extract-features":
            PL.stage_extract(cfg, PL.load_cases(cfg), _load_candidates(cfg, True),
                             _load_model(cfg, "baseline"))
        elif command == "gbt":
            tag = f"{cfg.secondary}_{cfg.imputation}"
            rows = FU.read_features(Path(cfg.out_dir) / f"features_{tag}.bin")
            manifest = FU.read_pairs_manifest(Path(cfg.out_dir) / f"pairs_{tag}.csv")
            PL.stage_gbt(cfg, rows, manifest)
        elif command == "evaluate":
            _evaluate(cfg, with_report=False)
        elif command == "report":
            _evaluate(cfg, with_report=True)
        else:
            raise PL.ConfigError(f"unknown command {command!r}")
    except PL.StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - stage-tagged diagnostics
        print(f"[{command}] {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except PL.ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
