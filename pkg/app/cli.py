"""Command-line entry point: baseline and manual-curriculum training, BO search, evaluation"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .core.bo_search import CurriculumObjective, run_search, select_best_trial, write_search_report
from .core.config import build_experiment, load_run_config, parse_run_config, settings
from .core.curriculum import constant_curriculum, default_params, reference_curricula, to_schedule
from .core.eval_harness import bucket_sets, build_sets, difficulty_sweep, evaluate_policy, metrics_row, write_bucket_csv, write_metrics_csv
from .core.exceptions import ConfigError, CurriculumBOError, InvalidArgumentError
from .core.manifest import config_digest, write_manifest
from .core.ppo import load_checkpoint, objective_from_training, save_checkpoint, train, write_curve_csv
from .core.seeding import derive_seed
from .models.schemas import Curriculum, ExperimentConfig, RunConfig, RunManifest, RunMode, SelectionMode

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FILE_ERROR = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curriculum-bo", description="Bayesian-optimization curriculum search")
    parser.add_argument("--mode", choices=[m.value for m in RunMode])
    parser.add_argument("--profile", choices=["paper", "desk"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="Output directory (default: <output_root>/<mode>-<profile>-seed<seed>)")
    parser.add_argument("--config", type=Path, help="JSON run configuration with env/train/search/eval sections")
    parser.add_argument("--set", dest="eval_set", choices=["easy", "hard"])
    parser.add_argument("--n", dest="n_eval", type=int, help="Evaluation episodes")
    parser.add_argument("--checkpoint", help="Policy checkpoint for evaluate/sweep")
    parser.add_argument("--env-mode", choices=["kp", "kappa", "p"])
    parser.add_argument("--lambda-ucb", type=float)
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one module setting, e.g. train.total_epochs=40 (value parsed as JSON)",
    )
    parser.add_argument("--log-level", default=None)
    return parser


def _apply_override(doc: Dict[str, Any], spec: str) -> None:
    key, sep, raw = spec.partition("=")
    section, dot, name = key.partition(".")
    if not sep or not dot or section not in ("env", "train", "search", "eval"):
        raise ConfigError("override", f"expected SECTION.KEY=VALUE with section env/train/search/eval, got '{spec}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    doc.setdefault(section, {})[name] = value


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Merge the config file with command-line flags; flags win"""
    doc: Dict[str, Any] = load_run_config(args.config) if args.config else {}
    flags = {
        "mode": args.mode,
        "profile": args.profile,
        "seed": args.seed,
        "out": args.out,
        "eval_set": args.eval_set,
        "n_eval": args.n_eval,
        "checkpoint": args.checkpoint,
        "env_mode": args.env_mode,
        "lambda_ucb": args.lambda_ucb,
    }
    doc.update({k: v for k, v in flags.items() if v is not None})
    for spec in args.override:
        _apply_override(doc, spec)
    if "mode" not in doc:
        raise ConfigError("mode", "a run mode is required (--mode or the config file)")
    doc.setdefault("profile", settings.default_profile.value)
    if "out" not in doc:
        doc["out"] = str(Path(settings.output_root) / f"{doc['mode']}-{doc['profile']}-seed{doc.get('seed', 0)}")
    return parse_run_config(doc)


def _write_curriculum(curriculum: Curriculum, path: Path) -> None:
    doc = {
        "changepoints": curriculum.changepoints,
        "max_epoch": curriculum.max_epoch,
        "schedule": [entry.model_dump() for entry in to_schedule(curriculum)],
    }
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")


def _train_run(run: RunConfig, exp: ExperimentConfig, out: Path, digest: str, scheme: str) -> List[str]:
    train_config = exp.train
    if run.mode is RunMode.TRAIN_DEFAULT:
        curriculum = constant_curriculum(default_params(run.env_mode), train_config.total_epochs)
        if "learning_rate" not in run.train:
            train_config = train_config.model_copy(update={"learning_rate": exp.default_learning_rate})
    else:
        curriculum = reference_curricula(run.env_mode, train_config.total_epochs)["manual"]
    logger.info(f"Training '{scheme}' with changepoints {curriculum.changepoints} over {train_config.total_epochs} epochs")

    hard = build_sets(run.env_mode)["hard"]
    policy, curve = train(curriculum, train_config, run.seed, hard, exp.env, settings.max_workers)
    objective = objective_from_training(
        curve,
        policy,
        hard,
        exp.eval.objective_n_eval,
        derive_seed(run.seed, "objective"),
        config=exp.eval,
        env_config=exp.env,
        max_workers=settings.max_workers,
    )

    _write_curriculum(curriculum, out / "curriculum.json")
    write_curve_csv(curve, out / "curve.csv")
    save_checkpoint(out / "policy.pt", policy, train_config, digest)
    summary = {"scheme": scheme, "objective": objective, "diverged": curve.diverged, "peak_eval_reward": curve.peak_eval_reward}
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    logger.info(f"'{scheme}' finished with hard-set objective {objective:.2f}")
    return ["curriculum.json", "curve.csv", "policy.pt", "summary.json"]


def _search_run(run: RunConfig, exp: ExperimentConfig, out: Path) -> List[str]:
    hard = build_sets(run.env_mode)["hard"]
    objective = CurriculumObjective(
        exp.search.ladder,
        exp.search.train_config,
        hard,
        run.seed,
        eval_config=exp.eval,
        env_config=exp.env,
        checkpoint_dir=out / "checkpoints",
        max_workers=settings.max_workers,
    )
    result = run_search(exp.search, objective, checkpoint_path=out / "search_checkpoint.json", resume=True)
    written = write_search_report(result, out)

    best = {mode.value: select_best_trial(result, mode).model_dump(mode="json", exclude={"training_curve"}) for mode in SelectionMode}
    (out / "best.json").write_text(json.dumps(best, indent=2), encoding="utf-8")
    logger.info(f"Search finished: {len(result.trials)} trials, best y={result.best_by_final.y:.2f}")
    written.extend(["best.json", "search_checkpoint.json"])
    written.extend(f"checkpoints/{Path(t.checkpoint_path).name}" for t in result.trials if t.checkpoint_path)
    return written


def _evaluate_run(run: RunConfig, exp: ExperimentConfig, out: Path) -> List[str]:
    if not run.checkpoint:
        raise ConfigError("checkpoint", f"--checkpoint is required for {run.mode.value}")
    policy, _, _ = load_checkpoint(run.checkpoint)
    scheme = Path(run.checkpoint).stem

    if run.mode is RunMode.EVALUATE:
        eval_set = build_sets(run.env_mode)[run.eval_set]
        report = evaluate_policy(policy, eval_set, exp.eval.n_eval, run.seed, exp.env, settings.max_workers)
        write_metrics_csv([metrics_row(scheme, report)], out / "metrics.csv")
        logger.info(f"{scheme} on {eval_set.name}: {report.mean_reward:.2f} +/- {report.std_reward:.2f} over {report.n_eval} episodes")
        return ["metrics.csv"]

    buckets = bucket_sets(run.env_mode)
    reports = difficulty_sweep(policy, exp.eval.n_per_bucket, run.seed, run.env_mode, exp.env, settings.max_workers)
    write_bucket_csv(scheme, reports, buckets, out / "buckets.csv")
    return ["buckets.csv"]


def run(config: RunConfig) -> RunManifest:
    """Execute one run and write its artifacts plus a manifest into ``config.out``"""
    exp = build_experiment(config)
    digest = config_digest({"run": config.model_dump(mode="json"), "experiment": exp.model_dump(mode="json")})
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    if config.mode is RunMode.TRAIN_DEFAULT:
        outputs = _train_run(config, exp, out, digest, "default")
    elif config.mode is RunMode.TRAIN_MANUAL:
        outputs = _train_run(config, exp, out, digest, "manual")
    elif config.mode is RunMode.SEARCH_BO:
        outputs = _search_run(config, exp, out)
    else:
        outputs = _evaluate_run(config, exp, out)

    (out / "run_config.json").write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return write_manifest(out, config, outputs + ["run_config.json"], digest=digest)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = config_from_args(args)
        manifest = run(config)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except InvalidArgumentError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_USAGE
    except FileNotFoundError as e:
        logger.error(f"{e}")
        return EXIT_FILE_ERROR
    except CurriculumBOError as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return EXIT_RUNTIME
    logger.info(f"Run {manifest.run_id} complete: {len(manifest.outputs)} outputs in {config.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
