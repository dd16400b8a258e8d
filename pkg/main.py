import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from pydantic import ValidationError

from config import RunConfig, build_run_config, describe_keys, load_config_file, parse_overrides
from errors import EXIT_GRADCHECK_FAILED, EXIT_OK, EXIT_USAGE, ConfigError, MobilityError, exit_code_for
from mobility.loader import load_city
from mobility.synthetic import SyntheticParams, synthesize_city, write_synthetic_city
from mobility.windows import build_city_forecast_windows, split_train_test
from models.mobility import TOTAL_DAYS, CityData, SequenceExample
from models.report import CitySummary
from network.model import ModelConfig
from services.baselines import HistoricalFrequencyPredictor, hf_fit, naive_bert_config
from services.checkpoint_service import Checkpoint, load_checkpoint, restore_model
from services.evaluation_service import (
    ModelPredictor,
    average_summaries,
    evaluate_predictions,
    export_predictions,
    summary_path,
    write_report,
    write_summary,
)
from services.gradcheck import run_gradcheck
from services.trainer import finetune, pretrain, resume, train_scratch

APP_NAME = "st-moe-mobility"

logger = logging.getLogger(APP_NAME)


class UsageParser(argparse.ArgumentParser):
    """argparse that exits with the usage status instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if value < 0:
        raise argparse.ArgumentTypeError(f"must not be negative, got {value}")
    return value


def seed_list(text: str) -> List[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not seeds or len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError(f"expected distinct seeds, got {text!r}")
    return seeds


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="shortcut for --set seed=S")


def _add_training_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="city CSV (uid,d,t,x,y)")
    parser.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    parser.add_argument("--epochs", type=non_negative_int, help="shortcut for --set epochs=N")
    parser.add_argument("--resume", metavar="CKPT", help="continue the run that wrote CKPT")
    _add_config_args(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog=APP_NAME, description="Spatial-temporal MoE transformer for next-day location prediction.")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    common = dict(epilog=describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter)

    gen = sub.add_parser("generate", help="write a synthetic commuter city", **common)
    gen.add_argument("--out", required=True, help="CSV path; a .meta sidecar is written next to it")
    gen.add_argument("--users", type=positive_int, required=True)
    gen.add_argument("--grid", type=positive_int, default=200)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--days", type=positive_int, default=TOTAL_DAYS)
    gen.add_argument("--first-weekday", type=int, default=0, choices=range(7))
    gen.add_argument("--params", help="key=value file of generator parameters")

    pre = sub.add_parser("pretrain", help="masked-location pretraining on a source city", **common)
    _add_training_args(pre)

    fine = sub.add_parser("finetune", help="forecast training from a pretrained checkpoint", **common)
    fine.add_argument("--from", dest="from_ckpt", required=True, metavar="CKPT", help="pretrained checkpoint")
    _add_training_args(fine)

    scratch = sub.add_parser("train-scratch", help="forecast training without pretraining", **common)
    scratch.add_argument("--naive", action="store_true", help="single-FFN head instead of the mixture")
    scratch.add_argument("--seeds", type=seed_list, metavar="S1,S2,..", help="one run per seed in OUT/seed_S")
    _add_training_args(scratch)

    ev = sub.add_parser("evaluate", help="score a model or baseline on the test days", **common)
    source = ev.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", metavar="CKPT")
    source.add_argument("--baseline", choices=["hf"])
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True, help="report CSV path")
    ev.add_argument("--predictions", help="also write predicted cells as uid,d,t,x,y")
    ev.add_argument(
        "--seeds",
        type=seed_list,
        metavar="S1,S2,..",
        help="score one model per seed ({seed} in --model) and report the mean summary",
    )
    _add_config_args(ev)

    grad = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient", **common)
    grad.add_argument("--quick", action="store_true", help="small G=6 model with sampled entries instead of the desk sweep")
    _add_config_args(grad)
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    values: Dict[str, str] = parse_overrides(getattr(args, "overrides", None))
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = str(args.epochs)
    return build_run_config(getattr(args, "config", None), values)


def cmd_generate(args: argparse.Namespace) -> int:
    params = SyntheticParams()
    if args.params:
        try:
            params = SyntheticParams.model_validate(load_config_file(args.params))
        except ValidationError as exc:
            raise ConfigError(f"invalid generator params: {exc}") from exc
    city = synthesize_city(args.users, args.grid, args.days, args.seed, params, args.first_weekday)
    meta = write_synthetic_city(args.out, city, seed=args.seed, days=args.days, params=params)
    print(f"wrote={args.out} meta={meta} users={args.users} records={city.record_count()}")
    return EXIT_OK


def _load(args: argparse.Namespace, cfg: RunConfig):
    return load_city(args.data, cfg.grid_size, total_days=cfg.total_days)


def _train(args: argparse.Namespace, phase: str) -> int:
    cfg = run_config_from_args(args)
    if getattr(args, "naive", False):
        cfg = naive_bert_config(cfg)
    city = _load(args, cfg)
    seeds = getattr(args, "seeds", None)
    if seeds:
        if args.resume:
            raise ConfigError("--resume continues a single run; it cannot be combined with --seeds")
        for seed in seeds:
            out_dir = seed_dir(args.out, seed)
            _print_result(out_dir, train_scratch(city, cfg.model_copy(update={"seed": seed}), out_dir))
        return EXIT_OK
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.phase != phase:
            raise ConfigError(f"--resume checkpoint is from phase {ckpt.phase!r}, not {phase!r}")
        result = resume(ckpt, city, cfg, args.out)
    elif phase == "pretrain":
        result = pretrain(city, cfg, args.out)
    elif phase == "finetune":
        result = finetune(load_checkpoint(args.from_ckpt), city, cfg, args.out)
    else:
        result = train_scratch(city, cfg, args.out)
    _print_result(args.out, result)
    return EXIT_OK


def _print_result(out_dir: str, checkpoint: Checkpoint) -> None:
    print(
        f"phase={checkpoint.phase} epoch={checkpoint.epoch} step={checkpoint.step} "
        f"best={os.path.join(out_dir, 'best.stmb')}"
    )


def seed_dir(out_dir: str, seed: int) -> str:
    return os.path.join(out_dir, f"seed_{seed}")


def seed_path(path: str, seed: int) -> str:
    """report.csv -> report.seed3.csv"""
    root, ext = os.path.splitext(path)
    return f"{root}.seed{seed}{ext}"


def _score(
    cfg: RunConfig,
    city: CityData,
    windows: List[SequenceExample],
    model_path: Optional[str],
    report_path: str,
    predictions_path: Optional[str],
) -> CitySummary:
    if model_path:
        model = restore_model(load_checkpoint(model_path), ModelConfig.from_run_config(cfg))
        predictor = ModelPredictor(model, history_len=cfg.history_len, horizon=cfg.horizon, batch_size=cfg.batch_size)
    else:
        train, _ = split_train_test(city, cfg.train_days)
        table = hf_fit(train, day_type=cfg.hf_day_type, first_weekday=cfg.first_weekday)
        predictor = HistoricalFrequencyPredictor(table, horizon=cfg.horizon)

    predictions = predictor.predict(windows)
    report = evaluate_predictions(
        windows,
        predictions,
        grid_size=cfg.grid_size,
        history_len=cfg.history_len,
        city=cfg.city,
        geo_bleu_n=cfg.geo_bleu_n,
        geo_bleu_weights=cfg.geo_bleu_weight_list(),
        geo_bleu_beta=cfg.geo_bleu_beta,
    )
    write_report(report, report_path)
    if predictions_path:
        export_predictions(windows, predictions, predictions_path, cfg.grid_size)
    return report.summary


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    if args.seeds and args.model and "{seed}" not in args.model:
        raise ConfigError("--seeds needs a {seed} placeholder in --model, e.g. out/seed_{seed}/best.stmb")
    city = _load(args, cfg)
    windows = build_city_forecast_windows(
        city,
        first_day=cfg.train_days,
        last_day=cfg.total_days,
        history_len=cfg.history_len,
        horizon=cfg.horizon,
        min_observed=cfg.min_observed,
        history_from_test=cfg.history_from_test,
        train_days=cfg.train_days,
        first_weekday=cfg.first_weekday,
    )
    if not args.seeds:
        summary = _score(cfg, city, windows, args.model, args.report, args.predictions)
        print(summary.to_line())
        return EXIT_OK

    summaries = []
    for seed in args.seeds:
        summary = _score(
            cfg.model_copy(update={"seed": seed}),
            city,
            windows,
            args.model.format(seed=seed) if args.model else None,
            seed_path(args.report, seed),
            seed_path(args.predictions, seed) if args.predictions else None,
        )
        print(f"seed={seed} {summary.to_line()}")
        summaries.append(summary)
    mean = average_summaries(summaries)
    write_summary(mean, summary_path(args.report))
    print(mean.to_line())
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    report = run_gradcheck(cfg, cfg.seed, quick=args.quick)
    print(report.to_line())
    return EXIT_OK if report.passed else EXIT_GRADCHECK_FAILED


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": lambda args: _train(args, "pretrain"),
    "finetune": lambda args: _train(args, "finetune"),
    "train-scratch": lambda args: _train(args, "scratch"),
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except MobilityError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        code = exit_code_for(exc, default=EXIT_USAGE)
        logger.error("%s failed: %s", args.command, exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
