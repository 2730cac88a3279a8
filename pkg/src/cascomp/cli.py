"""Command-line interface.

Subcommands: gen-data (procedural dataset), train (one phase), eval
(Table-style metric CSV), complete (single-cloud inference to PLY), check
(gradient / oracle self-test suites). Run configuration is a flat
``key = value`` text file; unknown keys are rejected with the offending line
number, and ``--help`` lists every supported key.

Exit codes: 0 success, 2 configuration/usage error, 3 I/O error,
4 check-suite failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .backbone import BackboneConfig
from .cascade import CASCADE_MODES, DISTILL_MODES, LossConfig
from .errors import ConfigError, ContractViolation, ParseError
from .shapegen import KINDS, SETTINGS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECK = 4


def _parse_int(v):
    return int(v)


def _parse_float(v):
    return float(v)


def _parse_categories(v):
    cats = [c.strip() for c in v.split(",") if c.strip()]
    for c in cats:
        if c not in KINDS:
            raise ValueError(f"unknown category {c!r} (known: {', '.join(KINDS)})")
    if not cats:
        raise ValueError("empty category list")
    return cats


def _parse_choice(options):
    def parse(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return parse


# key -> (parser, default, help); the single flat configuration namespace
CONFIG_KEYS = {
    # dataset
    "count":          (_parse_int, 200, "number of generated samples"),
    "categories":     (_parse_categories, list(KINDS), "comma-separated shape categories"),
    "n":              (_parse_int, 256, "input resolution N (G=4N, G_s=2N, x=N)"),
    "seed":           (_parse_int, 0, "dataset generation seed"),
    "setting":        (_parse_choice(SETTINGS), "simple", "partial-view protocol"),
    # backbone
    "upsample_factor": (_parse_int, 4, "output points per input point (2 or 4)"),
    "n_c":            (_parse_int, 32, "proxy token count"),
    "k":              (_parse_int, 8, "proxy neighborhood size"),
    "channels":       (_parse_int, 64, "feature channels"),
    "encoder_layers": (_parse_int, 3, "encoder block count"),
    "decoder_layers": (_parse_int, 3, "decoder block count"),
    "heads":          (_parse_int, 4, "attention heads"),
    "n_q":            (_parse_int, 32, "query / coarse point count"),
    # training
    "epochs":         (_parse_int, None, "epochs (default: per-phase schedule)"),
    "batch_size":     (_parse_int, 8, "samples per optimizer step"),
    "lr":             (_parse_float, 1e-3, "Adam learning rate"),
    "beta1":          (_parse_float, 0.9, "Adam beta1"),
    "beta2":          (_parse_float, 0.999, "Adam beta2"),
    "eps":            (_parse_float, 1e-8, "Adam epsilon"),
    "master_seed":    (_parse_int, 0, "training master seed"),
    "eval_every":     (_parse_int, 10, "test-split evaluation cadence in epochs (0=off)"),
    # loss
    "lambda1":        (_parse_float, 1.0, "auxiliary-feature distillation weight"),
    "lambda2":        (_parse_float, 1.0, "main-encoder distillation weight"),
    "tau":            (_parse_float, 1.0, "distillation softmax temperature"),
    "distill_mode":   (_parse_choice(DISTILL_MODES), "kl", "distillation divergence"),
    "cascade_mode":   (_parse_choice(CASCADE_MODES), "auxiliary", "student pipeline shape"),
}


def parse_config(path: str | None) -> dict:
    """Flat key=value file -> full config dict; every error names its line."""
    values = {key: default for key, (_, default, _) in CONFIG_KEYS.items()}
    if path is None:
        return values
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for ln, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        parser = CONFIG_KEYS[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{ln}: bad value for {key!r}: {exc}") from exc
    return values


def backbone_from_config(values: dict) -> BackboneConfig:
    return BackboneConfig(n=values["n"], upsample_factor=values["upsample_factor"],
                          n_c=values["n_c"], k=values["k"], channels=values["channels"],
                          encoder_layers=values["encoder_layers"],
                          decoder_layers=values["decoder_layers"],
                          heads=values["heads"], n_q=values["n_q"])


def loss_from_config(values: dict) -> LossConfig:
    return LossConfig(lambda1=values["lambda1"], lambda2=values["lambda2"],
                      tau=values["tau"], distill_mode=values["distill_mode"],
                      cascade_mode=values["cascade_mode"])


def _config_epilog() -> str:
    lines = ["configuration file keys (key = value, one per line):"]
    for key, (_, default, help_text) in CONFIG_KEYS.items():
        if isinstance(default, list):
            default = ",".join(default)
        lines.append(f"  {key:<16} {help_text} (default: {default})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascomp",
        description="cascaded point cloud completion: data generation, training, evaluation",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker thread cap for evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train one phase")
    p.add_argument("--phase", required=True,
                   choices=("recon", "teacher-a", "teacher-b", "student", "baseline"))
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="output directory for checkpoint + log")
    p.add_argument("--from", dest="from_paths", action="append", default=[],
                   help="prerequisite checkpoint (repeatable)")
    p.add_argument("--resume", help="resume from a mid-phase checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="summary CSV path")

    p = sub.add_parser("complete", help="complete a single cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="in_path", required=True, help="input cloud (.xyz or .ply)")
    p.add_argument("--out", required=True, help="output cloud (.ply)")

    p = sub.add_parser("check", help="run self-check suites")
    p.add_argument("--suite", default="all", choices=("grad", "oracle", "all"))
    return parser


def cmd_gen_data(args) -> int:
    from .shapegen import make_dataset
    values = parse_config(args.config)
    manifest = make_dataset(args.out, values["count"], values["categories"],
                            values["n"], values["seed"], values["setting"])
    count = values["count"]
    print(f"wrote {count} samples, manifest at {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .shapegen import load_dataset
    from .training import (TrainConfig, load_checkpoint, run_phase,
                           save_checkpoint, LogRow, required_prerequisites)
    values = parse_config(args.config)
    dataset = load_dataset(args.data)
    cfg = TrainConfig(phase=args.phase, epochs=values["epochs"],
                      batch_size=values["batch_size"], lr=values["lr"],
                      beta1=values["beta1"], beta2=values["beta2"], eps=values["eps"],
                      master_seed=values["master_seed"], eval_every=values["eval_every"],
                      loss=loss_from_config(values),
                      backbone=backbone_from_config(values))
    prereqs = {}
    for path in args.from_paths:
        ck = load_checkpoint(path)
        prereqs[ck.phase] = ck
    for phase in required_prerequisites(cfg):
        if phase not in prereqs:
            raise ConfigError(f"phase {cfg.phase!r} requires a {phase!r} checkpoint "
                              f"(pass it with --from)")
    resume = load_checkpoint(args.resume) if args.resume else None

    result = run_phase(cfg, dataset, prereqs, resume=resume, eval_threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    ck_path = os.path.join(args.out, f"{cfg.phase}.ckpt")
    log_path = os.path.join(args.out, f"{cfg.phase}.log.csv")
    save_checkpoint(ck_path, result.checkpoint)
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LogRow.csv_header() + "\n")
        for row in result.log:
            fh.write(row.csv() + "\n")
    print(f"checkpoint at {ck_path}, log at {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .shapegen import load_dataset
    from .training import evaluate, load_checkpoint, predictor_from_checkpoint
    dataset = load_dataset(args.data)
    ck = load_checkpoint(args.checkpoint)
    predict = predictor_from_checkpoint(ck)
    report = evaluate(lambda s: predict(s.x), dataset, threads=args.threads)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("category,count,cd_l1,cd_l2,fscore\n")
        for name, count, rep in report.rows():
            fh.write(f"{name},{count},{rep.csv_row()}\n")
    samples_path = args.out + ".samples.csv"
    with open(samples_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,category,cd_l1,cd_l2,fscore\n")
        for sid, cat, rep in report.per_sample:
            fh.write(f"{sid},{cat},{rep.csv_row()}\n")
    print(f"summary at {args.out}, per-sample rows at {samples_path}")
    return EXIT_OK


def cmd_complete(args) -> int:
    from .shapegen import read_cloud, write_cloud
    from .training import load_checkpoint, predictor_from_checkpoint
    cloud = read_cloud(args.in_path)
    ck = load_checkpoint(args.checkpoint)
    predict = predictor_from_checkpoint(ck)
    completed = predict(cloud)
    write_cloud(args.out, completed, fmt="ply")
    print(f"completed {len(cloud)} -> {len(completed)} points at {args.out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_grad_suite, run_oracle_suite
    results = []
    if args.suite in ("grad", "all"):
        results.extend(run_grad_suite())
    if args.suite in ("oracle", "all"):
        results.extend(run_oracle_suite())
    failed = 0
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; keep the contract
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "complete":
            return cmd_complete(args)
        if args.command == "check":
            return cmd_check(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
