"""Command-line entry point.

Subcommands: gen-data, train, eval, count-params, ablate, gradcheck.
Every run prints its fully resolved config so the output is reproducible
from the printed text plus the corpus file alone. Exit codes: 0 success,
1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .adapters import AdapterConfigError
from .audit import AUDIT_METHODS, audit, audit_table, default_method_configs, table_csv, table_text
from .configfile import (
    ConfigError,
    ExperimentConfig,
    default_experiment_config,
    load_config,
    render_config,
    with_overrides,
)
from .data import CorpusFormatError, generate, read_corpus, write_corpus
from .encoder import ENCODER_PRESETS, ModelConfigError, encoder_preset
from .gradcheck import all_cases, check_case
from .metrics import UndefinedEerError, compute_eer
from .model import build_model
from .params import CheckpointError, ParamStore
from .training import (
    AXIS_NAMES,
    NonFiniteLossError,
    TrainConfigError,
    ablation_csv,
    default_grid,
    run_ablation,
    score_corpus,
    scores_csv,
    summary_text,
    train,
    train_log_csv,
)

VALIDATION_ERRORS = (
    ConfigError,
    AdapterConfigError,
    ModelConfigError,
    TrainConfigError,
    CheckpointError,
    CorpusFormatError,
    UndefinedEerError,
    ValueError,
    FileNotFoundError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 with usage text instead of argparse's exit 2
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="adaptlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus file")
    p.add_argument("--spec", required=True, help="experiment config supplying the [data] section")
    p.add_argument("--out", required=True, help="output corpus path")
    p.add_argument("--seed", type=int, default=None, help="override the data seed")
    p.add_argument("--workers", type=int, default=1, help="parallel generation workers")

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", default=None, help="corpus file; generated from [data] if omitted")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="score a corpus with a checkpoint and report EER")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="score CSV path")

    p = sub.add_parser("count-params", help="audit trainable-parameter budgets")
    p.add_argument("--preset", default="xlsr", choices=sorted(ENCODER_PRESETS))
    p.add_argument("--method", default="all",
                   help=f"one of {AUDIT_METHODS} or 'all'")
    p.add_argument("--out", default=None, help="CSV path")

    p = sub.add_parser("ablate", help="sweep one ablation axis over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=AXIS_NAMES)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (0..n-1)")
    p.add_argument("--corpus", default=None)
    p.add_argument("--out", required=True, help="results CSV path")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--all", action="store_true", help="include adapter variants")
    p.add_argument("--op", default=None, help="check a single op by name")
    p.add_argument("--trials", type=int, default=20)
    return parser


def _print_config(cfg: ExperimentConfig) -> None:
    print("# resolved config")
    print(render_config(cfg))


def _load_or_default(path: str | None, seed: int | None) -> ExperimentConfig:
    cfg = load_config(path) if path is not None else default_experiment_config()
    return with_overrides(cfg, seed)


def _corpus_for(args, cfg: ExperimentConfig):
    if args.corpus is not None:
        return read_corpus(args.corpus)
    return generate(cfg.data)


# -- subcommand bodies -------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = _load_or_default(args.spec, args.seed)
    _print_config(cfg)
    corpus = generate(cfg.data, workers=max(1, args.workers))
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} records ({corpus.frames}x{corpus.features}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_or_default(args.config, args.seed)
    _print_config(cfg)
    corpus = _corpus_for(args, cfg)
    model = build_model(cfg.encoder, cfg.adapter, seed=cfg.train.seed, mode=cfg.train.mode)
    print(f"trainable parameters (excl. head): {model.num_trainable(exclude_head=True)}")
    result = train(model, corpus, cfg.train)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.csv")
    with open(log_path, "w", newline="") as fh:
        fh.write(train_log_csv(result.log))
    model.store.restore(result.best_state)
    ckpt_path = os.path.join(args.out, "checkpoint.adlb")
    model.store.save(ckpt_path)
    print(f"best dev EER {result.best_dev_eer:.4f}% at epoch {result.best_epoch}")
    print(f"wrote {log_path} and {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_or_default(args.config, None)
    _print_config(cfg)
    corpus = read_corpus(args.corpus)
    model = build_model(cfg.encoder, cfg.adapter, seed=cfg.train.seed, mode=cfg.train.mode)
    model.store.load_values_from(ParamStore.load(args.checkpoint))
    score_set = score_corpus(model, corpus, batch_size=cfg.train.batch_size)
    result = compute_eer(score_set)
    print(
        f"EER {result.eer_percent:.4f}% at threshold {result.threshold_at_eer:.6f} "
        f"({result.num_bonafide} bonafide / {result.num_spoof} spoof)"
    )
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(scores_csv(corpus, score_set))
        print(f"wrote {args.out}")
    return 0


def _cmd_count_params(args) -> int:
    cfg = encoder_preset(args.preset)
    if args.method == "all":
        reports = audit_table(cfg)
    else:
        if args.method not in AUDIT_METHODS:
            raise ConfigError(f"unknown method {args.method!r}; have {AUDIT_METHODS} or 'all'")
        reports = [audit(cfg, default_method_configs()[args.method])]
    print(f"preset {args.preset}: L={cfg.num_layers} D={cfg.model_dim} D_ff={cfg.inner_dim}")
    print(table_text(reports))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(table_csv(reports))
        print(f"wrote {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_or_default(args.config, None)
    _print_config(cfg)
    corpus = _corpus_for(args, cfg)
    grid = default_grid(args.axis, cfg.adapter)
    seeds = list(range(args.seeds))
    rows, summaries = run_ablation(args.axis, grid, cfg.encoder, cfg.train, corpus, seeds)
    with open(args.out, "w", newline="") as fh:
        fh.write(ablation_csv(rows))
    print(summary_text(args.axis, summaries))
    failures = [r for r in rows if r.error]
    for r in failures:
        print(f"FAILED {r.config_id} seed {r.seed}: {r.error}", file=sys.stderr)
    print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    cases = all_cases(include_adapters=args.all or args.op is not None)
    if args.op is not None:
        cases = [c for c in cases if c.name == args.op]
        if not cases:
            raise ConfigError(f"no registered op named {args.op!r}")
    failures = 0
    for case in cases:
        result = check_case(case, trials=args.trials)
        status = "PASS" if result.passed else "FAIL"
        print(f"{case.name:<40} max_rel_err={result.max_rel_err:.3e} {status}")
        failures += 0 if result.passed else 1
    if failures:
        print(f"{failures} op(s) failed the gradient check", file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "count-params": _cmd_count_params,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
