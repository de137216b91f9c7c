"""Command-line interface.

Exit codes: 0 on success, 1 on configuration errors, 2 on runtime failures.
The BBADAPT_OUTPUT_ROOT environment variable, when set, is prepended to any
relative output_dir from the config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .data import Dataset
from .harness import (
    ConfigError,
    PRESETS,
    build_datasets,
    config_help,
    emit_report,
    evaluate,
    parse_config,
    prepare_source,
    run_experiment,
)
from .networks import load_checkpoint, save_checkpoint
from .oracle import (
    BlackBoxOracle,
    OracleClient,
    QueryMode,
    query_dataset,
    serve,
)


def _load_config(path: str, set_args: list[str] | None = None):
    overrides = {}
    for item in set_args or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in harness.CONFIG_SCHEMA:
            raise ConfigError(f"--set: unknown key {key!r}")
        overrides[key] = harness._coerce(key, harness.CONFIG_SCHEMA[key][0], raw.strip())
    config = parse_config(path, overrides)
    root = os.environ.get("BBADAPT_OUTPUT_ROOT")
    out = config.get("output_dir")
    if root and not Path(out).is_absolute():
        config = parse_config(path, {**overrides, "output_dir": str(Path(root) / out)})
    return config


def _source_and_oracle(config, verbose=False):
    source, target = build_datasets(config)
    model = prepare_source(config, source, verbose=verbose)
    oracle = BlackBoxOracle(model)
    mode = config.oracle_mode()
    cache = config.output_dir / f"oracle_cache_{mode.key.replace(':', '_')}.jsonl"
    records = query_dataset(oracle, target, mode, cache_path=cache)
    return source, target, model, oracle, records


def cmd_train_source(args) -> int:
    config = _load_config(args.config, args.set)
    source, _ = build_datasets(config)
    model = prepare_source(config, source, verbose=args.verbose)
    path = config.output_dir / "source.pt"
    acc = evaluate(model, source)["accuracy"]
    print(json.dumps({"checkpoint": str(path), "source_accuracy": acc}))
    return 0


def cmd_serve_oracle(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if model.arch.get("kind") != "source":
        raise ConfigError(f"{args.checkpoint} is not a vendor-model checkpoint")
    serve(BlackBoxOracle(model), host=args.host, port=args.port)
    return 0


def cmd_query(args) -> int:
    mode = QueryMode(args.mode, args.r)
    x = np.array([float(v) for v in args.input.split(",")], dtype=np.float32)
    if args.server:
        host, _, port = args.server.partition(":")
        client = OracleClient(host, int(port or 8781))
        result = client.query(x, mode, example_id=args.id)
    elif args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        result = BlackBoxOracle(model).query(x, mode, example_id=args.id)
    else:
        raise ConfigError("query needs --server host:port or --checkpoint path")
    print(json.dumps(result.to_json()))
    return 0


def cmd_distill(args) -> int:
    from .distill import run_distillation
    from .harness import _fresh_target_model

    config = _load_config(args.config, args.set)
    _, target, _, _, records = _source_and_oracle(config, verbose=args.verbose)
    inputs = target.inputs_array()
    model = _fresh_target_model(config, inputs.shape[1], args.seed)
    stage_dir = config.output_dir / "distill" / f"seed{args.seed}"
    model, hist = run_distillation(
        model, target, records, config.hyperparams(), config.optim(), args.seed,
        flags=config.distill_flags(),
        metrics_path=stage_dir / "distill_metrics.jsonl",
        keep_snapshots=False, verbose=args.verbose,
    )
    hist["bank"].save(stage_dir / "teacher_bank.json")
    path = stage_dir / "distilled.pt"
    save_checkpoint(model, path, seed=args.seed, stage="distill")
    print(json.dumps({"checkpoint": str(path), "accuracy": evaluate(model, target)["accuracy"]}))
    return 0


def cmd_finetune(args) -> int:
    from .finetune import run_finetune

    config = _load_config(args.config, args.set)
    _, target = build_datasets(config)
    model, _ = load_checkpoint(args.init)
    if model.arch.get("kind") != "target":
        raise ConfigError(f"{args.init} is not an adaptation-model checkpoint")
    stage_dir = config.output_dir / "finetune" / f"seed{args.seed}"
    model, _ = run_finetune(
        model, target, config.hyperparams(), config.optim(), args.seed,
        flags=config.finetune_flags(),
        weak_policy=config.weak_policy(),
        strong_policy=config.strong_policy(),
        metrics_path=stage_dir / "finetune_metrics.jsonl",
        verbose=args.verbose,
    )
    path = stage_dir / "final.pt"
    save_checkpoint(model, path, seed=args.seed, stage="finetune")
    print(json.dumps({"checkpoint": str(path), "accuracy": evaluate(model, target)["accuracy"]}))
    return 0


def cmd_run(args) -> int:
    config = _load_config(args.config, args.set)
    if args.matrix:
        presets = list(PRESETS)
    elif args.presets:
        presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    else:
        presets = None
    report = run_experiment(config, presets=presets, verbose=args.verbose)
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    written = emit_report(report, config.output_dir, formats)
    print(json.dumps({
        "fingerprint": report["fingerprint"],
        "written": [str(p) for p in written],
    }))
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config, args.set)
    source, target = build_datasets(config)
    data: Dataset = source if args.split == "source" else target
    model, _ = load_checkpoint(args.checkpoint)
    print(json.dumps(evaluate(model, data)))
    return 0


def cmd_report(args) -> int:
    with open(args.report) as f:
        report = json.load(f)
    out = Path(args.out) if args.out else Path(args.report).parent
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    written = emit_report(report, out, formats)
    print(json.dumps({"written": [str(p) for p in written]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bbadapt",
        description=__doc__,
        epilog="config keys:\n" + config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("train-source", cmd_train_source, "train the vendor model on the source domain")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--verbose", action="store_true")

    p = add("serve-oracle", cmd_serve_oracle, "serve a vendor checkpoint over HTTP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8781)

    p = add("query", cmd_query, "issue one truncated query, locally or remotely")
    p.add_argument("--input", required=True, help="comma-separated feature vector")
    p.add_argument("--mode", default="soft_top_r", choices=["hard", "soft_top_r"])
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--id", default="")
    p.add_argument("--server", default="", help="host:port of a served oracle")
    p.add_argument("--checkpoint", default="", help="local vendor checkpoint")

    p = add("distill", cmd_distill, "step one: distill a target model from oracle records")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--verbose", action="store_true")

    p = add("finetune", cmd_finetune, "step two: debiased fine-tuning of a distilled checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True, help="distilled checkpoint path")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--verbose", action="store_true")

    p = add("run", cmd_run, "full pipeline over all seeds, optional ablation matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--presets", default="", help=f"comma list from {list(PRESETS)}")
    p.add_argument("--matrix", action="store_true", help="run every ablation preset")
    p.add_argument("--formats", default="json,csv")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--verbose", action="store_true")

    p = add("eval", cmd_eval, "evaluate a checkpoint on the config's data")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="target", choices=["source", "target"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = add("report", cmd_report, "re-emit an existing report as CSV/plots")
    p.add_argument("--report", required=True, help="path to report.json")
    p.add_argument("--out", default="")
    p.add_argument("--formats", default="csv,plots")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
