"""Command-line surface: generate data, mine the graph, train, evaluate,
predict, and compare model variants.

One binary with subcommands. Options may come from a JSON config file
(sections ``model``, ``train``, ``data``) with command-line flags taking
precedence; unknown config keys are rejected. Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import sys
import tempfile
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

from .errors import DataError, TagtrimError, UsageError
from .model import (
    ModelConfig,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .querydata import (
    DROP_LABEL,
    KEEP_LABEL,
    DropRule,
    QueryRecord,
    SynthConfig,
    build_vocab,
    default_synth_config,
    generate_synthetic,
    read_dataset,
    split_records,
    write_dataset,
)
from .taggraph import mine_tag_pairs, read_graph, write_graph
from .traineval import (
    TrainConfig,
    VARIANTS,
    epoch_log_csv,
    evaluate,
    per_length_csv,
    run_experiment,
    train,
)

LABEL_NAMES = {1: "special", 2: "keep", 3: "drop"}

CONFIG_SECTIONS = ("model", "train", "data")

# flag destination -> config field, shared by cmd_train and cmd_compare
MODEL_FLAG_FIELDS = (
    "d_model", "n_heads", "n_layers", "d_ff", "max_len", "fusion",
    "graph_mode", "dropout",
)
TRAIN_FLAG_FIELDS = (
    "learning_rate", "epochs", "batch_size", "patience", "weight_decay",
    "seed",
)


@dataclass(frozen=True)
class RunConfig:
    """Fully merged configuration: JSON file values under flag overrides."""

    model: ModelConfig
    train: TrainConfig
    synth: SynthConfig


def _read_config_file(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(
            f"unknown config sections {sorted(unknown)}; "
            f"expected {list(CONFIG_SECTIONS)}"
        )
    for section, value in raw.items():
        if not isinstance(value, dict):
            raise UsageError(f"config section {section!r} must be an object")
    return raw


def _section_kwargs(raw, section, cls):
    data = dict(raw.get(section, {}))
    known = {f.name for f in dataclass_fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(
            f"unknown {section} config keys: {sorted(unknown)}"
        )
    return data


def _synth_kwargs(raw):
    """The ``data`` section with JSON-friendly spellings converted."""
    data = _section_kwargs(raw, "data", SynthConfig)
    if "length_dist" in data:
        try:
            data["length_dist"] = {
                int(k): float(v) for k, v in data["length_dist"].items()
            }
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad length_dist in config: {exc}") from exc
    if "rules" in data:
        try:
            data["rules"] = tuple(DropRule(*pair) for pair in data["rules"])
        except TypeError as exc:
            raise UsageError(
                "config rules must be [tag, trigger] pairs"
            ) from exc
    return data


def load_run_config(path, model_overrides=None, train_overrides=None,
                    synth_overrides=None):
    """Build a RunConfig from a JSON file (optional) plus flag overrides."""
    raw = _read_config_file(path)
    model_kwargs = _section_kwargs(raw, "model", ModelConfig)
    train_kwargs = _section_kwargs(raw, "train", TrainConfig)
    defaults = default_synth_config()
    synth_kwargs = {
        "n_records": defaults.n_records,
        "seed": defaults.seed,
        "ambiguous_frac": defaults.ambiguous_frac,
        "tag_ambiguity": dict(defaults.tag_ambiguity),
        "pair_boost": defaults.pair_boost,
    }
    synth_kwargs.update(_synth_kwargs(raw))
    model_kwargs.update(model_overrides or {})
    train_kwargs.update(train_overrides or {})
    synth_kwargs.update(synth_overrides or {})
    try:
        return RunConfig(
            model=ModelConfig(**model_kwargs),
            train=TrainConfig(**train_kwargs),
            synth=SynthConfig(**synth_kwargs),
        )
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _flag_overrides(args, names):
    return {
        name: getattr(args, name)
        for name in names
        if getattr(args, name, None) is not None
    }


def _require_inputs(*paths):
    for path in paths:
        if path is not None and not Path(path).exists():
            raise UsageError(f"input path does not exist: {path}")


def _writable_dir(path):
    """Ensure ``path`` is a directory we can create files in."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=out):
            pass
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc}")
    return out


def _read_records(path):
    records = read_dataset(path)
    if not records:
        raise DataError(f"no records in {path}")
    return records


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8")


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _warn(message):
    print(f"warning: {message}", file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via UsageError (exit code 1)."""

    def error(self, message):
        raise UsageError(message)


def _add_model_flags(parser, exclude=()):
    group = parser.add_argument_group("model overrides")
    if "d_model" not in exclude:
        group.add_argument("--d-model", dest="d_model", type=int)
        group.add_argument("--n-heads", dest="n_heads", type=int)
        group.add_argument("--n-layers", dest="n_layers", type=int)
        group.add_argument("--d-ff", dest="d_ff", type=int)
        group.add_argument("--max-len", dest="max_len", type=int)
        group.add_argument("--dropout", dest="dropout", type=float)
    if "fusion" not in exclude:
        group.add_argument("--fusion", dest="fusion",
                           choices=("gated", "mean", "min", "max"))
        group.add_argument("--graph-mode", dest="graph_mode",
                           choices=("none", "static", "dynamic"))


def _add_train_flags(parser, include_seed=True):
    group = parser.add_argument_group("training overrides")
    group.add_argument("--learning-rate", dest="learning_rate", type=float)
    group.add_argument("--epochs", dest="epochs", type=int)
    group.add_argument("--batch-size", dest="batch_size", type=int)
    group.add_argument("--patience", dest="patience", type=int)
    group.add_argument("--weight-decay", dest="weight_decay", type=float)
    if include_seed:
        group.add_argument("--seed", dest="seed", type=int)


def _seed_list(text):
    try:
        seeds = tuple(int(part) for part in text.split(",") if part != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _variant_list(text):
    names = tuple(part.strip() for part in text.split(",") if part.strip())
    for name in names:
        if name not in VARIANTS:
            raise argparse.ArgumentTypeError(
                f"unknown variant {name!r}; choose from {sorted(VARIANTS)}"
            )
    if not names:
        raise argparse.ArgumentTypeError("variant list is empty")
    return names


def build_parser():
    parser = _Parser(
        prog="tagtrim",
        description="Tag-aware keep/drop classification of query tokens.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser(
        "gen-data", help="generate a synthetic corpus and 6:2:2 splits"
    )
    p.add_argument("--config", help="JSON config file (uses the data section)")
    p.add_argument("--out-dir", required=True,
                   help="directory for train/val/test JSONL plus manifest")
    p.add_argument("--n-records", dest="n_records", type=int,
                   help="total record count before splitting")
    p.add_argument("--seed", dest="seed", type=int,
                   help="generator and split seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("mine", help="mine frequent tag pairs from a corpus")
    p.add_argument("--data", required=True, help="training corpus (JSONL)")
    p.add_argument("--out", required=True, help="output graph file (TSV)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--min-support", dest="min_support", type=int,
                       help="absolute record-count threshold")
    group.add_argument("--support-frac", dest="support_frac", type=float,
                       help="threshold as a fraction of records "
                            "(default 0.005)")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", help="JSON config file (model/train sections)")
    p.add_argument("--train", required=True, dest="train_path",
                   help="training corpus (JSONL)")
    p.add_argument("--val", required=True, dest="val_path",
                   help="validation corpus (JSONL)")
    p.add_argument("--graph", help="mined tag graph (TSV); required in "
                                   "static graph mode")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="epoch log CSV path "
                                 "(default: checkpoint path with .log.csv)")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation corpus (JSONL)")
    p.add_argument("--json-out", dest="json_out",
                   help="also write the metrics JSON here")
    p.add_argument("--per-length-out", dest="per_length_out",
                   help="also write the per-length CSV here")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "predict", help="label one query and print the kept phrase"
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True,
                   help="whitespace-separated tokens")
    p.add_argument("--tags", required=True,
                   help="whitespace-separated tags, one per token")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser(
        "compare", help="train and score model variants across seeds"
    )
    p.add_argument("--config", help="JSON config file (model/train sections)")
    p.add_argument("--train", required=True, dest="train_path")
    p.add_argument("--val", required=True, dest="val_path")
    p.add_argument("--test", required=True, dest="test_path")
    p.add_argument("--graph", help="mined tag graph (TSV); required when "
                                   "static variants run")
    p.add_argument("--out-dir", required=True,
                   help="directory for runs.csv and summary.csv")
    p.add_argument("--variants", type=_variant_list,
                   default=tuple(VARIANTS),
                   help="comma-separated subset of "
                        f"{','.join(VARIANTS)}")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", type=_seed_list, default=(0, 1, 2),
                       help="comma-separated seeds (default 0,1,2)")
    seeds.add_argument("--seed", dest="single_seed", type=int,
                       help="shorthand for a single-seed run")
    _add_model_flags(p, exclude=("fusion",))
    _add_train_flags(p, include_seed=False)
    p.set_defaults(func=cmd_compare)

    return parser


def cmd_gen_data(args):
    overrides = _flag_overrides(args, ("n_records", "seed"))
    run_cfg = load_run_config(args.config, synth_overrides=overrides)
    out_dir = _writable_dir(args.out_dir)
    cfg = run_cfg.synth
    records = generate_synthetic(cfg)
    train_r, test_r, val_r = split_records(records, cfg.seed)
    names = {"train": train_r, "val": val_r, "test": test_r}
    for name, subset in names.items():
        write_dataset(subset, out_dir / f"{name}.jsonl")
    manifest = {
        "seed": cfg.seed,
        "total": len(records),
        "ratio": "6:2:2",
        "counts": {name: len(subset) for name, subset in names.items()},
        "files": {name: f"{name}.jsonl" for name in names},
    }
    _write_text(out_dir / "manifest.json", _dump_json(manifest))
    print(
        f"wrote {len(train_r)}/{len(val_r)}/{len(test_r)} "
        f"train/val/test records to {out_dir}"
    )
    return 0


def cmd_mine(args):
    _require_inputs(args.data)
    records = _read_records(args.data)
    if args.min_support is None and args.support_frac is None:
        graph = mine_tag_pairs(records, support_frac=0.005)
        applied = "default 0.5% of records"
    elif args.min_support is not None:
        graph = mine_tag_pairs(records, min_support=args.min_support)
        applied = "absolute"
    else:
        graph = mine_tag_pairs(records, support_frac=args.support_frac)
        applied = f"{100 * args.support_frac:g}% of records"
    write_graph(graph, args.out)
    print(
        f"min_support {graph.min_support} records ({applied}); "
        f"kept {len(graph.edges)} tag pairs -> {args.out}"
    )
    return 0


def cmd_train(args):
    _require_inputs(args.train_path, args.val_path, args.graph)
    run_cfg = load_run_config(
        args.config,
        model_overrides=_flag_overrides(args, MODEL_FLAG_FIELDS),
        train_overrides=_flag_overrides(args, TRAIN_FLAG_FIELDS),
    )
    model_cfg, train_cfg = run_cfg.model, run_cfg.train
    graph = None
    if model_cfg.graph_mode == "static":
        if args.graph is None:
            raise UsageError(
                "static graph mode requires --graph (mine one with "
                "'tagtrim mine')"
            )
        graph = read_graph(args.graph)
    elif args.graph is not None:
        _warn(f"--graph is ignored in {model_cfg.graph_mode} graph mode")

    train_records = _read_records(args.train_path)
    val_records = _read_records(args.val_path)
    result = train(model_cfg, train_cfg, train_records, val_records,
                   graph=graph)
    save_checkpoint(args.out, result.params, model_cfg, result.vocab, graph)
    log_path = args.log or str(Path(args.out).with_suffix(".log.csv"))
    _write_text(log_path, epoch_log_csv(result.log))
    best = result.log[result.best_epoch - 1]
    print(
        f"trained {len(result.log)} epochs; best epoch {result.best_epoch} "
        f"(val loss {best.val_loss:.6f}); checkpoint -> {args.out}; "
        f"log -> {log_path}"
    )
    return 0


def cmd_eval(args):
    _require_inputs(args.checkpoint, args.data)
    params, model_cfg, vocab, graph = load_checkpoint(args.checkpoint)
    records = _read_records(args.data)
    report = evaluate(params, records, model_cfg, vocab, graph=graph,
                      batch_size=args.batch_size)
    blob = _dump_json(report.to_dict())
    sys.stdout.write(blob)
    if args.json_out:
        _write_text(args.json_out, blob)
    if args.per_length_out:
        _write_text(args.per_length_out, per_length_csv(report))
    return 0


def cmd_predict(args):
    _require_inputs(args.checkpoint)
    params, model_cfg, vocab, graph = load_checkpoint(args.checkpoint)
    tokens = args.query.split()
    tags = args.tags.split()
    if not tokens:
        raise UsageError("query is empty")
    if len(tokens) != len(tags):
        raise UsageError(
            f"query has {len(tokens)} tokens but {len(tags)} tags were given"
        )
    for token in tokens:
        if token not in vocab.token_to_id:
            _warn(f"unknown token {token!r} mapped to UNK")
    for tag in tags:
        if tag not in vocab.tag_to_id:
            _warn(f"unknown tag {tag!r} mapped to UNK")
    record = QueryRecord(
        source=tokens, target=tokens, tags=tags,
        labels=[KEEP_LABEL] * len(tokens),
    )
    trace = forward(record, params, model_cfg, vocab, graph=graph)
    predicted = [int(x) + 1 for x in trace.p[1 : len(tokens) + 1].argmax(-1)]
    for token, label in zip(tokens, predicted):
        print(f"{token}\t{LABEL_NAMES[label]}")
    kept = [t for t, l in zip(tokens, predicted) if l == KEEP_LABEL]
    print(f"kept: {' '.join(kept)}")
    return 0


def cmd_compare(args):
    _require_inputs(args.train_path, args.val_path, args.test_path,
                    args.graph)
    run_cfg = load_run_config(
        args.config,
        model_overrides=_flag_overrides(args, MODEL_FLAG_FIELDS),
        train_overrides=_flag_overrides(
            args, [f for f in TRAIN_FLAG_FIELDS if f != "seed"]
        ),
    )
    seeds = ((args.single_seed,) if args.single_seed is not None
             else args.seeds)
    needs_graph = any(VARIANTS[v][0] == "static" for v in args.variants)
    if needs_graph and args.graph is None:
        raise UsageError(
            "the selected variants include a static graph mode; pass --graph"
        )
    graph = read_graph(args.graph) if args.graph is not None else None
    out_dir = _writable_dir(args.out_dir)

    train_records = _read_records(args.train_path)
    val_records = _read_records(args.val_path)
    test_records = _read_records(args.test_path)
    result = run_experiment(
        args.variants, run_cfg.model, run_cfg.train, train_records,
        val_records, test_records, graph=graph, seeds=seeds,
    )
    _write_text(out_dir / "runs.csv", result.runs_csv())
    _write_text(out_dir / "summary.csv", result.summary_csv())
    sys.stdout.write(result.table())
    print(f"runs -> {out_dir / 'runs.csv'}; summary -> {out_dir / 'summary.csv'}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help and friends
        code = exc.code
        return int(code) if isinstance(code, int) else 0
    except TagtrimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    """Console-script entry point."""
    raise SystemExit(main())
