"""Command-line entry point: ``fofelm <command> --config run.cfg``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import RunConfig, load_config
from .errors import ComparisonError, ConfigError, DataError, FofeLMError
from .evaluation import EvalReport, bench_latency, compare, evaluate
from .fofe import Vocabulary
from .models import RoutingKey, build_model, count_params, load_model, save_model
from .training import (Strategy, encode_records, finetune_adapter, make_schedule, train_adapter_ri,
                       train_base)

log = logging.getLogger("fofelm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary.load(cfg.existing(cfg.section("vocab").get("path", "vocab.txt"), "vocabulary"))


def _read(cfg: RunConfig, name: str):
    return data_mod.read_tagged(cfg.existing(name, "corpus"), cfg.dialects, cfg.applications)


def _check_vocab(meta: dict, vocab: Vocabulary, what: str) -> None:
    if meta.get("vocab_sha256") not in (None, vocab.fingerprint()):
        raise ComparisonError(f"{what} was trained with a different vocabulary")


def cmd_generate(cfg: RunConfig, args) -> int:
    spec = cfg.generator_spec()
    ratios = cfg.split_ratios()
    records, truth = data_mod.generate_synthetic_corpus(spec)
    parts = [[], [], []]
    for di, dia in enumerate(spec.dialects):
        pieces = data_mod.split([r for r in records if r.dialect == dia], ratios, cfg.seed + di)
        for acc, piece in zip(parts, pieces):
            acc += piece
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train.tsv", "dev.tsv", "test.tsv"), parts):
        data_mod.write_tagged(cfg.output_dir / name, part)
    data_mod.write_ground_truth(cfg.output_dir / "ground_truth.json", truth)
    print(f"wrote {len(parts[0])}/{len(parts[1])}/{len(parts[2])} train/dev/test records "
          f"to {cfg.output_dir}")
    return EXIT_OK


def cmd_build_vocab(cfg: RunConfig, args) -> int:
    s = cfg.section("vocab")
    K = s.get("size", 2000, int)
    train = _read(cfg, "train.tsv")
    vocab = data_mod.build_vocab(train, K)
    vocab.save(cfg.resolve(s.get("path", "vocab.txt")))
    stats = data_mod.corpus_stats(train, vocab, s.get("single_size", K, int))
    (cfg.output_dir / "corpus_stats.json").write_text(
        json.dumps({"words": stats.words, "coverage": stats.coverage}, indent=2, sort_keys=True) + "\n")
    print(f"vocabulary: {vocab.size} ids; coverage of single-dialect vocabularies: "
          + ", ".join(f"{d}={c:.1f}%" for d, c in stats.coverage.items()))
    return EXIT_OK


def _run_training(cfg: RunConfig, args, section: str) -> int:
    s = cfg.section(section)
    plan = cfg.train_plan(section)
    vocab = _load_vocab(cfg)
    train_recs = _read(cfg, s.get("train", "train.tsv"))
    dev_recs = _read(cfg, s.get("dev", "dev.tsv"))
    corpora = encode_records(train_recs, vocab, cfg.dialects)
    dev = encode_records(dev_recs, vocab, cfg.dialects)
    proportions = s.get("proportions", None, lambda v: tuple(float(x) for x in v.split(",")))
    schedule = make_schedule(corpora, proportions, seed=plan.seed, batch_size=plan.batch_size)
    default_out = "model.ckpt" if section == "train" else "adapted.ckpt"
    out_path = cfg.resolve(s.get("output", default_out))
    metrics = cfg.resolve(s.get("metrics", "metrics.tsv" if section == "train" else "adapt_metrics.tsv"))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    if plan.strategy in (Strategy.BASE, Strategy.PT_A):
        if getattr(args, "resume", False) is False:
            metrics.unlink(missing_ok=True)
        model = build_model(cfg.architecture(vocab.size, section), plan.seed)
        state = cfg.resolve(s.get("state", f"{out_path.stem}.state"))
        if not args.resume:
            state.unlink(missing_ok=True)
        result = train_base(model, schedule, plan, dev, state_path=state, metrics_path=metrics,
                            resume=args.resume)
        model = result.model
    else:
        if getattr(args, "resume", False):
            raise ConfigError(f"--resume is supported for BASE and PT_A only, not {plan.strategy.value}")
        if "base_checkpoint" not in s:
            raise ConfigError(f"[{section}] strategy {plan.strategy.value} requires base_checkpoint")
        base_path = cfg.resolve(s.get("base_checkpoint"))
        if not base_path.exists():
            raise ConfigError(f"[{section}] base_checkpoint {base_path} does not exist")
        model, meta = load_model(base_path)
        _check_vocab(meta, vocab, str(base_path))
        metrics.unlink(missing_ok=True)
        placement = s.get("adapter_placement", None)
        for dialect in s.get("dialects", cfg.dialects, lambda v: tuple(x.strip() for x in v.split(","))):
            if plan.strategy is Strategy.RI_A:
                result = train_adapter_ri(model, dialect, schedule, plan, dev, placement=placement,
                                          metrics_path=metrics)
            else:
                result = finetune_adapter(model, dialect, schedule, plan, dev, metrics_path=metrics)
            model = result.model
    save_model(model, out_path, vocab.fingerprint(), {"strategy": plan.strategy.value})
    last = result.epochs[-1] if result.epochs else None
    print(f"saved {out_path} ({model.variant.value}, {plan.strategy.value})"
          + (f"; last dev perplexity {last.dev_ppl}" if last else ""))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    return _run_training(cfg, args, "train")


def cmd_adapt(cfg: RunConfig, args) -> int:
    return _run_training(cfg, args, "adapt")


def _keyed(records, vocab, model):
    keyed = {}
    for r in records:
        keyed.setdefault(RoutingKey(r.dialect, r.application), []).append(vocab.tokenize(r.text))
    return {k: keyed.get(k, []) for k in model.routing_keys() if keyed.get(k)}


def _report_path(cfg: RunConfig, name: str) -> Path:
    return cfg.output_dir / "reports" / f"{name}.json"


def cmd_eval(cfg: RunConfig, args) -> int:
    vocab = _load_vocab(cfg)
    ckpt = cfg.existing(args.checkpoint, "checkpoint")
    model, meta = load_model(ckpt)
    _check_vocab(meta, vocab, str(ckpt))
    records = _read(cfg, args.testset or cfg.section("eval").get("testset", "test.tsv"))
    if not records:
        raise DataError("test set is empty")
    name = args.name or ckpt.stem
    report = evaluate(model, name, vocab.fingerprint(), _keyed(records, vocab, model))
    path = _report_path(cfg, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.save(path)
    print(report.dumps(), end="")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    vocab = _load_vocab(cfg)
    ckpt = cfg.existing(args.checkpoint, "checkpoint")
    model, meta = load_model(ckpt)
    _check_vocab(meta, vocab, str(ckpt))
    records = _read(cfg, args.queries_file or cfg.section("bench").get("queries", "test.tsv"))
    if not records:
        raise DataError("query set is empty")
    n = args.queries or cfg.section("bench").get("count", 200, int)
    runs = args.runs if args.runs is not None else cfg.section("bench").get("runs", 3, int)
    keyed = _keyed(records, vocab, model)
    rng = np.random.default_rng(cfg.seed)
    name = args.name or ckpt.stem
    path = _report_path(cfg, name)
    report = EvalReport.load(path) if path.exists() else EvalReport(
        name, model.variant.value, vocab.fingerprint(), params_total=count_params(model).total)
    for key, sents in keyed.items():
        picks = rng.choice(len(sents), size=min(n, len(sents)), replace=False)
        queries = [sents[i][: int(rng.integers(1, len(sents[i])))] for i in sorted(picks)]
        stats = bench_latency(model, key, queries, runs=runs)
        report.latency[str(key)] = stats.to_dict()
        print(f"{key}: mean {stats.mean * 1e3:.3f} ms, P95 {stats.p95 * 1e3:.3f} ms "
              f"over {stats.runs} runs x {stats.queries} queries")
    path.parent.mkdir(parents=True, exist_ok=True)
    report.save(path)
    return EXIT_OK


def cmd_inspect(cfg: RunConfig | None, args) -> int:
    ckpt = Path(args.checkpoint)
    if cfg is not None and not ckpt.is_absolute():
        ckpt = cfg.resolve(ckpt)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model, meta = load_model(ckpt)
    lines = [f"variant\t{model.variant.value}", f"strategy\t{meta.get('strategy', '')}",
             "group\trole\tdialect\tapplication\ttrainable\tparams"]
    for g in model.groups.values():
        lines.append(f"{g.name}\t{g.role}\t{g.dialect or '*'}\t{g.application or '*'}\t"
                     f"{int(g.trainable)}\t{g.size}")
    lines.append(f"TOTAL\t\t\t\t\t{count_params(model).total}")
    for key in model.routing_keys():
        lines.append(f"ACTIVE[{key}]\t\t\t\t\t{count_params(model, key).total}")
    n_sub = sum(g.role == "subnet" for g in model.groups.values())
    lines.append(f"subnetworks\t{n_sub}")
    text = "\n".join(lines) + "\n"
    out = ckpt.with_suffix(".inspect.tsv")
    out.write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    reports = [EvalReport.load(cfg.resolve(p)) for p in args.reports]
    table = compare(reports).to_tsv()
    out = cfg.resolve(args.out or "comparison.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fofelm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help, config_required=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("config_file", nargs=None if config_required else "?",
                        metavar="CONFIG", help="run configuration (.cfg)")
        sp.add_argument("--output-dir", help="override [run] output_dir")
        return sp

    add("generate", "write a synthetic tagged corpus and its ground truth")
    add("build-vocab", "build the top-K vocabulary from train.tsv")
    sp = add("train", "train a BASE/PT_A model (or RI_A/FT_A from [train])")
    sp.add_argument("--resume", action="store_true", help="continue from the last epoch state")
    sp = add("adapt", "train dialect adapters (RI_A/FT_A) from [adapt]")
    sp.set_defaults(resume=False)
    sp = add("eval", "perplexity report per routing key")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--testset")
    sp.add_argument("--name")
    sp = add("bench", "LM forward latency, mean and nearest-rank P95")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--queries-file")
    sp.add_argument("--queries", type=int)
    sp.add_argument("--runs", type=int, default=None, help="timing runs (default 3)")
    sp.add_argument("--name")
    sp = sub.add_parser("inspect", help="list parameter groups and counts of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--config", dest="config_file")
    sp.add_argument("--output-dir")
    sp = add("compare", "tabulate reports, marking the best value per column")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.config_file:
            cfg = load_config(args.config_file, args.output_dir)
        return COMMANDS[args.command](cfg, args)
    except FofeLMError as exc:
        print(f"fofelm {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"fofelm {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
