"""Command-line surface: search, enumerate, distill, report, verify.

Every run directory is self-describing: it holds a byte copy of the
config, a version stamp, the checkpoint, and all emitted tables, so a
completed or interrupted run can be reported or resumed from the
directory alone.  ELM_CACHE_DIR overrides where the persistent fitness
cache lives.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_run_config
from .distillation import (
    DistillConfig,
    DivergenceError,
    distill,
    pretrain_teacher,
    write_manifest,
)
from .evolution import (
    EvalOutcome,
    SearchAborted,
    SearchResult,
    run_search,
)
from .mapping_space import (
    ArchPair,
    InvalidMappingError,
    SpaceError,
    build_space,
    decode,
    enumerate_space,
    format_gene,
    format_mapping,
    heuristic_mapping,
    parse_gene,
    parse_mapping,
)
from .oracle import count_space_direct
from .proxy_tasks import (
    ProxyFitnessEvaluator,
    build_tasks,
    derive_seed,
    finetune_and_score,
    generate_corpus,
    subsample,
)
from .reporting import (
    read_fitness_table,
    spearman,
    write_best_gene,
    write_csv,
    write_generation_stats,
    write_loss_curve,
    write_per_gene_table,
    write_rank_table,
)
from .tinyformer import TinyTransformer, layer_contribution, load_snapshot, save_snapshot

logger = logging.getLogger(__name__)

TASK_NAMES = ("classification", "pair", "span")


# ----------------------------------------------------------------------
# shared helpers

def _prepare_run_dir(config_path: Path, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "config.ini"
    if not (target.exists() and target.read_bytes() == config_path.read_bytes()):
        shutil.copyfile(config_path, target)
    (out_dir / "version.txt").write_text(f"elmsearch {__version__}\n")


def _teacher_for_run(cfg: RunConfig, out_dir: Path, corpus) -> TinyTransformer:
    snap = out_dir / "teacher.snap"
    if snap.exists():
        return load_snapshot(snap)
    result = pretrain_teacher(
        cfg.teacher,
        corpus,
        steps=cfg.pretrain.steps,
        batch_size=cfg.pretrain.batch_size,
        learning_rate=cfg.pretrain.learning_rate,
        warmup_frac=cfg.pretrain.warmup_frac,
        seed=derive_seed(cfg.seed, "pretrain"),
    )
    save_snapshot(result.model, snap)
    (out_dir / "teacher_metrics.json").write_text(json.dumps({
        "masked_accuracy": result.masked_accuracy,
        "final_loss": result.losses[-1],
        "chance_accuracy": 1.0 / cfg.teacher.vocab_size,
    }, indent=2, sort_keys=True) + "\n")
    write_loss_curve(out_dir / "pretrain_losses.csv", result.losses)
    return result.model


def _cache_file(cfg: RunConfig, config_path: Path, out_dir: Path) -> Path:
    cache_dir = os.environ.get("ELM_CACHE_DIR")
    base = Path(cache_dir) if cache_dir else out_dir / "cache"
    base.mkdir(parents=True, exist_ok=True)
    fingerprint = hashlib.blake2b(config_path.read_bytes(), digest_size=8).hexdigest()
    return base / f"fitness_{fingerprint}.json"


def _load_cache(path: Path) -> dict[str, EvalOutcome]:
    if not path.exists():
        return {}
    raw = json.loads(path.read_text())
    return {
        bits: EvalOutcome(v["fitness"], dict(v["per_task"]), v.get("error"))
        for bits, v in raw.items()
    }


def _save_cache(path: Path, cache: dict[str, EvalOutcome]) -> None:
    payload = {
        bits: {"fitness": o.fitness, "per_task": o.per_task, "error": o.error}
        for bits, o in cache.items()
    }
    path.write_text(json.dumps(payload, sort_keys=True))


def _build_evaluator(
    cfg: RunConfig, teacher: TinyTransformer, corpus, out_dir: Path
) -> ProxyFitnessEvaluator:
    space = build_space(cfg.arch)
    suite = build_tasks(
        corpus,
        train_size=cfg.proxy.task_train_size,
        dev_size=cfg.proxy.task_dev_size,
        seed=derive_seed(cfg.seed, "tasks"),
    )
    evaluator = ProxyFitnessEvaluator(
        teacher=teacher,
        student_template=cfg.student,
        space=space,
        corpus=corpus,
        suite=suite,
        distill_config=cfg.distill,
        rho=cfg.proxy.corpus_fraction,
        seed=derive_seed(cfg.seed, "evaluator"),
        finetune_steps=cfg.proxy.finetune_steps,
        finetune_batch_size=cfg.proxy.finetune_batch_size,
        finetune_learning_rate=cfg.proxy.finetune_learning_rate,
    )
    evaluator.losses_dir = out_dir / "losses"
    return evaluator


def _write_search_outputs(
    out_dir: Path, result: SearchResult, cache: dict, cfg: RunConfig
) -> None:
    space = build_space(cfg.arch)
    write_generation_stats(out_dir / "generation_stats.csv", result.generations, space)
    write_per_gene_table(out_dir / "per_gene_fitness.csv", cache, space, TASK_NAMES)
    write_best_gene(out_dir / "best_gene.txt", result.best.gene, result.best.fitness, space)
    report = {
        "best_gene": format_gene(result.best.gene, space.bits_per_position),
        "best_mapping": format_mapping(decode(result.best.gene, space)),
        "best_fitness": result.best.fitness,
        "per_task": result.best.eval_metadata,
        "generations": len(result.generations),
        "unique_genes_evaluated": len(cache),
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------
# subcommands

def cmd_search(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    try:
        cfg = load_run_config(config_path)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    out_dir = Path(args.output) if args.output else Path(cfg.output_dir)
    _prepare_run_dir(config_path, out_dir)

    corpus = generate_corpus(cfg.corpus)
    teacher = _teacher_for_run(cfg, out_dir, corpus)
    evaluator = _build_evaluator(cfg, teacher, corpus, out_dir)

    cache_file = _cache_file(cfg, config_path, out_dir)
    cache = _load_cache(cache_file)
    space = build_space(cfg.arch)
    try:
        result = run_search(
            space,
            cfg.ga,
            evaluator,
            checkpoint_path=out_dir / "checkpoint.json",
            resume=args.resume,
            jobs=args.jobs,
            cache=cache,
        )
    except SearchAborted as exc:
        print(f"search aborted: {exc}", file=sys.stderr)
        print(f"resume with: elm search --config {config_path} --resume", file=sys.stderr)
        return 1

    # run_search mutated a copy; recover the authoritative cache from checkpoint
    from .evolution import load_checkpoint
    payload = load_checkpoint(out_dir / "checkpoint.json")
    merged = {
        bits: EvalOutcome(v["fitness"], dict(v["per_task"]), v.get("error"))
        for bits, v in payload["cache"].items()
    }
    _save_cache(cache_file, merged)
    _write_search_outputs(out_dir, result, merged, cfg)

    for gen in result.generations:
        print(
            f"gen {gen.index}: max={gen.stats['max']:.6g} min={gen.stats['min']:.6g} "
            f"avg={gen.stats['avg']:.6g} std={gen.stats['std']:.6g} "
            f"best={format_gene(gen.best_gene, space.bits_per_position)}"
        )
    print(f"best mapping: {format_mapping(decode(result.best.gene, space))} "
          f"fitness={result.best.fitness:.6g}")
    if evaluator.failures:
        print(f"{len(evaluator.failures)} evaluation(s) hard-failed", file=sys.stderr)
        return 1
    return 0


def cmd_enumerate(args: argparse.Namespace) -> int:
    try:
        arch = ArchPair(teacher_layers=args.teacher_layers, student_layers=args.student_layers)
        space = build_space(arch)
    except SpaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.list:
        count = 0
        for mapping in enumerate_space(space, cap=args.cap):
            print(format_mapping(mapping))
            count += 1
    else:
        count = count_space_direct(arch, cap=args.cap)
        print(count)
    return 0


def cmd_distill(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    try:
        cfg = load_run_config(config_path)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    out_dir = Path(args.output) if args.output else Path(cfg.output_dir)
    _prepare_run_dir(config_path, out_dir)
    space = build_space(cfg.arch)

    corpus = generate_corpus(cfg.corpus)
    teacher = _teacher_for_run(cfg, out_dir, corpus)

    if args.mapping:
        try:
            mapping = parse_mapping(args.mapping)
        except InvalidMappingError as exc:
            print(f"invalid mapping: {exc}", file=sys.stderr)
            return 2
        problems = space.validate_mapping(mapping)
        if problems:
            for problem in problems:
                print(f"invalid mapping: {problem}", file=sys.stderr)
            return 2
    else:
        strategy = args.heuristic.replace("-", "_")
        scores = None
        if strategy == "contribution":
            sample = subsample(corpus, cfg.proxy.corpus_fraction,
                               derive_seed(cfg.seed, "contribution"))
            scores = layer_contribution(teacher, sample.sequences)
        mapping = heuristic_mapping(strategy, cfg.arch, scores)
        problems = space.validate_mapping(mapping)
        if problems:
            print(
                f"note: heuristic mapping {format_mapping(mapping)} lies outside "
                "the search space: " + "; ".join(problems),
                file=sys.stderr,
            )

    try:
        result = distill(teacher, cfg.student, mapping, corpus, cfg.distill)
        score = finetune_and_score(
            result.student,
            build_tasks(
                corpus,
                train_size=cfg.proxy.task_train_size,
                dev_size=cfg.proxy.task_dev_size,
                seed=derive_seed(cfg.seed, "tasks"),
            ),
            seed=derive_seed(cfg.seed, "distill-score"),
            steps=cfg.proxy.finetune_steps,
            batch_size=cfg.proxy.finetune_batch_size,
            learning_rate=cfg.proxy.finetune_learning_rate,
        )
    except DivergenceError as exc:
        print(f"distillation failed: {exc}", file=sys.stderr)
        return 1

    tag = format_mapping(mapping).replace(",", "_")
    save_snapshot(result.student, out_dir / f"student_{tag}.snap")
    write_manifest(
        out_dir / f"student_{tag}.manifest.json",
        mapping, cfg.distill, result.losses,
        per_task=score.per_task,
        extra={"fitness": score.fitness},
    )
    write_loss_curve(out_dir / f"student_{tag}.losses.csv", result.losses)
    print(f"mapping {format_mapping(mapping)}: fitness={score.fitness:.6g} "
          + " ".join(f"{k}={v:.6g}" for k, v in sorted(score.per_task.items())))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    checkpoint = run_dir / "checkpoint.json"
    if not checkpoint.exists():
        print(f"no checkpoint.json in {run_dir}", file=sys.stderr)
        return 2
    from .evolution import Generation, ScoredGene, load_checkpoint
    from .mapping_space import Gene

    payload = load_checkpoint(checkpoint)
    arch = ArchPair(
        teacher_layers=payload["arch"]["teacher_layers"],
        student_layers=payload["arch"]["student_layers"],
    )
    space = build_space(arch)
    history = []
    for entry in payload["history"]:
        members = [
            ScoredGene(Gene(m["bits"]), m["fitness"], dict(m["per_task"]))
            for m in entry["members"]
        ]
        history.append(Generation.from_members(entry["index"], members))
    cache = {
        bits: EvalOutcome(v["fitness"], dict(v["per_task"]), v.get("error"))
        for bits, v in payload["cache"].items()
    }

    report_dir = Path(args.output) if args.output else run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    write_generation_stats(report_dir / "generation_stats.csv", history, space)
    write_per_gene_table(report_dir / "per_gene_fitness.csv", cache, space, TASK_NAMES)
    print(f"wrote {report_dir / 'generation_stats.csv'} ({len(history)} generations)")
    print(f"wrote {report_dir / 'per_gene_fitness.csv'} ({len(cache)} unique genes)")

    losses_dir = run_dir / "losses"
    if losses_dir.is_dir():
        curves = sorted(losses_dir.glob("*.csv"))
        print(f"loss curves: {len(curves)} file(s) under {losses_dir}")

    proxy_table = run_dir / "fitness_proxy.csv"
    full_table = run_dir / "fitness_full.csv"
    if proxy_table.exists() and full_table.exists():
        coeff = write_rank_table(
            report_dir / "rank_preservation.csv",
            read_fitness_table(proxy_table),
            read_fitness_table(full_table),
        )
        print(f"wrote {report_dir / 'rank_preservation.csv'} (spearman={coeff:.6g})")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    """Oracle suite: exact counts, known decodings, codec round trip, selection law."""
    from .evolution import selection_probabilities
    from .mapping_space import encode, is_valid

    failures = 0

    def check(label: str, ok: bool) -> None:
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'} {label}")
        if not ok:
            failures += 1

    table1 = {(4, 12): 1048, (6, 12): 9375, (4, 24): 13892, (6, 24): 380321}
    for (m, n), expected in table1.items():
        arch = ArchPair(teacher_layers=n, student_layers=m)
        direct = count_space_direct(arch)
        via_codec = sum(1 for _ in enumerate_space(build_space(arch)))
        check(f"space count (M={m}, N={n}) = {expected}",
              direct == expected and via_codec == expected)

    decodings = [
        ("000-000-010-101", (4, 12), "0,0,5,10"),
        ("000-100-000-000-000-101", (6, 12), "0,5,0,0,0,10"),
        ("000-000-011-101", (4, 12), "0,0,6,10"),
        ("000-000-100-101", (4, 12), "0,0,7,10"),
        ("000-000-011-000-000-101", (6, 12), "0,0,5,0,0,10"),
    ]
    for text, (m, n), expected in decodings:
        space = build_space(ArchPair(teacher_layers=n, student_layers=m))
        got = format_mapping(decode(parse_gene(text), space))
        check(f"decode {text} -> {expected}", got == expected)

    space = build_space(ArchPair(teacher_layers=12, student_layers=4))
    ok = True
    for mapping in enumerate_space(space):
        gene = encode(mapping, space)
        if decode(gene, space) != mapping or not is_valid(gene, space):
            ok = False
            break
    check("codec round trip over all 1048 mappings of (4,12)", ok)

    rng = np.random.default_rng(0)
    probs = selection_probabilities(np.array([0.8, 0.6, 0.2]))
    draws = rng.choice(3, size=100_000, p=probs)
    freq = np.bincount(draws, minlength=3) / len(draws)
    check(
        "selection law on (0.8, 0.6, 0.2) ~ (0.6, 0.4, 0.0)",
        abs(freq[0] - 0.6) < 0.01 and abs(freq[1] - 0.4) < 0.01 and freq[2] == 0.0,
    )

    return 1 if failures else 0


# ----------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elm",
        description="Evolutionary layer-mapping search for transformer distillation",
    )
    parser.add_argument("--version", action="version", version=f"elmsearch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the end-to-end layer-mapping search")
    p.add_argument("--config", required=True, help="path to the INI run config")
    p.add_argument("--output", help="override the output directory from the config")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    p.add_argument("--jobs", type=int, default=1,
                   help="concurrent gene evaluations (results identical for any value)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("enumerate", help="count or list all valid layer mappings")
    p.add_argument("--teacher-layers", type=int, required=True)
    p.add_argument("--student-layers", type=int, required=True)
    p.add_argument("--list", action="store_true", help="print every mapping")
    p.add_argument("--cap", type=int, default=10**7)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("distill", help="one distillation run for a fixed mapping")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--mapping", help="comma-separated mapping, 0 for None, e.g. 0,0,5,10")
    group.add_argument("--heuristic", choices=["uniform", "last-layer", "contribution"])
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("report", help="emit CSV summaries for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--output", help="directory for the emitted tables")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="run the exact-value oracle suite")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
