"""Run configuration: one INI file fully determines a search run.

Unknown sections or keys are hard errors, and every parse problem is
reported at once.  Component seeds are derived from the single root seed
so the file alone reproduces a run bit-exactly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .distillation import DistillConfig
from .evolution import GAConfig, default_population_size
from .mapping_space import ArchPair
from .proxy_tasks import CorpusSpec, derive_seed
from .tinyformer import TransformerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainSettings:
    steps: int
    batch_size: int
    learning_rate: float
    warmup_frac: float


@dataclass(frozen=True)
class ProxySettings:
    corpus_fraction: float
    task_train_size: int
    task_dev_size: int
    finetune_steps: int
    finetune_batch_size: int
    finetune_learning_rate: float


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    arch: ArchPair
    teacher: TransformerConfig
    student: TransformerConfig
    corpus: CorpusSpec
    pretrain: PretrainSettings
    ga: GAConfig
    distill: DistillConfig
    proxy: ProxySettings


_SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
        "output_dir": (str, "runs/latest"),
    },
    "arch": {
        "teacher_layers": (int, 8),
        "student_layers": (int, 4),
    },
    "teacher": {
        "hidden_size": (int, 32),
        "ffn_size": (int, 128),
        "heads": (int, 2),
        "vocab_size": (int, 64),
        "max_seq_len": (int, None),  # default 2*seq_len + 2
    },
    "student": {
        "hidden_size": (int, 16),
        "ffn_size": (int, 64),
        "heads": (int, 2),
    },
    "corpus": {
        "sequences": (int, 2000),
        "seq_len": (int, 16),
        "motif_len": (int, 4),
        "num_motifs": (int, 4),
        "markov_prob": (float, 0.6),
    },
    "pretrain": {
        "steps": (int, 2000),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-3),
        "warmup_frac": (float, 0.1),
    },
    "ga": {
        "generations": (int, 5),
        "population_size": (int, None),  # default by student depth: 12 or 20
        "mutation_prob": (float, 0.8),
        "crossover_prob": (float, 0.2),
        "bitflip_rate": (float, 0.05),
        "exchange_rate": (float, 0.2),
        "max_repair_attempts": (int, 32),
    },
    "distill": {
        "steps": (int, 2000),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-3),
        "warmup_frac": (float, 0.1),
    },
    "proxy": {
        "corpus_fraction": (float, 0.1),
        "task_train_size": (int, 240),
        "task_dev_size": (int, 120),
        "finetune_steps": (int, 300),
        "finetune_batch_size": (int, 32),
        "finetune_learning_rate": (float, 1e-3),
    },
}


def _parse_sections(parser: configparser.ConfigParser) -> dict[str, dict]:
    problems: list[str] = []
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                problems.append(f"unknown key [{section}] {key}")
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, (typ, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[section][key] = typ(raw)
                except ValueError:
                    problems.append(
                        f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}"
                    )
            else:
                values[section][key] = default
    if problems:
        raise ConfigError("config errors:\n  " + "\n  ".join(problems))
    return values


def load_run_config(path: str | Path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    v = _parse_sections(parser)

    seed = v["run"]["seed"]
    seq_len = v["corpus"]["seq_len"]
    max_seq_len = v["teacher"]["max_seq_len"]
    if max_seq_len is None:
        max_seq_len = 2 * seq_len + 2

    arch = ArchPair(
        teacher_layers=v["arch"]["teacher_layers"],
        student_layers=v["arch"]["student_layers"],
    )
    teacher = TransformerConfig(
        layers=arch.teacher_layers,
        hidden_size=v["teacher"]["hidden_size"],
        ffn_size=v["teacher"]["ffn_size"],
        heads=v["teacher"]["heads"],
        vocab_size=v["teacher"]["vocab_size"],
        max_seq_len=max_seq_len,
        seed=derive_seed(seed, "teacher-init"),
    )
    student = TransformerConfig(
        layers=arch.student_layers,
        hidden_size=v["student"]["hidden_size"],
        ffn_size=v["student"]["ffn_size"],
        heads=v["student"]["heads"],
        vocab_size=teacher.vocab_size,
        max_seq_len=teacher.max_seq_len,
        seed=derive_seed(seed, "student-template"),
    )
    corpus = CorpusSpec(
        vocab_size=teacher.vocab_size,
        seq_len=seq_len,
        num_sequences=v["corpus"]["sequences"],
        motif_len=v["corpus"]["motif_len"],
        num_motifs=v["corpus"]["num_motifs"],
        markov_prob=v["corpus"]["markov_prob"],
        seed=derive_seed(seed, "corpus"),
    )
    pretrain = PretrainSettings(
        steps=v["pretrain"]["steps"],
        batch_size=v["pretrain"]["batch_size"],
        learning_rate=v["pretrain"]["learning_rate"],
        warmup_frac=v["pretrain"]["warmup_frac"],
    )
    population = v["ga"]["population_size"]
    if population is None:
        population = default_population_size(arch.student_layers)
    ga = GAConfig(
        generations=v["ga"]["generations"],
        population_size=population,
        mutation_prob=v["ga"]["mutation_prob"],
        crossover_prob=v["ga"]["crossover_prob"],
        bitflip_rate=v["ga"]["bitflip_rate"],
        exchange_rate=v["ga"]["exchange_rate"],
        seed=derive_seed(seed, "ga"),
        max_repair_attempts=v["ga"]["max_repair_attempts"],
    )
    distill = DistillConfig(
        steps=v["distill"]["steps"],
        batch_size=v["distill"]["batch_size"],
        learning_rate=v["distill"]["learning_rate"],
        warmup_frac=v["distill"]["warmup_frac"],
        seed=derive_seed(seed, "distill"),
    )
    proxy = ProxySettings(
        corpus_fraction=v["proxy"]["corpus_fraction"],
        task_train_size=v["proxy"]["task_train_size"],
        task_dev_size=v["proxy"]["task_dev_size"],
        finetune_steps=v["proxy"]["finetune_steps"],
        finetune_batch_size=v["proxy"]["finetune_batch_size"],
        finetune_learning_rate=v["proxy"]["finetune_learning_rate"],
    )
    return RunConfig(
        seed=seed,
        output_dir=v["run"]["output_dir"],
        arch=arch,
        teacher=teacher,
        student=student,
        corpus=corpus,
        pretrain=pretrain,
        ga=ga,
        distill=distill,
        proxy=proxy,
    )
