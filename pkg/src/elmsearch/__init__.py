"""Evolutionary layer-mapping search for transformer distillation, desk scale."""

__version__ = "0.1.0"

from .mapping_space import (  # noqa: F401
    ArchPair,
    Gene,
    LayerMapping,
    SearchSpace,
    build_space,
    decode,
    encode,
    enumerate_space,
    heuristic_mapping,
    is_valid,
)
from .evolution import (  # noqa: F401
    EvalOutcome,
    GAConfig,
    Generation,
    ScoredGene,
    SearchResult,
    run_search,
)
from .tinyformer import TinyTransformer, TransformerConfig  # noqa: F401
from .distillation import DistillConfig, distill, pretrain_teacher  # noqa: F401
from .proxy_tasks import (  # noqa: F401
    CorpusSpec,
    ProxyFitnessEvaluator,
    build_tasks,
    generate_corpus,
)
