"""Layer-adaptive regression heads over a miniature decoder backbone.

The heavy lifting lives in the compiled ``_alope`` module; this package only
re-exports its public surface.
"""

from ._alope import (  # noqa: F401
    EmbeddingDump,
    Optimizer,
    PromptTemplate,
    QESample,
    StrategyKind,
    Tokenizer,
    TrainConfig,
    Transformer,
    TransformerConfig,
    __version__,
    compare_predictions,
    gen_planted_dump,
    gen_synthetic,
    layer_sweep,
    load_tsv,
    pearson,
    read_dump,
    spearman,
    train_on_dump,
    williams_test,
    write_dump,
    write_tsv,
)

__all__ = [
    "EmbeddingDump",
    "Optimizer",
    "PromptTemplate",
    "QESample",
    "StrategyKind",
    "Tokenizer",
    "TrainConfig",
    "Transformer",
    "TransformerConfig",
    "__version__",
    "compare_predictions",
    "gen_planted_dump",
    "gen_synthetic",
    "layer_sweep",
    "load_tsv",
    "pearson",
    "read_dump",
    "spearman",
    "train_on_dump",
    "williams_test",
    "write_dump",
    "write_tsv",
]
