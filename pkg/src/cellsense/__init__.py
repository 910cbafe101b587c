"""Evaluation toolkit for cell-sentence representations.

Builds gene-rank sentences from expression data, applies name/order/length
ablations, embeds sentences through pluggable providers (mock, HTTP, or
file store), scores zero-shot kNN and k-means performance, trains fusion
classifiers over frozen embeddings, attributes predictions to genes, and
runs LLM reranking protocols.
"""

__version__ = "0.1.0"

from . import ablate, corpus, embed, errors, evalcore, fusion, interpret, rerank, synthetic

__all__ = [
    "__version__",
    "ablate",
    "corpus",
    "embed",
    "errors",
    "evalcore",
    "fusion",
    "interpret",
    "rerank",
    "synthetic",
]
