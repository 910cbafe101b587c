"""The LLM reranking protocol with stub providers.

For each test cell the 10-NN classifier proposes its three most represented
neighbor labels; a chat provider then picks one, falling back to the first
candidate when uncertain. Two stubs bracket what any real model can do:
the identity stub (always the first candidate) reproduces top-1 accuracy
exactly, and the oracle stub (the truth whenever it is among the
candidates) reaches top-3 containment exactly.
"""

import numpy as np

from cellsense.corpus import build_sentences, stratified_split
from cellsense.embed import MockEmbedder, ProviderConfig
from cellsense.evalcore import knn_classify_batch
from cellsense.rerank import (
    build_rerank_prompt,
    identity_stub,
    oracle_stub,
    run_rerank_experiment,
)
from cellsense.synthetic import MarkerCorpusParams, default_budget, marker_corpus

SEED = 3
params = MarkerCorpusParams(cells_per_type=40, noise_pool=200, noise_per_cell=60)
dataset = stratified_split(marker_corpus(SEED, params), test_fraction=0.5, seed=SEED)
sentences = build_sentences(dataset)
labels = dataset.labels_by_id()
train_ids = sorted(c.cell_id for c in dataset.cells_in("train"))
test_ids = sorted(c.cell_id for c in dataset.cells_in("test"))

provider = MockEmbedder(
    ProviderConfig(kind="mock", dim=128, seed=SEED, budget=default_budget())
)
train_vecs = provider.embed_batch([sentences[c] for c in train_ids])
test_vecs = provider.embed_batch([sentences[c] for c in test_ids])
_, tops = knn_classify_batch(test_vecs, train_vecs, [labels[c] for c in train_ids], k=10, m=3)
top3 = dict(zip(test_ids, tops))

example = test_ids[0]
print("example prompt for", example)
print("-" * 60)
print(build_rerank_prompt(sentences[example], top3[example]).text)
print("-" * 60)

identity_result = run_rerank_experiment(
    dataset, sentences, top3, identity_stub(), subset_size=100, runs=3, seed=9
)
oracle_result = run_rerank_experiment(
    dataset, sentences, top3, oracle_stub(labels), subset_size=100, runs=3, seed=9
)
subset = identity_result.subset
top1 = float(np.mean([top3[c][0] == labels[c] for c in subset]))
top3_containment = float(np.mean([labels[c] in top3[c] for c in subset]))

print(f"identity stub accuracy : {identity_result.formatted()}  (top-1 = {top1:.3f})")
print(f"oracle stub accuracy   : {oracle_result.formatted()}  (top-3 ceiling = {top3_containment:.3f})")
print("a real generative model lands between the floor and the ceiling")
