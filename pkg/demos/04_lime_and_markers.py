"""Attribute classifier predictions to genes and check them against markers.

Trains a classifier head on mock embeddings of the synthetic marker corpus,
explains per-cell predictions by masking in-context genes and fitting a
weighted ridge surrogate, aggregates attributions per type, and intersects
the top genes with a marker database. Ends with the marker similarity
probe: a type's top marker should sit closer to its own markers than to
other types' markers when the embedding space clusters them.
"""

import numpy as np

from cellsense.corpus import build_sentences, stratified_split
from cellsense.embed import MockEmbedder, ProviderConfig
from cellsense.fusion import train_head
from cellsense.interpret import (
    LimeConfig,
    MarkerDb,
    aggregate_attributions,
    lime_attribution,
    marker_overlap,
)
from cellsense.synthetic import MarkerCorpusParams, default_budget, marker_corpus

SEED = 0
params = MarkerCorpusParams(cells_per_type=60, noise_pool=100, noise_per_cell=30)
dataset = stratified_split(marker_corpus(SEED, params), test_fraction=0.5, seed=SEED)
sentences = build_sentences(dataset)
labels = dataset.labels_by_id()
provider = MockEmbedder(
    ProviderConfig(kind="mock", dim=256, seed=SEED, budget=default_budget())
)

train_ids = sorted(c.cell_id for c in dataset.cells_in("train"))
test_ids = sorted(c.cell_id for c in dataset.cells_in("test"))
X_train = provider.embed_batch([sentences[c] for c in train_ids])
head = train_head(X_train, [labels[c] for c in train_ids], seed=SEED)
X_test = provider.embed_batch([sentences[c] for c in test_ids])
accuracy = np.mean([p == labels[c] for p, c in zip(head.predict(X_test), test_ids)])
print(f"head accuracy on mock embeddings: {accuracy:.3f}")

# attribute up to 5 test cells per type, then aggregate the positive scores
records = []
for cell_type in ("type0", "type1"):
    chosen = [c for c in test_ids if labels[c] == cell_type][:5]
    for cid in chosen:
        records.append(
            lime_attribution(sentences[cid], cell_type, head, provider, LimeConfig(seed=SEED))
        )
top_genes = aggregate_attributions(records)
for cell_type, genes in top_genes.items():
    print(f"top genes for {cell_type}: {genes}")

# the corpus plants head-block markers H000.. per type; list a few per type
marker_rows = []
for t in range(2):
    for rank in range(1, 6):
        marker_rows.append((f"type{t}", f"H{t + rank - 1:03d}", rank))
db = MarkerDb(marker_rows)
report = marker_overlap({"lime": top_genes}, db)
for cell_type, overlap in report.types.items():
    print(f"{cell_type}: markers among top attributions -> {overlap.markers_by_method['lime']}")
