"""Build cell sentences from expression counts.

A cell sentence lists the cell's gene names in descending expression order,
dropping zero counts. Because only ranks matter, any monotone rescaling of
the counts leaves the sentence unchanged.
"""

import math

from cellsense.corpus import (
    CellRecord,
    Dataset,
    GeneVocabulary,
    build_sentence,
    stratified_split,
)

vocab = GeneVocabulary.from_names(["GCG", "TTR", "INS", "SST", "PPY", "KRT19"])

# one Alpha-like cell: GCG dominant, TTR present, the rest silent
alpha = CellRecord("cell-001", "Alpha", {0: 412.0, 1: 35.0, 2: 0.0})
sentence = build_sentence(alpha, vocab)
print("tokens:", sentence.genes)              # ('GCG', 'TTR'), zeros dropped

# log-transforming the counts does not change the ranking
logged = CellRecord("cell-001", "Alpha", {0: math.log(412.0), 1: math.log(35.0)})
assert build_sentence(logged, vocab).genes == sentence.genes
print("rank order is invariant under monotone transforms")

# equal counts fall back to vocabulary order, keeping output deterministic
tied = CellRecord("cell-002", "Beta", {2: 7.0, 3: 7.0})
print("tie-break by vocabulary index:", build_sentence(tied, vocab).genes)

# tiny corpus with a seeded stratified split
cells = [
    CellRecord(f"a{i}", "Alpha", {0: 100.0 + i, 1: 10.0}) for i in range(10)
] + [
    CellRecord(f"b{i}", "Beta", {2: 100.0 + i, 3: 10.0}) for i in range(10)
]
dataset = stratified_split(Dataset(vocabulary=vocab, cells=cells), test_fraction=0.3, seed=7)
print("test cells:", sorted(c.cell_id for c in dataset.cells_in("test")))
