import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cellsense.corpus import CellRecord, Dataset, GeneVocabulary


@pytest.fixture
def tiny_vocab():
    return GeneVocabulary.from_names(["GCG", "TTR", "INS", "SST", "PPY"])


@pytest.fixture
def tiny_dataset(tiny_vocab):
    cells = [
        CellRecord("c1", "Alpha", {0: 5.0, 1: 2.0}),
        CellRecord("c2", "Beta", {2: 3.5, 1: 1.0}),
        CellRecord("c3", "Alpha", {0: 4.0, 3: 1.0}),
        CellRecord("c4", "Beta", {2: 6.0, 4: 2.0}),
    ]
    return Dataset(vocabulary=tiny_vocab, cells=cells)
