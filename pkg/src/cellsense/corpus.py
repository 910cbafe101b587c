"""Expression data ingestion, gene vocabulary, cell sentences, and splits.

A cell sentence lists a cell's gene names in descending order of expression,
dropping zero counts. Ranking is invariant under any strictly increasing
transform of the counts, so counts are stored exactly as given and never
normalized. Ties are broken by ascending vocabulary index so that sentence
construction is deterministic.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateCellId,
    InvalidFraction,
    MalformedRecord,
    NegativeCount,
    SingletonLabel,
    UnknownGene,
)

IDENTITY_VARIANT = "identity"


@dataclass(frozen=True)
class GeneVocabulary:
    """Ordered, unique gene names with O(1) name -> index lookup."""

    genes: tuple[str, ...]
    index: dict[str, int] = field(compare=False, default_factory=dict)

    def __post_init__(self):
        if not self.genes:
            raise ValueError("vocabulary must be non-empty")
        idx = {name: i for i, name in enumerate(self.genes)}
        if len(idx) != len(self.genes):
            seen: set[str] = set()
            dup = next(g for g in self.genes if g in seen or seen.add(g))
            raise ValueError(f"duplicate gene name {dup!r} in vocabulary")
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return len(self.genes)

    @classmethod
    def from_names(cls, names) -> "GeneVocabulary":
        return cls(genes=tuple(names))


@dataclass(frozen=True)
class CellRecord:
    """One cell: sparse counts keyed by vocabulary index, plus a label."""

    cell_id: str
    label: str
    counts: dict[int, float]

    def validate(self, vocab: GeneVocabulary) -> None:
        for gi, value in self.counts.items():
            if not 0 <= gi < len(vocab):
                raise ValueError(f"cell {self.cell_id!r}: gene index {gi} out of range")
            if not np.isfinite(value) or value < 0:
                raise ValueError(
                    f"cell {self.cell_id!r}: invalid count {value} for gene index {gi}"
                )


@dataclass(frozen=True)
class CellSentence:
    """Ordered gene-name tokens for one cell, tagged with its variant lineage."""

    cell_id: str
    genes: tuple[str, ...]
    variant: str = IDENTITY_VARIANT

    @property
    def is_empty(self) -> bool:
        return len(self.genes) == 0


@dataclass
class Dataset:
    vocabulary: GeneVocabulary
    cells: list[CellRecord]
    split: dict[str, str] | None = None  # cell_id -> "train" | "test"

    def __post_init__(self):
        ids = [c.cell_id for c in self.cells]
        if len(set(ids)) != len(ids):
            seen: set[str] = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DuplicateCellId(dup)
        for c in self.cells:
            c.validate(self.vocabulary)
        if self.split is not None:
            missing = set(ids) - set(self.split)
            if missing:
                raise ValueError(f"split does not cover cells: {sorted(missing)[:5]}")

    @property
    def label_set(self) -> set[str]:
        return {c.label for c in self.cells}

    def labels_by_id(self) -> dict[str, str]:
        return {c.cell_id: c.label for c in self.cells}

    def cells_in(self, part: str) -> list[CellRecord]:
        if self.split is None:
            raise ValueError("dataset has no split")
        return [c for c in self.cells if self.split[c.cell_id] == part]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.vocabulary.genes == other.vocabulary.genes
            and self.cells == other.cells
            and self.split == other.split
        )


def _parse_count(raw: str, line: int, gene: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise MalformedRecord(line, f"count {raw!r} for gene {gene!r} is not a number")
    if not np.isfinite(value):
        raise MalformedRecord(line, f"count for gene {gene!r} is not finite")
    if value < 0:
        raise NegativeCount(line, gene, value)
    return value


def _load_labels_csv(path: Path) -> dict[str, str]:
    labels: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["cell_id", "label"]:
            raise MalformedRecord(1, "labels file must start with header 'cell_id,label'")
        for lineno, row in enumerate(reader, start=2):
            if len(row) < 2:
                raise MalformedRecord(lineno, "labels row needs cell_id and label")
            if row[0] in labels:
                raise DuplicateCellId(row[0], lineno)
            labels[row[0]] = row[1]
    return labels


def _load_dense_csv(path: Path, labels_path: Path | None) -> Dataset:
    labels = _load_labels_csv(labels_path) if labels_path else {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "cell_id" or len(header) < 2:
            raise MalformedRecord(1, "dense CSV must start with header 'cell_id,<genes...>'")
        vocab = GeneVocabulary.from_names(h.strip() for h in header[1:])
        cells: list[CellRecord] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(vocab) + 1:
                raise MalformedRecord(
                    lineno, f"expected {len(vocab) + 1} columns, got {len(row)}"
                )
            cell_id = row[0]
            if cell_id in seen:
                raise DuplicateCellId(cell_id, lineno)
            seen.add(cell_id)
            counts: dict[int, float] = {}
            for gi, raw in enumerate(row[1:]):
                value = _parse_count(raw.strip(), lineno, vocab.genes[gi])
                if value != 0.0:
                    counts[gi] = value
            cells.append(CellRecord(cell_id, labels.get(cell_id, ""), counts))
    return Dataset(vocabulary=vocab, cells=cells)


def _load_sparse_jsonl(path: Path, vocab_path: Path | None) -> Dataset:
    explicit_vocab: GeneVocabulary | None = None
    if vocab_path is not None:
        with open(vocab_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict) or "genes" not in doc:
            raise MalformedRecord(1, "vocabulary file must be an object with a 'genes' list")
        explicit_vocab = GeneVocabulary.from_names(doc["genes"])

    raw_cells: list[tuple[int, str, str, dict[str, float]]] = []
    seen: set[str] = set()
    gene_names: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON: {exc.msg}")
            if not isinstance(obj, dict) or "cell_id" not in obj or "counts" not in obj:
                raise MalformedRecord(lineno, "record needs 'cell_id' and 'counts'")
            cell_id = str(obj["cell_id"])
            if cell_id in seen:
                raise DuplicateCellId(cell_id, lineno)
            seen.add(cell_id)
            if not isinstance(obj["counts"], dict):
                raise MalformedRecord(lineno, "'counts' must be an object")
            counts: dict[str, float] = {}
            for gene, raw in obj["counts"].items():
                if not isinstance(raw, (int, float)) or isinstance(raw, bool):
                    raise MalformedRecord(lineno, f"count for gene {gene!r} is not a number")
                value = _parse_count(str(raw), lineno, gene)
                if explicit_vocab is not None and gene not in explicit_vocab.index:
                    raise UnknownGene(gene, lineno)
                if value != 0.0:
                    counts[gene] = value
                gene_names.add(gene)
            raw_cells.append((lineno, cell_id, str(obj.get("label", "")), counts))

    vocab = explicit_vocab or GeneVocabulary.from_names(sorted(gene_names))
    cells = [
        CellRecord(cid, label, {vocab.index[g]: v for g, v in counts.items()})
        for _, cid, label, counts in raw_cells
    ]
    return Dataset(vocabulary=vocab, cells=cells)


def load_dataset(
    path: str | Path,
    format: str,
    labels_path: str | Path | None = None,
    vocab_path: str | Path | None = None,
) -> Dataset:
    """Load a dataset from disk.

    ``format`` is ``dense-csv`` (header ``cell_id,<gene1>,...``, optional
    companion labels CSV) or ``sparse-jsonl`` (one
    ``{"cell_id":…,"label":…,"counts":{gene: number}}`` object per line; the
    vocabulary is the sorted union of gene keys unless ``vocab_path`` names a
    ``{"genes": [...]}`` file).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "dense-csv":
        return _load_dense_csv(path, Path(labels_path) if labels_path else None)
    if format == "sparse-jsonl":
        return _load_sparse_jsonl(path, Path(vocab_path) if vocab_path else None)
    raise ValueError(f"unknown dataset format {format!r}")


def save_dataset(dataset: Dataset, path: str | Path, vocab_path: str | Path | None = None) -> None:
    """Write a dataset as sparse JSONL (plus an optional vocabulary file).

    Counts serialize at full round-trip precision, so load(save(d)) == d.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for cell in dataset.cells:
            obj = {
                "cell_id": cell.cell_id,
                "label": cell.label,
                "counts": {dataset.vocabulary.genes[gi]: v for gi, v in cell.counts.items()},
            }
            fh.write(json.dumps(obj) + "\n")
    if vocab_path is not None:
        with open(vocab_path, "w", encoding="utf-8") as fh:
            json.dump({"genes": list(dataset.vocabulary.genes)}, fh)


def build_sentence(cell: CellRecord, vocab: GeneVocabulary) -> CellSentence:
    """Rank a cell's genes by count, descending, dropping zeros.

    Equal counts are ordered by ascending vocabulary index. All-zero cells
    yield an empty sentence and a warning rather than an error, keeping cell
    indices aligned with any external embedding store.
    """
    cell.validate(vocab)
    ranked = sorted(
        ((gi, v) for gi, v in cell.counts.items() if v != 0.0),
        key=lambda item: (-item[1], item[0]),
    )
    if not ranked:
        warnings.warn(f"cell {cell.cell_id!r} has all-zero counts; sentence is empty")
    return CellSentence(
        cell_id=cell.cell_id,
        genes=tuple(vocab.genes[gi] for gi, _ in ranked),
    )


def build_sentences(dataset: Dataset) -> dict[str, CellSentence]:
    """Identity-variant sentences for every cell, keyed by cell_id."""
    return {c.cell_id: build_sentence(c, dataset.vocabulary) for c in dataset.cells}


def stratified_split(dataset: Dataset, test_fraction: float, seed: int) -> Dataset:
    """Return a copy of the dataset with a per-label train/test assignment.

    Per-label test counts are round(test_fraction * n), clamped so each label
    keeps at least one train cell; the assignment is deterministic given the
    seed (labels processed in sorted order, cells shuffled with one PCG64
    stream).
    """
    if not 0 < test_fraction < 1:
        raise InvalidFraction(test_fraction)
    by_label: dict[str, list[str]] = {}
    for c in dataset.cells:
        by_label.setdefault(c.label, []).append(c.cell_id)
    for label, ids in by_label.items():
        if len(ids) < 2:
            raise SingletonLabel(label)

    rng = np.random.default_rng(seed)
    split: dict[str, str] = {}
    for label in sorted(by_label):
        ids = by_label[label]
        order = rng.permutation(len(ids))
        n_test = int(np.floor(test_fraction * len(ids) + 0.5))
        n_test = min(max(n_test, 0), len(ids) - 1)
        test_ids = {ids[i] for i in order[:n_test]}
        for cid in ids:
            split[cid] = "test" if cid in test_ids else "train"
    return Dataset(vocabulary=dataset.vocabulary, cells=list(dataset.cells), split=split)
