"""Perturbation-based attribution and marker-gene analysis.

The local surrogate method masks in-context genes at random, embeds each
masked sentence, scores the classifier's probability of the target class,
and fits a weighted ridge regression of that probability on the mask bits.
Coefficients become per-gene scores. Only in-context genes enter the
feature space: genes past the context boundary cannot change the encoding,
so their attribution is identically zero by construction.

Gradient-based attributions cannot be computed across the provider
boundary, but externally computed score files import into the same
aggregation and marker-overlap pipeline.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ablate import in_context_count
from .corpus import CellSentence
from .embed import cosine
from .errors import (
    MixedMethods,
    NonFiniteScore,
    SingularSurrogate,
    UnknownCellId,
)


@dataclass
class MarkerDb:
    """Reference lists of (cell_type, gene, rank); rank 1 is the top marker."""

    records: list[tuple[str, str, int]]
    _by_type: dict[str, list[tuple[int, str]]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        by_type: dict[str, list[tuple[int, str]]] = {}
        for cell_type, gene, rank in self.records:
            by_type.setdefault(cell_type, []).append((rank, gene))
        for cell_type, pairs in by_type.items():
            ranks = [r for r, _ in pairs]
            genes = [g for _, g in pairs]
            if len(set(ranks)) != len(ranks):
                raise ValueError(f"cell type {cell_type!r}: duplicate marker ranks")
            if len(set(genes)) != len(genes):
                raise ValueError(f"cell type {cell_type!r}: duplicate marker genes")
            pairs.sort()
        self._by_type = by_type

    @classmethod
    def load(cls, path: str | Path) -> "MarkerDb":
        """Read a TSV of cell_type<TAB>gene<TAB>rank rows."""
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path} line {lineno}: expected 3 tab-separated fields")
                try:
                    rank = int(parts[2])
                except ValueError:
                    raise ValueError(f"{path} line {lineno}: rank {parts[2]!r} is not an integer")
                records.append((parts[0], parts[1], rank))
        return cls(records)

    @property
    def cell_types(self) -> list[str]:
        return sorted(self._by_type)

    def __contains__(self, cell_type: str) -> bool:
        return cell_type in self._by_type

    def markers_for(self, cell_type: str) -> list[str]:
        """Genes of a type in rank order (rank 1 first)."""
        return [g for _, g in self._by_type.get(cell_type, [])]


@dataclass
class AttributionRecord:
    cell_id: str
    target: str
    method: str
    scores: dict[str, float]


@dataclass
class LimeConfig:
    n_samples: int = 1000
    drop_probability: float = 0.5
    kernel_width: float | None = None  # default 0.75 * sqrt(F)
    l2_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 10:
            raise ValueError("n_samples must be >= 10")
        if not 0 < self.drop_probability < 1:
            raise ValueError("drop_probability must lie in (0, 1)")
        if self.l2_lambda <= 0:
            raise ValueError("l2_lambda must be positive")


def lime_attribution(
    cell: CellSentence,
    target_class: str,
    classifier,
    provider,
    config: LimeConfig,
) -> AttributionRecord:
    """Local surrogate attribution for one cell.

    ``classifier`` exposes predict_proba(vectors) and label_order;
    ``provider`` embeds the masked sentences. Sample weights follow
    exp(-d^2 / width^2) where d is the cosine distance between a mask and
    the all-ones mask (an all-dropped mask gets distance 1).
    """
    budget = provider.config.budget
    F = min(in_context_count(cell, budget), len(cell.genes))
    if F < 2:
        raise ValueError(f"cell {cell.cell_id!r} has {F} in-context genes, need >= 2")
    context_genes = list(cell.genes[:F])

    rng = np.random.default_rng(config.seed)
    masks = (rng.random((config.n_samples, F)) >= config.drop_probability).astype(np.float64)

    sentences = [
        CellSentence(
            cell_id=cell.cell_id,
            genes=tuple(g for g, bit in zip(context_genes, mask) if bit),
            variant=f"lime-s{config.seed}-m{i}",
        )
        for i, mask in enumerate(masks)
    ]
    vectors = provider.embed_batch(sentences)
    col = classifier.label_order.index(target_class)
    y = np.asarray(classifier.predict_proba(vectors), dtype=np.float64)[:, col]

    kept = masks.sum(axis=1)
    cos_to_full = np.sqrt(kept / F)  # cosine(mask, all-ones) for binary masks
    distance = 1.0 - cos_to_full
    width = config.kernel_width if config.kernel_width is not None else 0.75 * math.sqrt(F)
    weights = np.exp(-(distance**2) / width**2)

    # weighted ridge with an unpenalized intercept column
    X = np.concatenate([np.ones((config.n_samples, 1)), masks], axis=1)
    Xw = X * weights[:, None]
    A = X.T @ Xw
    penalty = np.eye(F + 1) * config.l2_lambda
    penalty[0, 0] = 0.0
    A += penalty
    b = Xw.T @ y
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise SingularSurrogate() from None
    return AttributionRecord(
        cell_id=cell.cell_id,
        target=target_class,
        method="lime",
        scores={gene: float(beta[i + 1]) for i, gene in enumerate(context_genes)},
    )


def aggregate_attributions(records, cap: int = 10) -> dict[str, list[str]]:
    """Top-10 positive genes per target class, summing scores across cells.

    At most ``cap`` cells per class contribute (first by cell_id, with a
    warning when more are supplied); genes whose summed score is not
    strictly positive are dropped.
    """
    records = list(records)
    methods = {r.method for r in records}
    if len(methods) > 1:
        raise MixedMethods(methods)
    by_type: dict[str, list[AttributionRecord]] = {}
    for r in records:
        by_type.setdefault(r.target, []).append(r)

    out: dict[str, list[str]] = {}
    for cell_type in sorted(by_type):
        group = sorted(by_type[cell_type], key=lambda r: r.cell_id)
        if len(group) > cap:
            warnings.warn(
                f"class {cell_type!r}: {len(group)} cells supplied, using first {cap} by cell_id"
            )
            group = group[:cap]
        sums: dict[str, float] = {}
        for r in group:
            for gene, score in r.scores.items():
                sums[gene] = sums.get(gene, 0.0) + score
        positive = [(gene, s) for gene, s in sums.items() if s > 0]
        positive.sort(key=lambda kv: (-kv[1], kv[0]))
        out[cell_type] = [gene for gene, _ in positive[:10]]
    return out


@dataclass
class TypeOverlap:
    markers_by_method: dict[str, list[str]]
    consensus: list[str]  # markers highlighted by every method


@dataclass
class OverlapReport:
    types: dict[str, TypeOverlap]
    uncovered: list[str]  # cell types absent from the marker database


def marker_overlap(top_genes: dict[str, dict[str, list[str]]], markerdb: MarkerDb) -> OverlapReport:
    """Which known markers appear in each method's top-gene lists.

    ``top_genes`` maps method id -> cell type -> ranked gene list. For each
    covered type, per-method marker hits keep the top-list order; the
    consensus set is those markers every method highlighted.
    """
    all_types: set[str] = set()
    for per_type in top_genes.values():
        all_types.update(per_type)

    types: dict[str, TypeOverlap] = {}
    uncovered: list[str] = []
    for cell_type in sorted(all_types):
        if cell_type not in markerdb:
            uncovered.append(cell_type)
            continue
        markers = set(markerdb.markers_for(cell_type))
        by_method: dict[str, list[str]] = {}
        for method in sorted(top_genes):
            genes = top_genes[method].get(cell_type, [])
            by_method[method] = [g for g in genes if g in markers]
        hit_sets = [set(v) for v in by_method.values()]
        consensus = set.intersection(*hit_sets) if hit_sets else set()
        types[cell_type] = TypeOverlap(
            markers_by_method=by_method, consensus=sorted(consensus)
        )
    return OverlapReport(types=types, uncovered=uncovered)


@dataclass
class MarkerSimilarity:
    per_type: dict[str, tuple[float, float]]  # type -> (intra, inter)
    intra_mean: float
    inter_mean: float


def marker_similarity_table(markerdb: MarkerDb, types, provider) -> MarkerSimilarity:
    """Mean cosine similarity of each type's top marker to its own remaining
    markers (intra) vs other types' markers (inter), averaged over types.

    Gene names are embedded as bare strings with no prompt prefix. Types
    with fewer than 2 markers are excluded with a warning.
    """
    eligible = []
    for cell_type in types:
        markers = markerdb.markers_for(cell_type)
        if len(markers) < 2:
            warnings.warn(f"cell type {cell_type!r} has {len(markers)} markers, needs 2; excluded")
            continue
        eligible.append(cell_type)
    if len(eligible) < 2:
        raise ValueError("need at least 2 cell types with 2+ markers")

    names = sorted({g for t in eligible for g in markerdb.markers_for(t)})
    vectors = provider.embed_texts(names)
    embed = {name: vectors[i] for i, name in enumerate(names)}

    per_type: dict[str, tuple[float, float]] = {}
    for cell_type in eligible:
        markers = markerdb.markers_for(cell_type)
        top = markers[0]
        intra = [cosine(embed[top], embed[g]) for g in markers[1:]]
        inter = [
            cosine(embed[top], embed[g])
            for other in eligible
            if other != cell_type
            for g in markerdb.markers_for(other)
        ]
        per_type[cell_type] = (float(np.mean(intra)), float(np.mean(inter)))

    intra_mean = float(np.mean([v[0] for v in per_type.values()]))
    inter_mean = float(np.mean([v[1] for v in per_type.values()]))
    return MarkerSimilarity(per_type=per_type, intra_mean=intra_mean, inter_mean=inter_mean)


def import_external_attributions(
    path: str | Path, known_cells: set[str] | None = None
) -> list[AttributionRecord]:
    """Load attribution JSONL records produced outside the toolkit.

    Each line carries {"cell_id", "class", "method", "scores": {gene: num}}.
    All records must share one method id; scores must be finite; cell ids
    must be known when a reference set is given.
    """
    records: list[AttributionRecord] = []
    methods: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path} line {lineno}: invalid JSON: {exc.msg}")
            for key in ("cell_id", "class", "method", "scores"):
                if key not in obj:
                    raise ValueError(f"{path} line {lineno}: missing field {key!r}")
            if not isinstance(obj["scores"], dict):
                raise ValueError(f"{path} line {lineno}: 'scores' must be an object")
            cell_id = str(obj["cell_id"])
            if known_cells is not None and cell_id not in known_cells:
                raise UnknownCellId(cell_id, lineno)
            scores: dict[str, float] = {}
            for gene, value in obj["scores"].items():
                if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                    raise NonFiniteScore(lineno, gene)
                scores[gene] = float(value)
            methods.add(str(obj["method"]))
            if len(methods) > 1:
                raise MixedMethods(methods)
            records.append(
                AttributionRecord(
                    cell_id=cell_id, target=str(obj["class"]), method=str(obj["method"]),
                    scores=scores,
                )
            )
    return records
