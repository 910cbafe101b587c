"""Deterministic ablation transforms for cell sentences.

Each transform removes one element of the information a sentence carries:
gene-name identity (corpus-wide hashing or per-instance random tokens),
gene order (full or context-scoped shuffles), or sentence length
(truncation to a fraction of the in-context genes). Stochastic kinds are
seeded per cell so results never depend on corpus iteration order, except
for the per-instance uniqueness redraw, which is resolved in input order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import IDENTITY_VARIANT, CellSentence
from .errors import HashCollision, MissingSeed, StackedAblation

HASH_LEN = 10

IDENTITY = "identity"
GENE_NAME_HASH = "gene_name_hash"
GENE_NAME_PER_INSTANCE = "gene_name_per_instance"
SHUFFLE_ALL = "shuffle_all"
SHUFFLE_IN_CONTEXT = "shuffle_in_context"
SHUFFLE_TOP10_IN_CONTEXT = "shuffle_top10_in_context"
HASH_THEN_SHUFFLE_IN_CONTEXT = "hash_then_shuffle_in_context"
TRUNCATE_FRACTION = "truncate_fraction"

KINDS = (
    IDENTITY,
    GENE_NAME_HASH,
    GENE_NAME_PER_INSTANCE,
    SHUFFLE_ALL,
    SHUFFLE_IN_CONTEXT,
    SHUFFLE_TOP10_IN_CONTEXT,
    HASH_THEN_SHUFFLE_IN_CONTEXT,
    TRUNCATE_FRACTION,
)
_STOCHASTIC = {
    GENE_NAME_PER_INSTANCE,
    SHUFFLE_ALL,
    SHUFFLE_IN_CONTEXT,
    SHUFFLE_TOP10_IN_CONTEXT,
    HASH_THEN_SHUFFLE_IN_CONTEXT,
}
# Kinds whose output depends on the token budget through the context count.
_BUDGETED = {
    SHUFFLE_IN_CONTEXT,
    SHUFFLE_TOP10_IN_CONTEXT,
    HASH_THEN_SHUFFLE_IN_CONTEXT,
    TRUNCATE_FRACTION,
}


@dataclass(frozen=True)
class TokenBudget:
    """Character-based proxy for how many genes fit an encoder's context.

    A gene name of length L is estimated at ceil(L/4) + 1 tokens; the prompt
    prefix reserves ``prefix_tokens``. Providers with a real tokenizer may
    override the resulting count per cell instead of using this estimate.
    """

    max_tokens: int = 512
    prefix_tokens: int = 8

    def __post_init__(self):
        if self.max_tokens <= self.prefix_tokens:
            raise ValueError("max_tokens must exceed prefix_tokens")

    @staticmethod
    def tokens_per_gene(name: str) -> int:
        return math.ceil(len(name) / 4) + 1

    def digest(self) -> str:
        raw = f"{self.max_tokens}:{self.prefix_tokens}".encode()
        return hashlib.sha256(raw).hexdigest()[:8]


@dataclass(frozen=True)
class AblationSpec:
    kind: str
    seed: int | None = None
    budget: TokenBudget = field(default_factory=TokenBudget)
    fraction: float | None = None  # truncate_fraction only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ablation kind {self.kind!r}")
        if self.kind in _STOCHASTIC and self.seed is None:
            raise MissingSeed(self.kind)
        if self.kind == TRUNCATE_FRACTION:
            if self.fraction is None or not 0 < self.fraction <= 1:
                raise ValueError("truncate_fraction needs fraction in (0, 1]")
        elif self.fraction is not None:
            raise ValueError(f"fraction is only valid for {TRUNCATE_FRACTION}")

    def variant_id(self) -> str:
        parts = [self.kind]
        if self.kind == TRUNCATE_FRACTION:
            parts[0] = f"{self.kind}{self.fraction:g}"
        if self.kind in _STOCHASTIC:
            parts.append(f"s{self.seed}")
        if self.kind in _BUDGETED:
            parts.append(f"b{self.budget.digest()}")
        return "-".join(parts)


def hash_gene_name(name: str) -> str:
    """First 10 lowercase hex characters of SHA-256 over the UTF-8 name."""
    if not name:
        raise ValueError("gene name must be non-empty")
    return hashlib.sha256(name.encode("utf-8")).hexdigest()[:HASH_LEN]


def hash_vocabulary(names) -> dict[str, str]:
    """Hash every name, aborting on any truncated-hash collision."""
    mapping: dict[str, str] = {}
    owner: dict[str, str] = {}
    for name in names:
        token = hash_gene_name(name)
        if token in owner and owner[token] != name:
            raise HashCollision(owner[token], name, token)
        owner[token] = name
        mapping[name] = token
    return mapping


def in_context_count(sentence: CellSentence, budget: TokenBudget) -> int:
    """Largest sentence prefix whose estimated token cost fits the budget."""
    remaining = budget.max_tokens - budget.prefix_tokens
    count = 0
    for name in sentence.genes:
        remaining -= budget.tokens_per_gene(name)
        if remaining < 0:
            break
        count += 1
    return count


def _rng(*parts) -> np.random.Generator:
    """Platform-stable generator keyed by the given parts.

    str(part) values are digested with SHA-256 so string parts never go
    through the salted builtin hash.
    """
    material = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _fresh_hex(rng: np.random.Generator) -> str:
    return bytes(rng.integers(0, 256, size=HASH_LEN // 2, dtype=np.uint8)).hex()


def _permuted(tokens: list[str], upto: int, rng: np.random.Generator) -> list[str]:
    head = list(tokens[:upto])
    rng.shuffle(head)
    return head + list(tokens[upto:])


def apply(
    spec: AblationSpec,
    sentence: CellSentence,
    used_tokens: set[str] | None = None,
    context_count: int | None = None,
) -> CellSentence:
    """Apply one ablation to an identity-variant sentence.

    ``used_tokens`` carries the corpus-wide uniqueness set for the
    per-instance kind; pass the same set across all cells of a corpus (or use
    :func:`apply_all`). ``context_count`` overrides the estimated in-context
    gene count, e.g. with a real tokenizer's number.
    """
    if sentence.variant != IDENTITY_VARIANT:
        raise StackedAblation(sentence.variant)
    tokens = list(sentence.genes)
    variant = spec.variant_id()

    if spec.kind == IDENTITY:
        return CellSentence(sentence.cell_id, tuple(tokens), variant)

    if spec.kind == GENE_NAME_HASH:
        mapping = hash_vocabulary(set(tokens))
        return CellSentence(sentence.cell_id, tuple(mapping[t] for t in tokens), variant)

    if spec.kind == GENE_NAME_PER_INSTANCE:
        used = used_tokens if used_tokens is not None else set()
        out = []
        for pos in range(len(tokens)):
            rng = _rng(spec.seed, sentence.cell_id, pos)
            token = _fresh_hex(rng)
            while token in used:
                token = _fresh_hex(rng)
            used.add(token)
            out.append(token)
        return CellSentence(sentence.cell_id, tuple(out), variant)

    if spec.kind == SHUFFLE_ALL:
        rng = _rng(spec.seed, sentence.cell_id)
        return CellSentence(
            sentence.cell_id, tuple(_permuted(tokens, len(tokens), rng)), variant
        )

    c = context_count if context_count is not None else in_context_count(sentence, spec.budget)
    c = min(c, len(tokens))

    if spec.kind == SHUFFLE_IN_CONTEXT:
        rng = _rng(spec.seed, sentence.cell_id)
        return CellSentence(sentence.cell_id, tuple(_permuted(tokens, c, rng)), variant)

    if spec.kind == SHUFFLE_TOP10_IN_CONTEXT:
        rng = _rng(spec.seed, sentence.cell_id)
        scope = math.ceil(0.1 * c)
        return CellSentence(sentence.cell_id, tuple(_permuted(tokens, scope, rng)), variant)

    if spec.kind == HASH_THEN_SHUFFLE_IN_CONTEXT:
        # Hash first; the shuffle scope uses the hashed names' token costs.
        mapping = hash_vocabulary(set(tokens))
        hashed = [mapping[t] for t in tokens]
        interim = CellSentence(sentence.cell_id, tuple(hashed))
        if context_count is None:
            c = min(in_context_count(interim, spec.budget), len(hashed))
        rng = _rng(spec.seed, sentence.cell_id)
        return CellSentence(sentence.cell_id, tuple(_permuted(hashed, c, rng)), variant)

    if spec.kind == TRUNCATE_FRACTION:
        keep = math.ceil(spec.fraction * c)
        return CellSentence(sentence.cell_id, tuple(tokens[:keep]), variant)

    raise AssertionError(f"unhandled kind {spec.kind}")


def apply_all(
    spec: AblationSpec,
    sentences,
    context_counts: dict[str, int] | None = None,
) -> list[CellSentence]:
    """Apply one ablation across a corpus.

    For the per-instance kind, a single uniqueness set is threaded through
    all cells in input order; two identical calls produce identical corpora.
    """
    sentences = list(sentences)
    if spec.kind in (GENE_NAME_HASH, HASH_THEN_SHUFFLE_IN_CONTEXT):
        corpus_names = set()
        for s in sentences:
            corpus_names.update(s.genes)
        hash_vocabulary(corpus_names)  # corpus-wide injectivity, abort on collision
    used: set[str] | None = set() if spec.kind == GENE_NAME_PER_INSTANCE else None
    out = []
    for s in sentences:
        override = context_counts.get(s.cell_id) if context_counts else None
        out.append(apply(spec, s, used_tokens=used, context_count=override))
    return out
