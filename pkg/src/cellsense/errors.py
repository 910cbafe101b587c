"""Exception types raised across the toolkit.

Every error that callers are expected to catch has a dedicated class here;
generic precondition violations use ValueError.
"""

from __future__ import annotations


class CellsenseError(Exception):
    """Base class for all toolkit errors."""


# --- corpus ---------------------------------------------------------------

class MalformedRecord(CellsenseError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateCellId(CellsenseError):
    def __init__(self, cell_id: str, line: int | None = None):
        loc = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate cell_id {cell_id!r}{loc}")
        self.cell_id = cell_id
        self.line = line


class NegativeCount(CellsenseError):
    def __init__(self, line: int, gene: str, value: float):
        super().__init__(f"line {line}: negative count {value} for gene {gene!r}")
        self.line = line
        self.gene = gene
        self.value = value


class UnknownGene(CellsenseError):
    def __init__(self, gene: str, line: int | None = None):
        loc = f" (line {line})" if line is not None else ""
        super().__init__(f"gene {gene!r} not in vocabulary{loc}")
        self.gene = gene
        self.line = line


class InvalidFraction(CellsenseError):
    def __init__(self, value: float):
        super().__init__(f"fraction must lie strictly between 0 and 1, got {value}")
        self.value = value


class SingletonLabel(CellsenseError):
    def __init__(self, label: str):
        super().__init__(f"label {label!r} has a single cell; stratified split needs >= 2")
        self.label = label


# --- ablate ---------------------------------------------------------------

class HashCollision(CellsenseError):
    def __init__(self, name_a: str, name_b: str, token: str):
        super().__init__(
            f"gene names {name_a!r} and {name_b!r} collide on hash token {token!r}"
        )
        self.name_a = name_a
        self.name_b = name_b
        self.token = token


class MissingSeed(CellsenseError):
    def __init__(self, kind: str):
        super().__init__(f"ablation kind {kind!r} is stochastic and requires a seed")
        self.kind = kind


class StackedAblation(CellsenseError):
    def __init__(self, variant: str):
        super().__init__(
            f"ablations apply to identity-variant sentences only, got variant {variant!r}"
        )
        self.variant = variant


# --- embed ----------------------------------------------------------------

class DimMismatch(CellsenseError):
    def __init__(self, expected: int, got: int, context: str = ""):
        suffix = f" ({context})" if context else ""
        super().__init__(f"expected dim {expected}, got {got}{suffix}")
        self.expected = expected
        self.got = got


class MissingEmbedding(CellsenseError):
    def __init__(self, cell_id: str, variant: str):
        super().__init__(f"no stored embedding for key {cell_id!r}|{variant!r}")
        self.cell_id = cell_id
        self.variant = variant


class ZeroVector(CellsenseError):
    def __init__(self, context: str = "cosine"):
        super().__init__(f"{context}: zero vector has no direction")


class NonFiniteValue(CellsenseError):
    def __init__(self, context: str):
        super().__init__(f"non-finite value in {context}")


class TransportError(CellsenseError):
    """HTTP request failed after exhausting retries."""


# --- fusion ---------------------------------------------------------------

class DegenerateLabels(CellsenseError):
    def __init__(self, detail: str):
        super().__init__(detail)


class TrainingDiverged(CellsenseError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"epoch {epoch}: {detail}")
        self.epoch = epoch


# --- rerank ---------------------------------------------------------------

class DuplicateLabel(CellsenseError):
    def __init__(self, label: str):
        super().__init__(f"duplicate label {label!r} in label list")
        self.label = label


class EmptySentence(CellsenseError):
    def __init__(self, cell_id: str):
        super().__init__(f"cell {cell_id!r} has an empty sentence; cannot build a prompt")
        self.cell_id = cell_id


class ProviderFailureRate(CellsenseError):
    def __init__(self, failures: int, total: int, limit: float):
        super().__init__(
            f"{failures}/{total} provider calls failed, above the {limit:.0%} abort threshold"
        )
        self.failures = failures
        self.total = total


# --- interpret ------------------------------------------------------------

class NonFiniteScore(CellsenseError):
    def __init__(self, line: int, gene: str):
        super().__init__(f"line {line}: non-finite attribution score for gene {gene!r}")
        self.line = line
        self.gene = gene


class UnknownCellId(CellsenseError):
    def __init__(self, cell_id: str, line: int | None = None):
        loc = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown cell_id {cell_id!r}{loc}")
        self.cell_id = cell_id


class MixedMethods(CellsenseError):
    def __init__(self, methods: set[str]):
        super().__init__(f"attribution records mix method ids: {sorted(methods)}")
        self.methods = methods


class SingularSurrogate(CellsenseError):
    def __init__(self):
        super().__init__("surrogate normal equations are singular")


# --- cli ------------------------------------------------------------------

class ConfigError(CellsenseError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"config field {field!r}: {reason}")
        self.field = field
        self.reason = reason
