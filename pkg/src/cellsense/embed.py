"""Embedding providers, the on-disk vector store, and cosine similarity.

Three provider kinds share one interface: ``mock`` (a deterministic
rank-weighted hashed bag-of-words, the desk-scale stand-in for a real text
encoder), ``http`` (a batched, retrying client for an embeddings endpoint),
and ``store`` (lookup-only against a previously exported file). Providers
honor the sentence token budget: only the in-context gene prefix is encoded.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import requests

from .ablate import TokenBudget, in_context_count
from .corpus import CellSentence
from .errors import (
    DimMismatch,
    MissingEmbedding,
    NonFiniteValue,
    TransportError,
    ZeroVector,
)

DEFAULT_PROMPT_PREFIX = "A cell with genes ranked by expression: "
STORE_SUFFIX = ".embs.jsonl"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a. Fixed here so mock vectors match across platforms."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _token_coordinates(token: str, seed: int, dim: int) -> tuple[int, float]:
    """Bucket index and sign for a token: FNV-1a over token bytes ++ seed bytes.

    The seed is appended as 8 little-endian bytes; the sign comes from the
    low bit of a second hash with a 0x01 suffix.
    """
    material = token.encode("utf-8") + (seed & _MASK64).to_bytes(8, "little")
    coord = fnv1a64(material) % dim
    sign = 1.0 if fnv1a64(material + b"\x01") & 1 else -1.0
    return coord, sign


def mock_embed(sentence: CellSentence, dim: int, seed: int) -> np.ndarray:
    """Deterministic rank-weighted hashed bag-of-words embedding.

    The token at rank r contributes weight 1/log2(r+2) to its hash bucket,
    signed; the result is L2-normalized. Rank weighting makes order ablations
    measurably change the vector. Empty sentences map to the zero vector.
    """
    if dim < 8:
        raise ValueError(f"mock embedding dim must be >= 8, got {dim}")
    v = np.zeros(dim, dtype=np.float64)
    for rank, token in enumerate(sentence.genes):
        coord, sign = _token_coordinates(token, seed, dim)
        v[coord] += sign / math.log2(rank + 2)
    norm = np.linalg.norm(v)
    if norm > 0:
        v /= norm
    return v


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimMismatch(u.shape[0], v.shape[0], "cosine")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector()
    if np.array_equal(u, v):
        return 1.0
    # rounding can push the ratio a last-place unit past the [-1, 1] range
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class ProviderConfig:
    kind: str = "mock"  # mock | http | store
    model_id: str = "mock-rank-bow"
    dim: int = 256
    endpoint: str | None = None
    auth_env: str = "CELLSENSE_EMBED_KEY"
    prompt_prefix: str = DEFAULT_PROMPT_PREFIX
    budget: TokenBudget = field(default_factory=TokenBudget)
    batch_size: int = 32
    max_inflight: int = 4
    max_retries: int = 3
    retry_base_delay: float = 1.0
    seed: int = 0  # mock only

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http provider requires an endpoint")


class EmbeddingStore:
    """JSONL vector store keyed by (cell_id, variant).

    First line is a header with model_id, dim, and a normalized flag;
    following lines carry one vector each at full round-trip precision.
    """

    def __init__(self, model_id: str, dim: int, normalized: bool = False):
        self.model_id = model_id
        self.dim = dim
        self.normalized = normalized
        self._entries: dict[tuple[str, str], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._entries

    def put(self, cell_id: str, variant: str, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise DimMismatch(self.dim, vector.shape[0], f"store put {cell_id}|{variant}")
        if not np.all(np.isfinite(vector)):
            raise NonFiniteValue(f"store put {cell_id}|{variant}")
        self._entries[(cell_id, variant)] = vector

    def get(self, cell_id: str, variant: str) -> np.ndarray:
        try:
            return self._entries[(cell_id, variant)]
        except KeyError:
            raise MissingEmbedding(cell_id, variant) from None

    def keys(self):
        return self._entries.keys()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"model_id": self.model_id, "dim": self.dim, "normalized": self.normalized}
            fh.write(json.dumps(header) + "\n")
            for (cell_id, variant), vec in self._entries.items():
                entry = {"key": f"{cell_id}|{variant}", "vector": vec.tolist()}
                fh.write(json.dumps(entry) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        with open(path, encoding="utf-8") as fh:
            header_line = fh.readline()
            if not header_line.strip():
                raise ValueError(f"{path}: missing store header")
            header = json.loads(header_line)
            for key in ("model_id", "dim"):
                if key not in header:
                    raise ValueError(f"{path}: header lacks {key!r}")
            store = cls(header["model_id"], int(header["dim"]), bool(header.get("normalized")))
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                entry = json.loads(line)
                cell_id, _, variant = entry["key"].rpartition("|")
                key = (cell_id, variant)
                if key in store._entries:
                    raise ValueError(f"{path} line {lineno}: duplicate key {entry['key']!r}")
                vec = np.asarray(entry["vector"], dtype=np.float64)
                if vec.shape != (store.dim,):
                    raise DimMismatch(store.dim, vec.shape[0], f"line {lineno}")
                if not np.all(np.isfinite(vec)):
                    raise NonFiniteValue(f"{path} line {lineno}")
                store._entries[key] = vec
        return store


def render_sentence_text(sentence: CellSentence, prefix: str, budget: TokenBudget | None) -> str:
    """Prompt text for a sentence: prefix plus the in-context gene prefix."""
    genes = sentence.genes
    if budget is not None:
        genes = genes[: in_context_count(sentence, budget)]
    return prefix + " ".join(genes)


class MockEmbedder:
    """Deterministic provider used for desk-scale evaluation and tests."""

    def __init__(self, config: ProviderConfig, store: EmbeddingStore | None = None):
        self.config = config
        self.store = store

    def embed_batch(self, sentences: list[CellSentence]) -> np.ndarray:
        if not sentences:
            raise ValueError("embed_batch needs at least one sentence")
        out = np.empty((len(sentences), self.config.dim), dtype=np.float64)
        for i, s in enumerate(sentences):
            if self.store is not None and (s.cell_id, s.variant) in self.store:
                out[i] = self.store.get(s.cell_id, s.variant)
                continue
            kept = s.genes[: in_context_count(s, self.config.budget)]
            clipped = CellSentence(s.cell_id, kept, s.variant)
            out[i] = mock_embed(clipped, self.config.dim, self.config.seed)
            if self.store is not None:
                self.store.put(s.cell_id, s.variant, out[i])
        return out

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        """Embed bare strings (whitespace-tokenized, no prefix, no budget)."""
        out = np.empty((len(texts), self.config.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            pseudo = CellSentence(cell_id=f"text:{i}", genes=tuple(text.split()))
            out[i] = mock_embed(pseudo, self.config.dim, self.config.seed)
        return out


class StoreEmbedder:
    """Lookup-only provider over a previously written store file."""

    def __init__(self, config: ProviderConfig, store: EmbeddingStore):
        if store.dim != config.dim:
            raise DimMismatch(config.dim, store.dim, "store header")
        self.config = config
        self.store = store

    def embed_batch(self, sentences: list[CellSentence]) -> np.ndarray:
        if not sentences:
            raise ValueError("embed_batch needs at least one sentence")
        return np.stack([self.store.get(s.cell_id, s.variant) for s in sentences])


class HttpEmbedder:
    """Client for the embeddings endpoint, with batching, retries, and cache.

    POST {endpoint}/embeddings with {"model": ..., "input": [...]}; the
    response carries {"data": [{"index": i, "embedding": [...]}]}. Transport
    errors and 429/5xx responses retry with exponential backoff; cached keys
    are never re-requested.
    """

    def __init__(
        self,
        config: ProviderConfig,
        cache: EmbeddingStore | None = None,
        session: requests.Session | None = None,
        api_key: str | None = None,
    ):
        self.config = config
        self.cache = cache
        self.session = session or requests.Session()
        self.api_key = api_key
        self.request_count = 0

    def _headers(self) -> dict[str, str]:
        import os

        key = self.api_key or os.environ.get(self.config.auth_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_batch(self, texts: list[str]) -> list[list[float]]:
        url = self.config.endpoint.rstrip("/") + "/embeddings"
        body = {"model": self.config.model_id, "input": texts}
        delay = self.config.retry_base_delay
        last_err: Exception | None = None
        for attempt in range(self.config.max_retries):
            try:
                self.request_count += 1
                resp = self.session.post(url, json=body, headers=self._headers(), timeout=60)
            except requests.RequestException as exc:
                last_err = exc
                resp = None
            if resp is not None:
                if resp.status_code == 200:
                    try:
                        data = resp.json()["data"]
                        ordered: list[list[float] | None] = [None] * len(texts)
                        for item in data:
                            ordered[item["index"]] = item["embedding"]
                    except (KeyError, IndexError, TypeError, ValueError) as exc:
                        raise TransportError(f"malformed embeddings response: {exc}")
                    if any(v is None for v in ordered):
                        raise TransportError("response missing embedding indices")
                    return ordered  # type: ignore[return-value]
                if resp.status_code != 429 and resp.status_code < 500:
                    raise TransportError(f"embeddings endpoint returned {resp.status_code}")
                last_err = TransportError(f"status {resp.status_code}")
            if attempt + 1 < self.config.max_retries:
                time.sleep(delay)
                delay *= 2
        raise TransportError(f"embeddings request failed after retries: {last_err}")

    def _validate(self, raw: list[float], context: str) -> np.ndarray:
        vec = np.asarray(raw, dtype=np.float64)
        if vec.shape != (self.config.dim,):
            raise DimMismatch(self.config.dim, vec.shape[0], context)
        if not np.all(np.isfinite(vec)):
            raise NonFiniteValue(context)
        return vec

    def embed_batch(self, sentences: list[CellSentence]) -> np.ndarray:
        if not sentences:
            raise ValueError("embed_batch needs at least one sentence")
        results: dict[int, np.ndarray] = {}
        misses: list[int] = []
        for i, s in enumerate(sentences):
            if self.cache is not None and (s.cell_id, s.variant) in self.cache:
                results[i] = self.cache.get(s.cell_id, s.variant)
            else:
                misses.append(i)

        batches: list[list[int]] = [
            misses[pos : pos + self.config.batch_size]
            for pos in range(0, len(misses), self.config.batch_size)
        ]

        def run(batch: list[int]) -> list[tuple[int, np.ndarray]]:
            texts = [
                render_sentence_text(sentences[i], self.config.prompt_prefix, self.config.budget)
                for i in batch
            ]
            raw = self._post_batch(texts)
            return [
                (i, self._validate(vec, f"{sentences[i].cell_id}|{sentences[i].variant}"))
                for i, vec in zip(batch, raw)
            ]

        if batches:
            with ThreadPoolExecutor(max_workers=self.config.max_inflight) as pool:
                for chunk in pool.map(run, batches):
                    for i, vec in chunk:
                        results[i] = vec
        if self.cache is not None:
            for i in misses:
                s = sentences[i]
                if (s.cell_id, s.variant) not in self.cache:
                    self.cache.put(s.cell_id, s.variant, results[i])
        return np.stack([results[i] for i in range(len(sentences))])

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        out: list[np.ndarray] = []
        for pos in range(0, len(texts), self.config.batch_size):
            raw = self._post_batch(texts[pos : pos + self.config.batch_size])
            out.extend(self._validate(vec, f"text {pos + j}") for j, vec in enumerate(raw))
        return np.stack(out)


def make_provider(
    config: ProviderConfig,
    store: EmbeddingStore | None = None,
    **kwargs,
):
    if config.kind == "mock":
        return MockEmbedder(config, store=store)
    if config.kind == "store":
        if store is None:
            raise ValueError("store provider needs a loaded EmbeddingStore")
        return StoreEmbedder(config, store)
    if config.kind == "http":
        return HttpEmbedder(config, cache=store, **kwargs)
    raise ValueError(f"unknown provider kind {config.kind!r}")


def embed_batch(provider, sentences: list[CellSentence]) -> np.ndarray:
    """One vector per sentence, in order. ``provider`` is a config or an embedder."""
    if isinstance(provider, ProviderConfig):
        provider = make_provider(provider)
    return provider.embed_batch(list(sentences))


def new_store_for(config: ProviderConfig) -> EmbeddingStore:
    return EmbeddingStore(config.model_id, config.dim, normalized=config.kind == "mock")


def mock_config(dim: int = 256, seed: int = 0, budget: TokenBudget | None = None) -> ProviderConfig:
    cfg = ProviderConfig(kind="mock", model_id=f"mock-rank-bow-{dim}", dim=dim, seed=seed)
    if budget is not None:
        cfg = replace(cfg, budget=budget)
    return cfg
