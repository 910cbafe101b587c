"""Encoder backends for the bridge.

Two families load through one identifier scheme:

* ``hash:<dim>[:<seed>]`` — a deterministic hashing encoder that needs no
  downloads; it exists so the export/serve plumbing is testable anywhere.
* anything else — a sentence-transformers model name, loaded lazily.

Every encoder exposes ``dim``, ``model_id``, ``encode(texts) -> (n, dim)``
float64 arrays, and ``context_gene_count(text) -> int | None`` reporting
how many whitespace genes of the text fit the model's true token budget
(None when the encoder has no meaningful tokenizer limit).
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


class ModelLoadError(RuntimeError):
    pass


class HashingEncoder:
    """Deterministic bag-of-words encoder over SHA-256 token buckets.

    Tokenizes on whitespace, then splits words into 4-character subword
    chunks (its "true" tokenizer); a fixed 512-token sequence limit drives
    context_gene_count.
    """

    max_seq_tokens = 512

    def __init__(self, dim: int, seed: int = 0):
        if dim < 8:
            raise ModelLoadError(f"hash encoder dim must be >= 8, got {dim}")
        self.dim = dim
        self.seed = seed
        self.model_id = f"hash:{dim}:{seed}"

    def _bucket(self, token: str) -> tuple[int, float]:
        digest = hashlib.sha256(f"{self.seed}\x1f{token}".encode()).digest()
        coord = int.from_bytes(digest[:8], "little") % self.dim
        sign = 1.0 if digest[8] & 1 else -1.0
        return coord, sign

    @staticmethod
    def subword_chunks(word: str) -> int:
        return max(1, math.ceil(len(word) / 4))

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            words = text.split()
            for rank, word in enumerate(words):
                coord, sign = self._bucket(word)
                out[i, coord] += sign / math.log2(rank + 2)
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out

    def context_gene_count(self, text: str) -> int:
        remaining = self.max_seq_tokens
        count = 0
        for word in text.split():
            remaining -= self.subword_chunks(word)
            if remaining < 0:
                break
            count += 1
        return count


class SentenceTransformerEncoder:
    """Wrapper over a sentence-transformers model, loaded on demand."""

    def __init__(self, name: str, device: str | None = None):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise ModelLoadError(
                "sentence-transformers is not installed; "
                "pip install 'cellsense-bridge[models]'"
            ) from exc
        try:
            self._model = SentenceTransformer(name, device=device)
        except Exception as exc:
            raise ModelLoadError(f"could not load model {name!r}: {exc}") from exc
        self.model_id = name
        self.dim = int(self._model.get_sentence_embedding_dimension())

    def encode(self, texts: list[str]) -> np.ndarray:
        vectors = self._model.encode(
            texts, convert_to_numpy=True, show_progress_bar=False
        )
        return np.asarray(vectors, dtype=np.float64)

    def context_gene_count(self, text: str) -> int | None:
        tokenizer = getattr(self._model, "tokenizer", None)
        limit = getattr(self._model, "max_seq_length", None)
        if tokenizer is None or not limit:
            return None
        # tokens the prompt consumes before the first gene name
        words = text.split()
        count = 0
        for n in range(len(words), -1, -1):
            # binary-free scan from the full sentence down: first prefix
            # whose token length fits is the in-context count
            prefix = " ".join(words[:n])
            if len(tokenizer(prefix)["input_ids"]) <= limit:
                count = n
                break
        return count


def load_encoder(model: str, device: str | None = None):
    """Resolve a model identifier to an encoder instance."""
    if model.startswith("hash:"):
        parts = model.split(":")
        try:
            dim = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (IndexError, ValueError):
            raise ModelLoadError(f"bad hash encoder spec {model!r}; use hash:<dim>[:<seed>]")
        return HashingEncoder(dim, seed)
    return SentenceTransformerEncoder(model, device=device)
