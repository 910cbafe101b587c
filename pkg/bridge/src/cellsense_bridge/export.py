"""Export embeddings from a real encoder into the store file format.

Input is the sentences JSONL the main toolkit writes
(``{"cell_id":…,"variant":…,"text":…}`` per line); output is an
``.embs.jsonl`` store (header line, then one ``{"key","vector"}`` entry
per sentence) plus an optional sidecar reporting each cell's in-context
gene count under the encoder's true tokenizer. Sentence text passes to
the encoder verbatim; this side does no text manipulation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import load_encoder


class DimDrift(RuntimeError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"encoder returned dim {got} after declaring {expected}")


@dataclass
class BridgeJob:
    model: str
    sentences_path: str | Path
    store_path: str | Path
    batch_size: int = 32
    device: str | None = None
    context_report: bool = False  # write <store>.context.jsonl sidecar

    def context_path(self) -> Path:
        p = Path(self.store_path)
        return p.with_name(p.name + ".context.jsonl")


def read_sentences(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path} line {lineno}: invalid JSON: {exc.msg}")
            for key in ("cell_id", "variant", "text"):
                if key not in obj:
                    raise ValueError(f"{path} line {lineno}: missing field {key!r}")
            records.append(obj)
    return records


def export_embeddings(job: BridgeJob, encoder=None):
    """Encode every sentence and write the store (and optional sidecar).

    Returns (entries_written, dim). Empty sentence texts still produce an
    entry, with a warning, so store keys stay aligned with the corpus.
    """
    encoder = encoder or load_encoder(job.model, device=job.device)
    records = read_sentences(job.sentences_path)

    for record in records:
        if not record["text"].strip():
            warnings.warn(
                f"cell {record['cell_id']!r} variant {record['variant']!r} has empty text; "
                "its embedding carries no information"
            )

    store_path = Path(job.store_path)
    store_path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with open(store_path, "w", encoding="utf-8") as fh:
        header = {"model_id": encoder.model_id, "dim": encoder.dim, "normalized": False}
        fh.write(json.dumps(header) + "\n")
        for start in range(0, len(records), job.batch_size):
            batch = records[start : start + job.batch_size]
            vectors = np.asarray(encoder.encode([r["text"] for r in batch]), dtype=np.float64)
            if vectors.ndim != 2 or vectors.shape[1] != encoder.dim:
                raise DimDrift(encoder.dim, vectors.shape[-1])
            for record, vector in zip(batch, vectors):
                key = f"{record['cell_id']}|{record['variant']}"
                fh.write(json.dumps({"key": key, "vector": vector.tolist()}) + "\n")
                written += 1

    if job.context_report:
        with open(job.context_path(), "w", encoding="utf-8") as fh:
            for record in records:
                count = genes_in_context(encoder, record)
                fh.write(
                    json.dumps(
                        {
                            "cell_id": record["cell_id"],
                            "variant": record["variant"],
                            "in_context_genes": count,
                        }
                    )
                    + "\n"
                )
    return written, encoder.dim


def genes_in_context(encoder, record: dict) -> int | None:
    """How many of the record's genes fit the encoder's token limit.

    The encoder reports how many whitespace words of the text fit; when the
    record carries a "genes" list (the main toolkit writes one), words
    belonging to the prompt prefix are subtracted so the count refers to
    genes alone. Without a genes list the raw fitted-word count is returned.
    """
    fitted = encoder.context_gene_count(record["text"])
    if fitted is None:
        return None
    genes = record.get("genes")
    if not isinstance(genes, list):
        return fitted
    prompt_words = len(record["text"].split()) - len(genes)
    return max(0, min(len(genes), fitted - max(prompt_words, 0)))
