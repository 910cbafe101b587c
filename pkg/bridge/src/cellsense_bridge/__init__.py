"""Bridge from real text/cell encoders to the cellsense embedding store.

Exports embeddings for sentence files into the ``.embs.jsonl`` format and
optionally serves the embeddings HTTP protocol on localhost. Metrics and
evaluation stay in the main toolkit; this package only produces vectors.
"""

__version__ = "0.1.0"

from .encoders import HashingEncoder, ModelLoadError, load_encoder
from .export import BridgeJob, DimDrift, export_embeddings, read_sentences
from .server import make_server, serve_embeddings

__all__ = [
    "__version__",
    "BridgeJob",
    "DimDrift",
    "HashingEncoder",
    "ModelLoadError",
    "export_embeddings",
    "load_encoder",
    "make_server",
    "read_sentences",
    "serve_embeddings",
]
