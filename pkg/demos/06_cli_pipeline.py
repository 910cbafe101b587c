"""Drive the whole pipeline through the CLI with one declarative config.

Writes a synthetic corpus and an experiment config to a scratch directory,
then runs the stages exactly as a shell user would:

    cellsense ingest --config exp.json
    cellsense sentences --config exp.json
    ...
    cellsense report --config exp.json
"""

import json
import tempfile
from pathlib import Path

from cellsense.cli import main
from cellsense.corpus import save_dataset
from cellsense.synthetic import MarkerCorpusParams, marker_corpus

root = Path(tempfile.mkdtemp(prefix="cellsense-demo-"))
params = MarkerCorpusParams(cells_per_type=30, noise_pool=100, noise_per_cell=30)
save_dataset(marker_corpus(0, params), root / "cells.jsonl")

config = {
    "dataset": {"path": str(root / "cells.jsonl"), "format": "sparse-jsonl"},
    "split": {"test_fraction": 0.5, "seed": 7},
    "budget": {"max_tokens": 52, "prefix_tokens": 8},
    "ablations": [
        {"kind": "identity"},
        {"kind": "gene_name_hash"},
        {"kind": "shuffle_in_context", "seed": 1},
        {"kind": "shuffle_all", "seed": 1},
    ],
    "provider": {"kind": "mock", "dim": 128, "seed": 0},
    "eval": {"k": 10},
    "rerank": {"subset_size": 30, "runs": 2, "seed": 3},
    "out": str(root / "out"),
}
config_path = root / "exp.json"
config_path.write_text(json.dumps(config, indent=2))

for command in ("ingest", "sentences", "ablate", "embed", "knn-eval", "report"):
    code = main([command, "--config", str(config_path)])
    print(f"cellsense {command:<10} -> exit {code}")
code = main(["rerank", "--config", str(config_path), "--provider", "identity-stub"])
print(f"cellsense {'rerank':<10} -> exit {code}")

print("\nartifacts under", root / "out")
for p in sorted((root / "out").rglob("*")):
    if p.is_file():
        print("  ", p.relative_to(root / "out"))

print("\nreport.md:")
print((root / "out" / "report.md").read_text())
