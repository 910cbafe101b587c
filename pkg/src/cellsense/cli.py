"""Command-line orchestration for the evaluation pipeline.

One declarative JSON config describes an experiment; each subcommand reads
it, writes its artifacts under the output directory, and records a manifest
with the config hash, toolkit version, and wall-clock time. Re-running a
subcommand against unchanged inputs reproduces byte-identical metrics files
(manifests carry the only timestamps). Secrets enter through ${ENV_VAR}
interpolation in string values, never through the config file itself.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, ablate
from .ablate import AblationSpec, TokenBudget, apply_all
from .corpus import (
    CellSentence,
    Dataset,
    build_sentences,
    load_dataset,
    save_dataset,
    stratified_split,
)
from .embed import (
    DEFAULT_PROMPT_PREFIX,
    EmbeddingStore,
    ProviderConfig,
    make_provider,
    new_store_for,
    render_sentence_text,
)
from .errors import CellsenseError, ConfigError
from .evalcore import (
    ami,
    ari,
    evaluate_zero_shot,
    format_mean_std,
    kmeans,
    knn_classify_batch,
    sample_std,
)
from .fusion import (
    GridSpec,
    TrainConfig,
    grid_search,
    load_model,
    save_model,
    train_fusion,
    train_head,
    write_trace,
)
from .interpret import (
    LimeConfig,
    MarkerDb,
    aggregate_attributions,
    import_external_attributions,
    lime_attribution,
    marker_overlap,
    marker_similarity_table,
)
from .rerank import (
    ChatProviderConfig,
    HttpChatProvider,
    build_marker_quiz,
    identity_stub,
    oracle_stub,
    run_marker_quiz,
    run_rerank_experiment,
)

_ENV_PATTERN = re.compile(r"\$\{([A-Z_][A-Z0-9_]*)\}")

ABLATION_TABLE_COLUMNS = [
    ("identity", "No Ablations / Baseline"),
    ("gene_name_hash", "Gene Name Ablation"),
    ("shuffle_all", "Order Ablation (All Genes)"),
    ("shuffle_in_context", "Order Ablation (In Context)"),
    ("shuffle_top10_in_context", "Order Ablation (Top 10% In Context)"),
    ("hash_then_shuffle_in_context", "Gene Name + Order Ablation (In Context)"),
    ("gene_name_per_instance", "Gene Name Per-Instance Ablation"),
]
METRIC_ROWS = [
    ("accuracy", "Accuracy"),
    ("macro_precision", "Precision"),
    ("macro_recall", "Recall"),
    ("macro_f1", "F1"),
    ("ari", "k-means ARI"),
    ("ami", "k-means AMI"),
]


def _interpolate(value):
    if isinstance(value, str):
        def repl(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(name, "environment variable not set")
            return os.environ[name]

        return _ENV_PATTERN.sub(repl, value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


def load_config(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    return _interpolate(raw)


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _require(config: dict, field: str) -> dict:
    value = config.get(field)
    if value is None:
        raise ConfigError(field, "required section missing")
    return value


class Runner:
    """Shared state for one CLI invocation."""

    def __init__(self, config: dict, out_dir: Path, args):
        self.config = config
        self.out = out_dir
        self.args = args
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    # --- plumbing -----------------------------------------------------

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def emit(self, relpath: str, payload) -> Path:
        p = self.path(relpath)
        with open(p, "w", encoding="utf-8") as fh:
            if isinstance(payload, str):
                fh.write(payload)
            else:
                json.dump(payload, fh, indent=2, sort_keys=True)
                fh.write("\n")
        self.artifacts.append(str(p))
        return p

    def write_manifest(self, command: str, started: float) -> None:
        manifest = {
            "command": command,
            "config_hash": config_hash(self.config),
            "version": __version__,
            "wall_clock_s": round(time.time() - started, 3),
            "artifacts": sorted(self.artifacts),
        }
        with open(self.path(f"manifest-{command}.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # --- config sections ----------------------------------------------

    def budget(self) -> TokenBudget:
        section = self.config.get("budget", {})
        return TokenBudget(
            max_tokens=section.get("max_tokens", 512),
            prefix_tokens=section.get("prefix_tokens", 8),
        )

    def provider_config(self) -> ProviderConfig:
        section = _require(self.config, "provider")
        try:
            return ProviderConfig(
                kind=section.get("kind", "mock"),
                model_id=section.get("model_id", "mock-rank-bow"),
                dim=int(section.get("dim", 256)),
                endpoint=section.get("endpoint"),
                prompt_prefix=section.get("prompt_prefix", DEFAULT_PROMPT_PREFIX),
                budget=self.budget(),
                batch_size=int(section.get("batch_size", 32)),
                max_inflight=int(section.get("max_inflight", 4)),
                max_retries=int(section.get("max_retries", 3)),
                seed=int(section.get("seed", self.seed())),
            )
        except ValueError as exc:
            raise ConfigError("provider", str(exc))

    def seed(self) -> int:
        if self.args.seed is not None:
            return self.args.seed
        return int(self.config.get("seed", 0))

    def load_dataset(self) -> Dataset:
        section = _require(self.config, "dataset")
        if "path" not in section:
            raise ConfigError("dataset.path", "required")
        dataset = load_dataset(
            section["path"],
            section.get("format", "sparse-jsonl"),
            labels_path=section.get("labels_path"),
            vocab_path=section.get("vocab_path"),
        )
        split = self.config.get("split")
        if split:
            dataset = stratified_split(
                dataset,
                float(split.get("test_fraction", 0.2)),
                int(split.get("seed", self.seed())),
            )
        return dataset

    def ablation_specs(self) -> list[AblationSpec]:
        section = self.config.get("ablations") or [{"kind": "identity"}]
        specs = []
        for i, entry in enumerate(section):
            try:
                specs.append(
                    AblationSpec(
                        kind=entry["kind"],
                        seed=entry.get("seed", self.seed()) if entry.get("kind") != "identity" else entry.get("seed"),
                        budget=self.budget(),
                        fraction=entry.get("fraction"),
                    )
                )
            except (KeyError, ValueError, CellsenseError) as exc:
                raise ConfigError(f"ablations[{i}]", str(exc))
        return specs

    def load_store(self, ref: str) -> EmbeddingStore:
        """Resolve a store reference: a path, or a variant id under out/stores."""
        p = Path(ref)
        if not p.exists():
            p = self.path("stores", f"{ref}.embs.jsonl")
        if not p.exists():
            raise ConfigError("store", f"no store file at {ref!r}")
        return EmbeddingStore.load(p)

    def matrix_for(self, store: EmbeddingStore, cell_ids: list[str], variant: str) -> np.ndarray:
        return np.stack([store.get(cid, variant) for cid in cell_ids])

    def chat_provider(self, dataset: Dataset | None = None):
        name = self.args.provider or "http"
        if name == "identity-stub":
            return identity_stub()
        if name == "oracle-stub":
            if dataset is None:
                raise ConfigError("provider", "oracle-stub needs a dataset")
            return oracle_stub(dataset.labels_by_id())
        section = self.config.get("rerank", {}).get("chat") or {}
        if "endpoint" not in section:
            raise ConfigError("rerank.chat.endpoint", "required for the http chat provider")
        return HttpChatProvider(
            ChatProviderConfig(
                endpoint=section["endpoint"],
                model_id=section.get("model_id", "gpt-4o"),
                temperature=float(section.get("temperature", 0.0)),
                max_retries=int(section.get("max_retries", 3)),
                schema_mode=bool(section.get("schema_mode", True)),
            )
        )


# --- subcommands --------------------------------------------------------


def cmd_ingest(run: Runner) -> None:
    dataset = run.load_dataset()
    save_dataset(dataset, run.path("dataset.jsonl"), vocab_path=run.path("vocab.json"))
    run.artifacts += [str(run.path("dataset.jsonl")), str(run.path("vocab.json"))]
    if dataset.split:
        run.emit("split.json", dataset.split)
    label_counts: dict[str, int] = {}
    for cell in dataset.cells:
        label_counts[cell.label] = label_counts.get(cell.label, 0) + 1
    run.emit(
        "summary.json",
        {
            "cells": len(dataset.cells),
            "genes": len(dataset.vocabulary),
            "labels": label_counts,
            "split": {
                part: sum(1 for v in dataset.split.values() if v == part)
                for part in ("train", "test")
            }
            if dataset.split
            else None,
        },
    )


def _write_sentences(run: Runner, sentences: list[CellSentence], variant: str, prefix: str) -> None:
    p = run.path("sentences", f"{variant}.jsonl")
    with open(p, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(
                json.dumps(
                    {
                        "cell_id": s.cell_id,
                        "variant": s.variant,
                        "genes": list(s.genes),
                        "text": render_sentence_text(s, prefix, budget=None),
                    }
                )
                + "\n"
            )
    run.artifacts.append(str(p))


def _read_sentences(run: Runner, variant: str) -> list[CellSentence]:
    p = run.path("sentences", f"{variant}.jsonl")
    if not p.exists():
        raise ConfigError("sentences", f"missing artifact {p}; run `sentences`/`ablate` first")
    out = []
    with open(p, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            out.append(CellSentence(obj["cell_id"], tuple(obj["genes"]), obj["variant"]))
    return out


def cmd_sentences(run: Runner) -> None:
    dataset = run.load_dataset()
    prefix = run.config.get("provider", {}).get("prompt_prefix", DEFAULT_PROMPT_PREFIX)
    by_id = build_sentences(dataset)
    _write_sentences(run, [by_id[c.cell_id] for c in dataset.cells], "identity", prefix)


def cmd_ablate(run: Runner) -> None:
    dataset = run.load_dataset()
    prefix = run.config.get("provider", {}).get("prompt_prefix", DEFAULT_PROMPT_PREFIX)
    by_id = build_sentences(dataset)
    identity = [by_id[c.cell_id] for c in dataset.cells]
    for spec in run.ablation_specs():
        variants = apply_all(spec, identity)
        _write_sentences(run, variants, spec.variant_id(), prefix)


def cmd_embed(run: Runner) -> None:
    config = run.provider_config()
    for spec in run.ablation_specs():
        variant = spec.variant_id()
        sentences = _read_sentences(run, variant)
        store = new_store_for(config)
        provider = make_provider(config, store=store)
        provider.embed_batch(sentences)
        p = run.path("stores", f"{variant}.embs.jsonl")
        store.save(p)
        run.artifacts.append(str(p))


def _split_ids(dataset: Dataset) -> tuple[list[str], list[str]]:
    if not dataset.split:
        raise ConfigError("split", "this command needs a train/test split")
    train = sorted(c.cell_id for c in dataset.cells_in("train"))
    test = sorted(c.cell_id for c in dataset.cells_in("test"))
    return train, test


def _with_display(doc: dict) -> dict:
    # markdown reports quote these strings verbatim, keeping every emitted
    # number traceable to a metrics file
    doc["display"] = {
        k: f"{v:.3f}" for k, v in doc.items() if isinstance(v, (int, float)) and v is not None
    }
    return doc


def cmd_knn_eval(run: Runner) -> None:
    dataset = run.load_dataset()
    labels = dataset.labels_by_id()
    train_ids, test_ids = _split_ids(dataset)
    eval_cfg = run.config.get("eval", {})
    for spec in run.ablation_specs():
        variant = spec.variant_id()
        store = run.load_store(variant)
        train_vecs = run.matrix_for(store, train_ids, variant)
        test_vecs = run.matrix_for(store, test_ids, variant)
        report = evaluate_zero_shot(
            train_vecs,
            [labels[c] for c in train_ids],
            test_vecs,
            [labels[c] for c in test_ids],
            k=int(eval_cfg.get("k", 10)),
            n_clusters=eval_cfg.get("clusters"),
            kmeans_seed=int(eval_cfg.get("kmeans_seed", run.seed())),
        )
        run.emit(f"metrics/{variant}.json", _with_display(report.to_dict()))


def cmd_cluster_eval(run: Runner) -> None:
    dataset = run.load_dataset()
    labels = dataset.labels_by_id()
    _, test_ids = _split_ids(dataset)
    eval_cfg = run.config.get("eval", {})
    for spec in run.ablation_specs():
        variant = spec.variant_id()
        store = run.load_store(variant)
        test_vecs = run.matrix_for(store, test_ids, variant)
        true_labels = [labels[c] for c in test_ids]
        K = eval_cfg.get("clusters") or len(set(labels.values()))
        clusters = kmeans(test_vecs, int(K), seed=int(eval_cfg.get("kmeans_seed", run.seed())), cell_ids=test_ids)
        assigned = [clusters.assignment[c] for c in test_ids]
        run.emit(
            f"metrics/cluster-{variant}.json",
            {"ari": ari(true_labels, assigned), "ami": ami(true_labels, assigned), "inertia": clusters.inertia},
        )


def cmd_train_head(run: Runner) -> None:
    dataset = run.load_dataset()
    labels = dataset.labels_by_id()
    train_ids, test_ids = _split_ids(dataset)
    section = run.config.get("head", {})
    variant = section.get("variant", "identity")
    store = run.load_store(section.get("store", variant))
    X_train = run.matrix_for(store, train_ids, variant)
    X_test = run.matrix_for(store, test_ids, variant)
    model = train_head(X_train, [labels[c] for c in train_ids], seed=run.seed())
    save_model(model, run.path("models", f"head-{variant}.json"))
    write_trace(model.loss_trace, run.path("models", f"head-{variant}-trace.csv"))
    run.artifacts += [
        str(run.path("models", f"head-{variant}.json")),
        str(run.path("models", f"head-{variant}-trace.csv")),
    ]
    from .evalcore import macro_metrics

    report = macro_metrics([labels[c] for c in test_ids], model.predict(X_test))
    run.emit(f"metrics/head-{variant}.json", report.to_dict())


def cmd_train_fusion(run: Runner) -> None:
    dataset = run.load_dataset()
    labels = dataset.labels_by_id()
    train_ids, test_ids = _split_ids(dataset)
    section = _require(run.config, "fusion")
    variant_a = section.get("variant_a", "identity")
    variant_b = section.get("variant_b", "identity")
    store_a = run.load_store(section["modality_a"])
    store_b = run.load_store(section["modality_b"])
    Xa_train = run.matrix_for(store_a, train_ids, variant_a)
    Xb_train = run.matrix_for(store_b, train_ids, variant_b)
    Xa_test = run.matrix_for(store_a, test_ids, variant_a)
    Xb_test = run.matrix_for(store_b, test_ids, variant_b)
    y_train = [labels[c] for c in train_ids]
    y_test = [labels[c] for c in test_ids]
    hidden = int(section.get("hidden", 4096))
    seeds = section.get("seeds", [run.seed()])

    from .evalcore import macro_metrics

    grid_cfg = section.get("grid")
    per_seed = []
    for seed in seeds:
        if grid_cfg:
            grid = GridSpec(
                lr0_values=grid_cfg.get("lr0", [1e-4, 3e-4, 1e-3]),
                epochs_values=grid_cfg.get("epochs", [10, 20, 40]),
                batch_values=grid_cfg.get("batch", [32, 128]),
                gamma_values=grid_cfg.get("gamma", [0.9, 0.95]),
                validation_fraction=float(grid_cfg.get("validation_fraction", 0.1)),
            )
            result = grid_search(grid, Xa_train, Xb_train, y_train, seed=int(seed), hidden=hidden)
            model, chosen = result.model, result.config
        else:
            chosen = TrainConfig(
                lr0=float(section.get("lr0", 1e-3)),
                epochs=int(section.get("epochs", 20)),
                batch_size=int(section.get("batch_size", 32)),
                gamma=float(section.get("gamma", 0.95)),
                seed=int(seed),
            )
            model = train_fusion(Xa_train, Xb_train, y_train, chosen, hidden=hidden)
        save_model(model, run.path("models", f"fusion-seed{seed}.json"))
        write_trace(model.loss_trace, run.path("models", f"fusion-seed{seed}-trace.csv"))
        run.artifacts += [
            str(run.path("models", f"fusion-seed{seed}.json")),
            str(run.path("models", f"fusion-seed{seed}-trace.csv")),
        ]
        report = macro_metrics(y_test, model.predict(Xa_test, Xb_test))
        per_seed.append(
            {"seed": seed, "config": chosen.__dict__, "metrics": report.to_dict()}
        )

    doc: dict = {"runs": per_seed}
    if len(per_seed) >= 2:
        doc["aggregate"] = {}
        for name in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
            values = [r["metrics"][name] for r in per_seed]
            mean = float(np.mean(values))
            std = sample_std(values)
            doc["aggregate"][name] = {
                "mean": mean,
                "std": std,
                "formatted": format_mean_std(mean, std),
            }
    run.emit("metrics/fusion.json", doc)


def cmd_rerank(run: Runner) -> None:
    dataset = run.load_dataset()
    labels = dataset.labels_by_id()
    train_ids, test_ids = _split_ids(dataset)
    section = run.config.get("rerank", {})
    variant = section.get("variant", "identity")
    store = run.load_store(variant)
    train_vecs = run.matrix_for(store, train_ids, variant)
    test_vecs = run.matrix_for(store, test_ids, variant)
    _, tops = knn_classify_batch(
        test_vecs, train_vecs, [labels[c] for c in train_ids],
        k=int(run.config.get("eval", {}).get("k", 10)),
    )
    top3 = {cid: top for cid, top in zip(test_ids, tops)}
    sentences = {
        s.cell_id: s for s in _read_sentences(run, "identity") if s.cell_id in top3
    }
    provider = run.chat_provider(dataset)
    aggregate = run_rerank_experiment(
        dataset,
        sentences,
        top3,
        provider,
        subset_size=int(section.get("subset_size", 100)),
        runs=int(section.get("runs", 3)),
        seed=int(section.get("seed", run.seed())),
        manifest_path=run.path("rerank-manifest.jsonl"),
        store_raw=run.args.store_raw,
    )
    run.artifacts.append(str(run.path("rerank-manifest.jsonl")))
    run.emit(
        "metrics/rerank.json",
        {
            "subset": aggregate.subset,
            "per_run_accuracy": [r.accuracy for r in aggregate.runs],
            "mean_accuracy": aggregate.mean_accuracy,
            "std_accuracy": aggregate.std_accuracy,
            "formatted": aggregate.formatted(),
            "fallback_rate": float(
                np.mean([rec.fallback_used for r in aggregate.runs for rec in r.records])
            ),
        },
    )


def cmd_lime(run: Runner) -> None:
    dataset = run.load_dataset()
    labels = dataset.labels_by_id()
    section = run.config.get("lime", {})
    model = load_model(section.get("classifier") or run.path("models", "head-identity.json"))
    provider = make_provider(run.provider_config())
    lime_cfg = LimeConfig(
        n_samples=int(section.get("n_samples", 1000)),
        drop_probability=float(section.get("drop_probability", 0.5)),
        l2_lambda=float(section.get("l2_lambda", 1.0)),
        seed=int(section.get("seed", run.seed())),
    )
    classes = section.get("classes") or sorted(dataset.label_set)
    cap = int(section.get("cells_per_class", 10))
    sentences = _read_sentences(run, "identity")
    by_class: dict[str, list[CellSentence]] = {}
    for s in sentences:
        label = labels.get(s.cell_id)
        if label in classes and (dataset.split is None or dataset.split[s.cell_id] == "test"):
            by_class.setdefault(label, []).append(s)

    p = run.path("attributions", "lime.jsonl")
    records = []
    with open(p, "w", encoding="utf-8") as fh:
        for label in classes:
            group = sorted(by_class.get(label, []), key=lambda s: s.cell_id)[:cap]
            for sentence in group:
                record = lime_attribution(sentence, label, model, provider, lime_cfg)
                records.append(record)
                fh.write(
                    json.dumps(
                        {
                            "cell_id": record.cell_id,
                            "class": record.target,
                            "method": record.method,
                            "scores": record.scores,
                        }
                    )
                    + "\n"
                )
    run.artifacts.append(str(p))
    top = aggregate_attributions(records)
    run.emit("metrics/lime-top-genes.json", top)

    markers = run.config.get("markers", {}).get("path")
    if markers:
        db = MarkerDb.load(markers)
        methods = {"lime": top}
        external = section.get("external_attributions")
        if external:
            ext_records = import_external_attributions(external, known_cells=set(labels))
            methods[ext_records[0].method] = aggregate_attributions(ext_records)
        overlap = marker_overlap(methods, db)
        run.emit(
            "metrics/marker-overlap.json",
            {
                "types": {
                    t: {"by_method": o.markers_by_method, "consensus": o.consensus}
                    for t, o in overlap.types.items()
                },
                "uncovered": overlap.uncovered,
            },
        )


def cmd_marker_sim(run: Runner) -> None:
    section = _require(run.config, "markers")
    db = MarkerDb.load(section["path"])
    provider = make_provider(run.provider_config())
    table = marker_similarity_table(db, section.get("types") or db.cell_types, provider)
    run.emit(
        "metrics/marker-similarity.json",
        {
            "per_type": {t: {"intra": v[0], "inter": v[1]} for t, v in table.per_type.items()},
            "intra_mean": table.intra_mean,
            "inter_mean": table.inter_mean,
        },
    )


def cmd_marker_quiz(run: Runner) -> None:
    section = _require(run.config, "markers")
    db = MarkerDb.load(section["path"])
    quiz = build_marker_quiz(db, section.get("types") or db.cell_types, seed=run.seed())
    provider = run.chat_provider()
    score, chosen = run_marker_quiz(quiz, provider)
    run.emit(
        "metrics/marker-quiz.json",
        {
            "score": score,
            "questions": len(quiz.questions),
            "formatted": f"{score}/{len(quiz.questions)}",
            "chosen": chosen,
        },
    )


def _display_cell(doc: dict, key: str) -> str:
    display = doc.get("display", {})
    if key in display:
        return display[key]
    value = doc.get(key)
    return "" if value is None else f"{value:.3f}"


def cmd_report(run: Runner) -> None:
    metrics_dir = run.path("metrics")
    lines = ["# Evaluation report", ""]

    available = {}
    for variant, _ in ABLATION_TABLE_COLUMNS:
        matches = sorted(metrics_dir.parent.glob(f"metrics/{variant}*.json"))
        matches = [m for m in matches if not m.name.startswith("cluster-")]
        if matches:
            with open(matches[0], encoding="utf-8") as fh:
                available[variant] = json.load(fh)
    if available:
        columns = [(v, h) for v, h in ABLATION_TABLE_COLUMNS if v in available]
        lines.append("## Ablation sweep (zero-shot 10-NN)")
        lines.append("")
        lines.append("| Metric | " + " | ".join(h for _, h in columns) + " |")
        lines.append("|" + "---|" * (len(columns) + 1))
        for key, row_name in METRIC_ROWS:
            cells = [_display_cell(available[v], key) for v, _ in columns]
            lines.append(f"| {row_name} | " + " | ".join(cells) + " |")
        lines.append("")

    fusion_path = metrics_dir.parent / "metrics" / "fusion.json"
    if fusion_path.exists():
        with open(fusion_path, encoding="utf-8") as fh:
            fusion = json.load(fh)
        if "aggregate" in fusion:
            # one row of Mean (Std) cells, metric names as columns
            names = [n for n in ("accuracy", "macro_precision", "macro_recall", "macro_f1")
                     if n in fusion["aggregate"]]
            lines.append("## Fusion classifier (mean over seeds)")
            lines.append("")
            lines.append("| Model | " + " | ".join(names) + " |")
            lines.append("|" + "---|" * (len(names) + 1))
            cells = [fusion["aggregate"][n]["formatted"] for n in names]
            lines.append("| fusion | " + " | ".join(cells) + " |")
            lines.append("")

    rerank_path = metrics_dir.parent / "metrics" / "rerank.json"
    if rerank_path.exists():
        with open(rerank_path, encoding="utf-8") as fh:
            rerank = json.load(fh)
        lines.append("## Rerank accuracy")
        lines.append("")
        lines.append(f"Accuracy: {rerank['formatted']}")
        lines.append("")

    run.emit("report.md", "\n".join(lines))


COMMANDS = {
    "ingest": cmd_ingest,
    "sentences": cmd_sentences,
    "ablate": cmd_ablate,
    "embed": cmd_embed,
    "knn-eval": cmd_knn_eval,
    "cluster-eval": cmd_cluster_eval,
    "train-head": cmd_train_head,
    "train-fusion": cmd_train_fusion,
    "rerank": cmd_rerank,
    "lime": cmd_lime,
    "marker-sim": cmd_marker_sim,
    "marker-quiz": cmd_marker_quiz,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellsense",
        description="Cell-sentence evaluation pipeline",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--out", default=None, help="output directory (default: config 'out')")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--provider", default=None,
                        help="chat provider: http, identity-stub, or oracle-stub")
    parser.add_argument("--store-raw", action="store_true",
                        help="persist raw request/response text in manifests")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        out_dir = Path(args.out or config.get("out") or "cellsense-out")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run = Runner(config, out_dir, args)
    started = time.time()
    try:
        COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CellsenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        run.write_manifest(args.command, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
