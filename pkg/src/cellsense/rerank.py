"""Generative-LLM pipelines: zero-shot classification over a label list,
candidate reranking, and the marker-matching quiz.

Prompts are byte-deterministic, versioned templates. Responses are
constrained by a JSON schema whose enum lists the allowed answers; invalid
replies retry and then fall back to the first candidate, never aborting a
run. Ground truth is never rendered into a request: answer keys and test
labels stay on this side of the wire.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .corpus import CellSentence, Dataset
from .embed import DEFAULT_PROMPT_PREFIX
from .errors import (
    DuplicateLabel,
    EmptySentence,
    ProviderFailureRate,
    TransportError,
)
from .evalcore import sample_std

TEMPLATE_VERSION = "v1"

_CLASSIFY_TEMPLATE = """\
You are an expert in single-cell transcriptomics.
{sentence}
Candidate cell types:
{options}
Choose the single most likely cell type for this cell from the candidates above.
Reply with JSON of the form {{"cell_type": "..."}}."""

_RERANK_TEMPLATE = """\
You are an expert in single-cell transcriptomics.
{sentence}
A single-cell foundation model ranked these candidate cell types from most to least likely:
{options}
Choose the single most likely cell type for this cell from the candidates above.
If you are uncertain, choose the first candidate.
Reply with JSON of the form {{"cell_type": "..."}}."""

_QUIZ_TEMPLATE = """\
You are an expert in cell biology.
The gene {gene} is the top marker gene of one cell type.
Exactly one of the following lists contains the other marker genes of that same cell type:
{options}
Reply with JSON of the form {{"list_index": <number>}}."""


@dataclass(frozen=True)
class PromptSpec:
    template_id: str  # classify | rerank | marker_quiz
    version: str
    text: str
    allowed_labels: tuple[str, ...]
    meta: dict = field(default_factory=dict, compare=False)


@dataclass
class ChatProviderConfig:
    endpoint: str
    model_id: str
    temperature: float = 0.0
    auth_env: str = "CELLSENSE_CHAT_KEY"
    max_retries: int = 3
    retry_base_delay: float = 1.0
    schema_mode: bool = True

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class LlmAnswer:
    label: str
    fallback_used: bool
    raw: str | None = None


@dataclass
class CellRerankRecord:
    cell_id: str
    knn_top3: tuple[str, ...]
    llm_choice: str | None
    final_label: str
    fallback_used: bool
    true_label: str  # stored locally for audit, never sent


@dataclass
class RerankRun:
    run_index: int
    records: list[CellRerankRecord]
    accuracy: float


@dataclass
class RerankAggregate:
    runs: list[RerankRun]
    subset: list[str]
    mean_accuracy: float
    std_accuracy: float | None  # omitted for a single run

    def formatted(self) -> str:
        if self.std_accuracy is None:
            return f"{self.mean_accuracy:.3f}"
        std = self.std_accuracy
        return f"{self.mean_accuracy:.3f} ({'0.000' if std == 0 else f'{std:.2g}'})"


def _single_line(text: str) -> str:
    return " ".join(text.replace("\r", "\n").split("\n")).strip()


def render_sentence(sentence: CellSentence, prefix: str = DEFAULT_PROMPT_PREFIX) -> str:
    return prefix + " ".join(sentence.genes)


def build_classify_prompt(
    sentence: CellSentence,
    all_labels,
    prefix: str = DEFAULT_PROMPT_PREFIX,
) -> PromptSpec:
    """Zero-shot classification prompt: the cell sentence plus every label
    from the train set, sorted lexicographically for determinism."""
    labels = list(all_labels)
    if not labels:
        raise ValueError("label list must be non-empty")
    if len(set(labels)) != len(labels):
        seen: set[str] = set()
        dup = next(l for l in labels if l in seen or seen.add(l))
        raise DuplicateLabel(dup)
    if sentence.is_empty:
        raise EmptySentence(sentence.cell_id)
    ordered = sorted(labels)
    options = "\n".join(f"- {_single_line(lab)}" for lab in ordered)
    text = _CLASSIFY_TEMPLATE.format(sentence=render_sentence(sentence, prefix), options=options)
    return PromptSpec(
        template_id="classify",
        version=TEMPLATE_VERSION,
        text=text,
        allowed_labels=tuple(ordered),
        meta={"cell_id": sentence.cell_id},
    )


def build_rerank_prompt(
    sentence: CellSentence,
    top3,
    prefix: str = DEFAULT_PROMPT_PREFIX,
) -> PromptSpec:
    """Reranking prompt: candidates stay in upstream rank order, and the model
    is told to take the first one when uncertain."""
    candidates = list(top3)
    if not 1 <= len(candidates) <= 3:
        raise ValueError(f"need 1..3 candidates, got {len(candidates)}")
    if len(set(candidates)) != len(candidates):
        seen: set[str] = set()
        dup = next(c for c in candidates if c in seen or seen.add(c))
        raise DuplicateLabel(dup)
    if sentence.is_empty:
        raise EmptySentence(sentence.cell_id)
    options = "\n".join(f"{i + 1}. {_single_line(c)}" for i, c in enumerate(candidates))
    text = _RERANK_TEMPLATE.format(sentence=render_sentence(sentence, prefix), options=options)
    return PromptSpec(
        template_id="rerank",
        version=TEMPLATE_VERSION,
        text=text,
        allowed_labels=tuple(candidates),
        meta={"cell_id": sentence.cell_id},
    )


def response_schema(prompt: PromptSpec) -> dict:
    """JSON schema constraining the reply to one allowed answer."""
    if prompt.template_id == "marker_quiz":
        return {
            "name": "marker_quiz_answer",
            "schema": {
                "type": "object",
                "properties": {
                    "list_index": {"type": "integer", "enum": [int(x) for x in prompt.allowed_labels]}
                },
                "required": ["list_index"],
                "additionalProperties": False,
            },
        }
    return {
        "name": "cell_type_answer",
        "schema": {
            "type": "object",
            "properties": {"cell_type": {"type": "string", "enum": list(prompt.allowed_labels)}},
            "required": ["cell_type"],
            "additionalProperties": False,
        },
    }


class HttpChatProvider:
    """Chat-completions client implementing the structured-output protocol."""

    def __init__(
        self,
        config: ChatProviderConfig,
        session: requests.Session | None = None,
        api_key: str | None = None,
    ):
        self.config = config
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

    def build_request(self, prompt: PromptSpec) -> dict:
        body = {
            "model": self.config.model_id,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt.text}],
        }
        if self.config.schema_mode:
            body["response_format"] = {
                "type": "json_schema",
                "json_schema": response_schema(prompt),
            }
        return body

    def complete(self, prompt: PromptSpec) -> str:
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        body = self.build_request(prompt)
        delay = self.config.retry_base_delay
        last_err: Exception | None = None
        for attempt in range(self.config.max_retries):
            try:
                self.request_count += 1
                resp = self.session.post(url, json=body, headers=self._headers(), timeout=120)
            except requests.RequestException as exc:
                last_err = exc
                resp = None
            if resp is not None:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (KeyError, IndexError, TypeError, ValueError) as exc:
                        raise TransportError(f"malformed chat response: {exc}")
                if resp.status_code != 429 and resp.status_code < 500:
                    raise TransportError(f"chat endpoint returned {resp.status_code}")
                last_err = TransportError(f"status {resp.status_code}")
            if attempt + 1 < self.config.max_retries:
                time.sleep(delay)
                delay *= 2
        raise TransportError(f"chat request failed after retries: {last_err}")


class StubChatProvider:
    """In-process provider for tests and desk runs: answer_fn(prompt) -> reply."""

    def __init__(self, answer_fn):
        self.answer_fn = answer_fn
        self.request_count = 0

    def complete(self, prompt: PromptSpec) -> str:
        self.request_count += 1
        return self.answer_fn(prompt)


def identity_stub() -> StubChatProvider:
    """Always answers the first candidate: reranking becomes a no-op."""
    return StubChatProvider(
        lambda p: json.dumps({"cell_type": p.allowed_labels[0]})
    )


def oracle_stub(truth_by_cell: dict[str, str]) -> StubChatProvider:
    """Answers the true label whenever it is among the candidates.

    Test-only upper bound: turns rerank accuracy into top-k containment.
    """

    def answer(prompt: PromptSpec) -> str:
        truth = truth_by_cell.get(prompt.meta.get("cell_id", ""))
        label = truth if truth in prompt.allowed_labels else prompt.allowed_labels[0]
        return json.dumps({"cell_type": label})

    return StubChatProvider(answer)


def _parse_label(raw: str, key: str = "cell_type") -> str | None:
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, TypeError):
        return None
    value = obj.get(key) if isinstance(obj, dict) else None
    return value if isinstance(value, (str, int)) else None


def classify_with_llm(provider, prompt: PromptSpec, max_retries: int = 3) -> LlmAnswer:
    """Ask the provider for a label, validating against the allowed set.

    A reply outside the allowed set retries; exhausting retries falls back to
    the first allowed label with fallback_used set. Transport failures
    propagate.
    """
    last_raw: str | None = None
    for _ in range(max_retries):
        raw = provider.complete(prompt)
        last_raw = raw
        label = _parse_label(raw)
        if label is not None and str(label) in prompt.allowed_labels:
            return LlmAnswer(label=str(label), fallback_used=False, raw=raw)
    return LlmAnswer(label=prompt.allowed_labels[0], fallback_used=True, raw=last_raw)


def select_subset(test_ids, subset_size: int, seed: int) -> list[str]:
    """Seeded uniform sample without replacement; stable across providers."""
    ordered = sorted(test_ids)
    rng = np.random.default_rng(seed)
    take = min(subset_size, len(ordered))
    chosen = rng.choice(len(ordered), size=take, replace=False)
    return [ordered[i] for i in sorted(chosen)]


def run_rerank_experiment(
    dataset: Dataset,
    sentences: dict[str, CellSentence],
    top3_by_cell: dict[str, list[str]],
    provider,
    subset_size: int = 100,
    runs: int = 3,
    seed: int = 0,
    prefix: str = DEFAULT_PROMPT_PREFIX,
    max_failure_rate: float = 0.2,
    manifest_path=None,
    store_raw: bool = False,
) -> RerankAggregate:
    """Score the rerank pipeline on a fixed seeded subset of the test split.

    The same cells are used for every run and every provider; runs differ
    only through provider stochasticity. Per-cell provenance is appended to
    ``manifest_path`` (request/response SHA-256 digests; raw text only with
    ``store_raw``). A provider transport-failure rate above
    ``max_failure_rate`` aborts.
    """
    labels = dataset.labels_by_id()
    test_ids = [cid for cid in top3_by_cell if dataset.split and dataset.split.get(cid) == "test"]
    if not test_ids:
        test_ids = list(top3_by_cell)
    subset = select_subset(test_ids, subset_size, seed)

    manifest = open(manifest_path, "a", encoding="utf-8") if manifest_path else None
    try:
        all_runs: list[RerankRun] = []
        failures = 0
        total_calls = 0
        for run_index in range(runs):
            records: list[CellRerankRecord] = []
            correct = 0
            for cell_id in subset:
                top3 = list(top3_by_cell[cell_id])
                prompt = build_rerank_prompt(sentences[cell_id], top3, prefix=prefix)
                total_calls += 1
                try:
                    answer = classify_with_llm(provider, prompt)
                except TransportError:
                    failures += 1
                    answer = LlmAnswer(label=top3[0], fallback_used=True, raw=None)
                record = CellRerankRecord(
                    cell_id=cell_id,
                    knn_top3=tuple(top3),
                    llm_choice=None if answer.fallback_used else answer.label,
                    final_label=answer.label,
                    fallback_used=answer.fallback_used,
                    true_label=labels[cell_id],
                )
                records.append(record)
                if record.final_label == record.true_label:
                    correct += 1
                if manifest is not None:
                    entry = {
                        "run": run_index,
                        "cell_id": cell_id,
                        "top3": top3,
                        "final_label": record.final_label,
                        "fallback_used": record.fallback_used,
                        "request_sha256": hashlib.sha256(prompt.text.encode()).hexdigest(),
                        "response_sha256": hashlib.sha256(
                            (answer.raw or "").encode()
                        ).hexdigest(),
                    }
                    if store_raw:
                        entry["request_raw"] = prompt.text
                        entry["response_raw"] = answer.raw
                    manifest.write(json.dumps(entry) + "\n")
            all_runs.append(
                RerankRun(run_index=run_index, records=records, accuracy=correct / len(subset))
            )
        if total_calls and failures / total_calls > max_failure_rate:
            raise ProviderFailureRate(failures, total_calls, max_failure_rate)
    finally:
        if manifest is not None:
            manifest.close()

    accuracies = [r.accuracy for r in all_runs]
    return RerankAggregate(
        runs=all_runs,
        subset=subset,
        mean_accuracy=float(np.mean(accuracies)),
        std_accuracy=sample_std(accuracies) if len(accuracies) >= 2 else None,
    )


@dataclass
class MarkerQuiz:
    """Matching quiz: hidden top markers vs shuffled remaining-marker lists.

    ``questions[i]`` is the hidden top gene of some cell type;
    ``option_lists`` holds every type's remaining four markers in shuffled
    presentation order; ``answer_key[i]`` is the index of the matching list.
    Cell-type names appear nowhere in the presentation.
    """

    questions: list[str]
    option_lists: list[tuple[str, ...]]
    answer_key: list[int]
    cell_types: list[str]  # question order, local only


def build_marker_quiz(markerdb, cell_types, seed: int = 0) -> MarkerQuiz:
    """Withhold each type's top marker and shuffle the remaining-4 lists.

    Types with fewer than 5 ranked markers are excluded with a warning.
    """
    import warnings

    kept_types: list[str] = []
    hidden: list[str] = []
    remaining: list[tuple[str, ...]] = []
    for cell_type in cell_types:
        markers = markerdb.markers_for(cell_type)
        if len(markers) < 5:
            warnings.warn(
                f"cell type {cell_type!r} has {len(markers)} markers, needs 5; excluded"
            )
            continue
        top5 = markers[:5]
        kept_types.append(cell_type)
        hidden.append(top5[0])
        remaining.append(tuple(top5[1:5]))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(kept_types))
    option_lists = [remaining[i] for i in order]
    position = {int(orig): pos for pos, orig in enumerate(order)}
    answer_key = [position[i] for i in range(len(kept_types))]
    return MarkerQuiz(
        questions=hidden,
        option_lists=option_lists,
        answer_key=answer_key,
        cell_types=kept_types,
    )


def build_quiz_prompt(quiz: MarkerQuiz, question: int) -> PromptSpec:
    options = "\n".join(
        f"{i}: {', '.join(genes)}" for i, genes in enumerate(quiz.option_lists)
    )
    text = _QUIZ_TEMPLATE.format(gene=quiz.questions[question], options=options)
    return PromptSpec(
        template_id="marker_quiz",
        version=TEMPLATE_VERSION,
        text=text,
        allowed_labels=tuple(str(i) for i in range(len(quiz.option_lists))),
        meta={"question": question},
    )


def score_quiz(responses, quiz: MarkerQuiz) -> int:
    """Count questions whose chosen list index matches the key.

    Out-of-range or malformed responses count as incorrect.
    """
    responses = list(responses)
    if len(responses) != len(quiz.questions):
        raise ValueError(
            f"need {len(quiz.questions)} responses, got {len(responses)}"
        )
    correct = 0
    for resp, key in zip(responses, quiz.answer_key):
        try:
            idx = int(resp)
        except (TypeError, ValueError):
            continue
        if idx == key:
            correct += 1
    return correct


def run_marker_quiz(quiz: MarkerQuiz, provider, max_retries: int = 3) -> tuple[int, list[int]]:
    """Ask the provider every question; returns (score, chosen indices)."""
    chosen: list[int] = []
    for i in range(len(quiz.questions)):
        prompt = build_quiz_prompt(quiz, i)
        raw_answers = []
        for _ in range(max_retries):
            raw = provider.complete(prompt)
            raw_answers.append(raw)
            value = _parse_label(raw, key="list_index")
            if value is not None and str(value) in prompt.allowed_labels:
                chosen.append(int(value))
                break
        else:
            chosen.append(0)
    return score_quiz(chosen, quiz), chosen
