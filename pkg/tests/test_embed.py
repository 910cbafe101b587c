import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from cellsense.ablate import TokenBudget
from cellsense.corpus import CellSentence
from cellsense.embed import (
    EmbeddingStore,
    HttpEmbedder,
    MockEmbedder,
    ProviderConfig,
    StoreEmbedder,
    cosine,
    embed_batch,
    fnv1a64,
    mock_config,
    mock_embed,
    render_sentence_text,
)
from cellsense.errors import (
    DimMismatch,
    MissingEmbedding,
    NonFiniteValue,
    TransportError,
    ZeroVector,
)

from oracles import cosine_oracle


def sentence(tokens, cell_id="c1", variant="identity"):
    return CellSentence(cell_id=cell_id, genes=tuple(tokens), variant=variant)


class TestFnv:
    def test_known_vectors(self):
        # published FNV-1a 64-bit test values
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8


class TestCosine:
    def test_self_similarity(self):
        v = np.array([1.0, 2.0, 3.0])
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_closed_form(self):
        # 1/sqrt(2)
        assert cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(
            0.7071067811865475, abs=1e-15
        )

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVector):
            cosine(np.zeros(3), np.ones(3))

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            cosine(np.ones(3), np.ones(4))

    def test_matches_pure_python_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            u = rng.normal(size=8)
            v = rng.normal(size=8)
            assert cosine(u, v) == pytest.approx(cosine_oracle(u, v), abs=1e-12)


class TestMockEmbed:
    def test_deterministic(self):
        s = sentence(["GCG", "TTR", "INS"])
        a = mock_embed(s, 64, seed=3)
        b = mock_embed(s, 64, seed=3)
        assert np.array_equal(a, b)

    def test_identical_sentences_cosine_one(self):
        s = sentence(["GCG", "TTR"])
        assert cosine(mock_embed(s, 32, 0), mock_embed(s, 32, 0)) == 1.0

    def test_permutation_changes_vector(self):
        a = mock_embed(sentence(["GCG", "TTR", "INS"]), 64, 0)
        b = mock_embed(sentence(["INS", "TTR", "GCG"]), 64, 0)
        assert cosine(a, b) < 1.0

    def test_disjoint_token_sets_nearly_orthogonal(self):
        # single-coordinate hashing means a rare top-rank bucket collision
        # can spike one pair, so the smallness claim is about the measured
        # average over 100 random disjoint pairs
        values = []
        for trial in range(100):
            left = [f"L{trial}x{i}" for i in range(20)]
            right = [f"R{trial}x{i}" for i in range(20)]
            a = mock_embed(sentence(left), 256, 0)
            b = mock_embed(sentence(right), 256, 0)
            values.append(abs(cosine(a, b)))
        assert np.mean(values) < 0.3
        assert np.median(values) < 0.05

    def test_empty_sentence_zero_vector(self):
        assert not mock_embed(sentence([]), 16, 0).any()

    def test_unit_norm(self):
        v = mock_embed(sentence(["A", "B", "C"]), 32, 5)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)

    def test_small_dim_rejected(self):
        with pytest.raises(ValueError):
            mock_embed(sentence(["A"]), 4, 0)

    def test_seed_changes_vector(self):
        s = sentence(["GCG", "TTR", "INS", "SST"])
        assert cosine(mock_embed(s, 64, 0), mock_embed(s, 64, 1)) < 1.0


class TestStore:
    def test_round_trip_bitwise(self, tmp_path):
        store = EmbeddingStore("m", 8, normalized=True)
        rng = np.random.default_rng(0)
        vectors = {}
        for i in range(5):
            v = rng.normal(size=8)
            store.put(f"c{i}", "identity", v)
            vectors[f"c{i}"] = v
        p = tmp_path / "x.embs.jsonl"
        store.save(p)
        again = EmbeddingStore.load(p)
        assert again.model_id == "m" and again.dim == 8 and again.normalized
        for cid, v in vectors.items():
            assert np.array_equal(again.get(cid, "identity"), v)

    def test_missing_key(self):
        store = EmbeddingStore("m", 8)
        with pytest.raises(MissingEmbedding):
            store.get("nope", "identity")

    def test_put_validates_dim_and_finiteness(self):
        store = EmbeddingStore("m", 4)
        with pytest.raises(DimMismatch):
            store.put("c", "identity", np.ones(5))
        with pytest.raises(NonFiniteValue):
            store.put("c", "identity", np.array([1.0, np.nan, 0.0, 0.0]))

    def test_load_rejects_duplicate_keys(self, tmp_path):
        p = tmp_path / "dup.embs.jsonl"
        header = json.dumps({"model_id": "m", "dim": 2, "normalized": False})
        entry = json.dumps({"key": "c|identity", "vector": [1.0, 2.0]})
        p.write_text(f"{header}\n{entry}\n{entry}\n")
        with pytest.raises(ValueError, match="duplicate key"):
            EmbeddingStore.load(p)

    def test_load_rejects_wrong_dim(self, tmp_path):
        p = tmp_path / "bad.embs.jsonl"
        header = json.dumps({"model_id": "m", "dim": 3, "normalized": False})
        entry = json.dumps({"key": "c|identity", "vector": [1.0, 2.0]})
        p.write_text(f"{header}\n{entry}\n")
        with pytest.raises(DimMismatch):
            EmbeddingStore.load(p)

    def test_variant_key_round_trip(self, tmp_path):
        store = EmbeddingStore("m", 8)
        store.put("cell|weird", "shuffle_all-s1", np.ones(8))
        p = tmp_path / "k.embs.jsonl"
        store.save(p)
        again = EmbeddingStore.load(p)
        assert ("cell|weird", "shuffle_all-s1") in again


class TestMockProvider:
    def test_same_sentence_bitwise_identical(self):
        provider = MockEmbedder(mock_config(dim=64, seed=0))
        s = sentence(["GCG", "TTR"])
        out = provider.embed_batch([s, s])
        assert np.array_equal(out[0], out[1])

    def test_budget_truncates_context(self):
        budget = TokenBudget(max_tokens=12, prefix_tokens=8)  # fits 2 short genes
        provider = MockEmbedder(mock_config(dim=64, seed=0, budget=budget))
        full = sentence(["AA", "BB", "CC", "DD"])
        clipped = sentence(["AA", "BB"])
        out = provider.embed_batch([full, clipped])
        assert np.array_equal(out[0], out[1])

    def test_write_through_store(self):
        store = EmbeddingStore("mock-rank-bow-64", 64, normalized=True)
        provider = MockEmbedder(mock_config(dim=64, seed=0), store=store)
        s = sentence(["GCG"])
        first = provider.embed_batch([s])
        assert ("c1", "identity") in store
        again = provider.embed_batch([s])
        assert np.array_equal(first, again)

    def test_empty_batch_rejected(self):
        provider = MockEmbedder(mock_config())
        with pytest.raises(ValueError):
            provider.embed_batch([])

    def test_embed_texts_bare_tokens(self):
        provider = MockEmbedder(mock_config(dim=64, seed=0))
        out = provider.embed_texts(["GCG", "GCG"])
        assert np.array_equal(out[0], out[1])
        assert out[0].any()


class TestStoreProvider:
    def test_lookup_and_missing(self):
        store = EmbeddingStore("m", 8)
        store.put("c1", "identity", np.ones(8))
        provider = StoreEmbedder(ProviderConfig(kind="store", model_id="m", dim=8), store)
        out = provider.embed_batch([sentence(["A"])])
        assert out.shape == (1, 8)
        with pytest.raises(MissingEmbedding):
            provider.embed_batch([sentence(["A"], cell_id="absent")])

    def test_header_dim_checked(self):
        store = EmbeddingStore("m", 8)
        with pytest.raises(DimMismatch):
            StoreEmbedder(ProviderConfig(kind="store", model_id="m", dim=16), store)


class _EmbeddingsHandler(BaseHTTPRequestHandler):
    state = None  # injected

    def log_message(self, *args):
        pass

    def do_POST(self):
        state = self.state
        state["requests"] += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        state["bodies"].append(body)
        state["auth"].append(self.headers.get("Authorization"))
        if state["fail_remaining"] > 0:
            state["fail_remaining"] -= 1
            self.send_response(state["fail_status"])
            self.end_headers()
            return
        if state.get("malformed_reply"):
            payload = json.dumps({"unexpected": "shape"}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
            return
        inputs = body["input"]
        dim = state["dim"]
        data = []
        for i, text in enumerate(inputs):
            vec = [float((hash(text) % 97) + j) for j in range(dim)]
            if state.get("break_dim"):
                vec = vec[:-1]
            if state.get("inject_nan"):
                vec[0] = float("nan")
            data.append({"index": i, "embedding": vec})
        payload = json.dumps({"data": data}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture
def embed_server():
    state = {
        "requests": 0,
        "bodies": [],
        "auth": [],
        "fail_remaining": 0,
        "fail_status": 500,
        "dim": 8,
    }
    handler = type("Handler", (_EmbeddingsHandler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", state
    server.shutdown()


def http_config(endpoint, **overrides):
    defaults = dict(
        kind="http",
        model_id="test-model",
        dim=8,
        endpoint=endpoint,
        batch_size=2,
        max_inflight=2,
        max_retries=3,
        retry_base_delay=0.01,
    )
    defaults.update(overrides)
    return ProviderConfig(**defaults)


class TestHttpProvider:
    def test_batching_and_order(self, embed_server):
        endpoint, state = embed_server
        provider = HttpEmbedder(http_config(endpoint), api_key="k")
        sentences = [sentence([f"G{i}"], cell_id=f"c{i}") for i in range(5)]
        out = provider.embed_batch(sentences)
        assert out.shape == (5, 8)
        assert state["requests"] == 3  # batches of 2, 2, 1
        texts = [t for b in state["bodies"] for t in b["input"]]
        assert len(texts) == 5
        assert state["auth"][0] == "Bearer k"
        assert all(b["model"] == "test-model" for b in state["bodies"])

    def test_prompt_prefix_and_budget_in_request(self, embed_server):
        endpoint, state = embed_server
        budget = TokenBudget(max_tokens=12, prefix_tokens=8)
        provider = HttpEmbedder(http_config(endpoint, budget=budget, prompt_prefix="PFX: "))
        provider.embed_batch([sentence(["AA", "BB", "CC"])])
        assert state["bodies"][0]["input"] == ["PFX: AA BB"]

    def test_retry_on_transient_failure(self, embed_server):
        endpoint, state = embed_server
        state["fail_remaining"] = 2
        provider = HttpEmbedder(http_config(endpoint))
        out = provider.embed_batch([sentence(["A"])])
        assert out.shape == (1, 8)
        assert state["requests"] == 3

    def test_retry_on_429(self, embed_server):
        endpoint, state = embed_server
        state["fail_remaining"] = 1
        state["fail_status"] = 429
        provider = HttpEmbedder(http_config(endpoint))
        provider.embed_batch([sentence(["A"])])
        assert state["requests"] == 2

    def test_exhausted_retries_raise(self, embed_server):
        endpoint, state = embed_server
        state["fail_remaining"] = 99
        provider = HttpEmbedder(http_config(endpoint))
        with pytest.raises(TransportError):
            provider.embed_batch([sentence(["A"])])
        assert state["requests"] == 3

    def test_client_error_does_not_retry(self, embed_server):
        endpoint, state = embed_server
        state["fail_remaining"] = 99
        state["fail_status"] = 400
        provider = HttpEmbedder(http_config(endpoint))
        with pytest.raises(TransportError):
            provider.embed_batch([sentence(["A"])])
        assert state["requests"] == 1

    def test_dim_mismatch_detected(self, embed_server):
        endpoint, state = embed_server
        state["break_dim"] = True
        provider = HttpEmbedder(http_config(endpoint))
        with pytest.raises(DimMismatch):
            provider.embed_batch([sentence(["A"])])

    def test_non_finite_detected(self, embed_server):
        endpoint, state = embed_server
        state["inject_nan"] = True
        provider = HttpEmbedder(http_config(endpoint))
        with pytest.raises(NonFiniteValue):
            provider.embed_batch([sentence(["A"])])

    def test_malformed_response_is_transport_error(self, embed_server):
        endpoint, state = embed_server
        state["malformed_reply"] = True
        provider = HttpEmbedder(http_config(endpoint))
        with pytest.raises(TransportError, match="malformed"):
            provider.embed_batch([sentence(["A"])])

    def test_cache_coherence_zero_new_calls(self, embed_server):
        endpoint, state = embed_server
        cache = EmbeddingStore("test-model", 8)
        provider = HttpEmbedder(http_config(endpoint), cache=cache)
        sentences = [sentence([f"G{i}"], cell_id=f"c{i}") for i in range(4)]
        first = provider.embed_batch(sentences)
        calls_after_first = state["requests"]
        second = provider.embed_batch(sentences)
        assert state["requests"] == calls_after_first
        assert np.array_equal(first, second)

    def test_embed_batch_accepts_config(self, embed_server):
        endpoint, _ = embed_server
        out = embed_batch(http_config(endpoint), [sentence(["A"])])
        assert out.shape == (1, 8)


class TestRenderText:
    def test_no_budget_keeps_all_tokens(self):
        s = sentence(["AA", "BB", "CC"])
        assert render_sentence_text(s, "P: ", budget=None) == "P: AA BB CC"

    def test_budget_truncates(self):
        s = sentence(["AA", "BB", "CC"])
        budget = TokenBudget(max_tokens=12, prefix_tokens=8)
        assert render_sentence_text(s, "P: ", budget=budget) == "P: AA BB"
