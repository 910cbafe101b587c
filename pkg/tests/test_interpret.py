import json

import numpy as np
import pytest

from cellsense.corpus import CellSentence
from cellsense.embed import MockEmbedder, _token_coordinates, mock_config
from cellsense.errors import MixedMethods, NonFiniteScore, UnknownCellId
from cellsense.interpret import (
    AttributionRecord,
    LimeConfig,
    MarkerDb,
    aggregate_attributions,
    import_external_attributions,
    lime_attribution,
    marker_overlap,
    marker_similarity_table,
)


def distinct_coordinate_names(count, dim, seed=0, prefix="G"):
    """Gene names whose mock-embedding buckets never collide at this dim,
    so token presence can be read off the embedding exactly."""
    names, taken = [], set()
    i = 0
    while len(names) < count:
        name = f"{prefix}{i}"
        coord, _ = _token_coordinates(name, seed, dim)
        if coord not in taken:
            taken.add(coord)
            names.append(name)
        i += 1
    return names


class CoordinateReadout:
    """Test classifier: decodes token presence from mock embeddings by
    sign-aware coordinate lookup, then applies prob_fn(bits)."""

    label_order = ["neg", "pos"]

    def __init__(self, names, dim, seed, prob_fn):
        self.features = [_token_coordinates(n, seed, dim) for n in names]
        self.prob_fn = prob_fn

    def predict_proba(self, X):
        X = np.asarray(X)
        bits = np.stack(
            [np.where(sign * X[:, coord] > 1e-12, 1.0, 0.0) for coord, sign in self.features],
            axis=1,
        )
        p = np.asarray([self.prob_fn(row) for row in bits])
        return np.stack([1.0 - p, p], axis=1)


DIM = 2048


class TestLime:
    def _provider(self, seed=0):
        return MockEmbedder(mock_config(dim=DIM, seed=seed))

    def test_planted_single_gene_ranks_first(self):
        names = distinct_coordinate_names(20, DIM)
        planted = names[7]
        sentence = CellSentence("cell", tuple(names))
        provider = self._provider()
        classifier = CoordinateReadout(names, DIM, 0, lambda bits: bits[7])
        hits = 0
        for seed in range(20):
            record = lime_attribution(
                sentence, "pos", classifier, provider, LimeConfig(seed=seed)
            )
            top_gene = max(record.scores.items(), key=lambda kv: kv[1])[0]
            hits += top_gene == planted
        assert hits >= 19  # 95% of 20 trials

    def test_constant_classifier_zero_coefficients(self):
        names = distinct_coordinate_names(10, DIM)
        sentence = CellSentence("cell", tuple(names))
        classifier = CoordinateReadout(names, DIM, 0, lambda bits: 0.37)
        record = lime_attribution(sentence, "pos", classifier, self._provider(), LimeConfig(seed=1))
        assert max(abs(v) for v in record.scores.values()) < 1e-8

    def test_deterministic_given_seed(self):
        names = distinct_coordinate_names(12, DIM)
        sentence = CellSentence("cell", tuple(names))
        classifier = CoordinateReadout(names, DIM, 0, lambda bits: bits[0])
        a = lime_attribution(sentence, "pos", classifier, self._provider(), LimeConfig(seed=5))
        b = lime_attribution(sentence, "pos", classifier, self._provider(), LimeConfig(seed=5))
        assert a.scores == b.scores

    def test_linear_classifier_recovers_coefficients(self):
        rng = np.random.default_rng(0)
        names = distinct_coordinate_names(20, DIM)
        sentence = CellSentence("cell", tuple(names))
        provider = self._provider()
        correlations = []
        for trial in range(3):
            weights = rng.uniform(-1.0, 1.0, size=20) * 0.02
            classifier = CoordinateReadout(
                names, DIM, 0, lambda bits, w=weights: 0.5 + float(w @ bits)
            )
            record = lime_attribution(
                sentence, "pos", classifier, provider, LimeConfig(seed=trial)
            )
            fitted = np.array([record.scores[n] for n in names])
            correlations.append(np.corrcoef(fitted, weights)[0, 1])
        assert min(correlations) > 0.9

    def test_attribution_restricted_to_in_context_genes(self):
        from cellsense.ablate import TokenBudget

        names = distinct_coordinate_names(10, DIM)
        sentence = CellSentence("cell", tuple(names))
        config = mock_config(dim=DIM, seed=0, budget=TokenBudget(max_tokens=16, prefix_tokens=8))
        provider = MockEmbedder(config)  # fits 4 short genes
        classifier = CoordinateReadout(names, DIM, 0, lambda bits: bits[0])
        record = lime_attribution(sentence, "pos", classifier, provider, LimeConfig(seed=0))
        assert set(record.scores) <= set(names[:4])

    def test_too_few_context_genes_rejected(self):
        names = distinct_coordinate_names(1, DIM)
        sentence = CellSentence("cell", (names[0],))
        classifier = CoordinateReadout(names, DIM, 0, lambda bits: bits[0])
        with pytest.raises(ValueError, match="in-context"):
            lime_attribution(sentence, "pos", classifier, self._provider(), LimeConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LimeConfig(n_samples=5)
        with pytest.raises(ValueError):
            LimeConfig(drop_probability=0.0)
        with pytest.raises(ValueError):
            LimeConfig(l2_lambda=0.0)


class TestAggregation:
    def test_positive_filter_and_order(self):
        record = AttributionRecord("c", "Alpha", "lime", {"A": 2.0, "B": -1.0, "C": 0.5})
        assert aggregate_attributions([record]) == {"Alpha": ["A", "C"]}

    def test_opposite_scores_cancel(self):
        records = [
            AttributionRecord("c1", "Alpha", "lime", {"A": 1.0}),
            AttributionRecord("c2", "Alpha", "lime", {"A": -1.0}),
        ]
        assert aggregate_attributions(records) == {"Alpha": []}

    def test_cap_uses_first_cells_by_id(self):
        records = [
            AttributionRecord(f"c{i:02d}", "Alpha", "lime", {"A": 1.0 if i < 10 else -100.0})
            for i in range(12)
        ]
        with pytest.warns(UserWarning, match="12 cells"):
            top = aggregate_attributions(records, cap=10)
        assert top == {"Alpha": ["A"]}

    def test_mixed_methods_rejected(self):
        records = [
            AttributionRecord("c1", "Alpha", "lime", {"A": 1.0}),
            AttributionRecord("c2", "Alpha", "integrated_gradients", {"A": 1.0}),
        ]
        with pytest.raises(MixedMethods):
            aggregate_attributions(records)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        records = [
            AttributionRecord(f"c{i}", "T", "lime",
                              {f"G{j}": float(rng.normal()) for j in range(15)})
            for i in range(8)
        ]
        forward = aggregate_attributions(records)
        backward = aggregate_attributions(records[::-1])
        assert forward == backward

    def test_truncates_to_ten(self):
        scores = {f"G{i:02d}": float(20 - i) for i in range(15)}
        record = AttributionRecord("c", "T", "lime", scores)
        top = aggregate_attributions([record])
        assert len(top["T"]) == 10
        assert top["T"][0] == "G00"


class TestMarkerDb:
    def test_load_tsv(self, tmp_path):
        p = tmp_path / "markers.tsv"
        p.write_text("Alpha\tGCG\t1\nAlpha\tTTR\t2\nBeta\tINS\t1\n")
        db = MarkerDb.load(p)
        assert db.markers_for("Alpha") == ["GCG", "TTR"]
        assert db.markers_for("Beta") == ["INS"]
        assert "Alpha" in db and "Gamma" not in db

    def test_duplicate_rank_rejected(self):
        with pytest.raises(ValueError, match="duplicate marker ranks"):
            MarkerDb([("A", "G1", 1), ("A", "G2", 1)])

    def test_duplicate_gene_rejected(self):
        with pytest.raises(ValueError, match="duplicate marker genes"):
            MarkerDb([("A", "G1", 1), ("A", "G1", 2)])

    def test_bad_tsv_line(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("Alpha\tGCG\n")
        with pytest.raises(ValueError, match="3 tab-separated"):
            MarkerDb.load(p)


class TestMarkerOverlap:
    def _db(self):
        return MarkerDb(
            [("Alpha", "GCG", 1), ("Alpha", "TTR", 2), ("Alpha", "CRYBA2", 3),
             ("Beta", "INS", 1), ("Beta", "IAPP", 2)]
        )

    def test_consensus_markers(self):
        top = {
            "lime": {"Alpha": ["GCG", "TTR", "XXX"], "Beta": ["INS"]},
            "integrated_gradients": {"Alpha": ["GCG", "TTR", "YYY"], "Beta": ["IAPP"]},
        }
        report = marker_overlap(top, self._db())
        assert set(report.types["Alpha"].consensus) >= {"GCG", "TTR"}
        assert report.types["Beta"].consensus == []

    def test_empty_top_list(self):
        report = marker_overlap({"lime": {"Alpha": []}}, self._db())
        assert report.types["Alpha"].markers_by_method == {"lime": []}

    def test_non_marker_genes_excluded(self):
        report = marker_overlap({"lime": {"Alpha": ["XXX", "GCG"]}}, self._db())
        assert report.types["Alpha"].markers_by_method["lime"] == ["GCG"]

    def test_uncovered_type_reported(self):
        report = marker_overlap({"lime": {"Mystery": ["GCG"]}}, self._db())
        assert report.uncovered == ["Mystery"]
        assert "Mystery" not in report.types

    def test_consensus_symmetric_in_method_order(self):
        a = {"m1": {"Alpha": ["GCG", "TTR"]}, "m2": {"Alpha": ["TTR"]}}
        b = {"m2": {"Alpha": ["TTR"]}, "m1": {"Alpha": ["GCG", "TTR"]}}
        assert (
            marker_overlap(a, self._db()).types["Alpha"].consensus
            == marker_overlap(b, self._db()).types["Alpha"].consensus
        )


class ConstantProvider:
    def __init__(self, dim=16):
        self.dim = dim

    def embed_texts(self, texts):
        return np.ones((len(texts), self.dim))


class TestMarkerSimilarity:
    def test_identical_vectors_give_ones(self):
        db = MarkerDb(
            [("A", "G1", 1), ("A", "G2", 2), ("B", "H1", 1), ("B", "H2", 2)]
        )
        table = marker_similarity_table(db, ["A", "B"], ConstantProvider())
        assert table.intra_mean == 1.0
        assert table.inter_mean == 1.0

    def test_clustered_tokens_intra_above_inter(self):
        # marker names engineered to share a hash bucket within each type:
        # the first candidate fixes the type's (bucket, sign) target and the
        # remaining names are searched to match it, with targets distinct
        # across types
        dim = 64
        records = []
        taken = set()
        for cell_type in ("T0", "T1", "T2"):
            target = None
            found = []
            i = 0
            while len(found) < 5:
                name = f"{cell_type}M{i}"
                i += 1
                key = _token_coordinates(name, 0, dim)
                if target is None:
                    if key in taken:
                        continue
                    target = key
                    taken.add(key)
                if key == target:
                    found.append(name)
            records += [(cell_type, g, r + 1) for r, g in enumerate(found)]
        db = MarkerDb(records)
        provider = MockEmbedder(mock_config(dim=dim, seed=0))
        table = marker_similarity_table(db, ["T0", "T1", "T2"], provider)
        assert table.intra_mean > table.inter_mean
        assert table.intra_mean == pytest.approx(1.0, abs=1e-12)

    def test_type_with_single_marker_excluded(self):
        db = MarkerDb(
            [("A", "G1", 1), ("A", "G2", 2), ("B", "H1", 1), ("B", "H2", 2),
             ("Solo", "S1", 1)]
        )
        with pytest.warns(UserWarning, match="Solo"):
            table = marker_similarity_table(db, ["A", "B", "Solo"], ConstantProvider())
        assert set(table.per_type) == {"A", "B"}

    def test_needs_two_eligible_types(self):
        db = MarkerDb([("A", "G1", 1), ("A", "G2", 2)])
        with pytest.raises(ValueError):
            marker_similarity_table(db, ["A"], ConstantProvider())

    def test_invariant_to_marker_list_order(self):
        base = [("A", "G1", 1), ("A", "G2", 2), ("A", "G3", 3),
                ("B", "H1", 1), ("B", "H2", 2)]
        provider = MockEmbedder(mock_config(dim=64, seed=0))
        t1 = marker_similarity_table(MarkerDb(base), ["A", "B"], provider)
        t2 = marker_similarity_table(MarkerDb(base[::-1]), ["B", "A"], provider)
        assert t1.intra_mean == pytest.approx(t2.intra_mean, abs=1e-15)
        assert t1.inter_mean == pytest.approx(t2.inter_mean, abs=1e-15)


class TestImportExternal:
    def _write(self, tmp_path, lines):
        p = tmp_path / "attr.jsonl"
        p.write_text("\n".join(json.dumps(l) for l in lines) + "\n")
        return p

    def test_valid_records(self, tmp_path):
        p = self._write(
            tmp_path,
            [
                {"cell_id": "c1", "class": "Alpha", "method": "integrated_gradients",
                 "scores": {"GCG": 1.5}},
                {"cell_id": "c2", "class": "Beta", "method": "integrated_gradients",
                 "scores": {"INS": -0.5}},
            ],
        )
        records = import_external_attributions(p)
        assert len(records) == 2
        assert records[0].method == "integrated_gradients"

    def test_nan_score_rejected_with_line(self, tmp_path):
        p = tmp_path / "attr.jsonl"
        p.write_text(
            '{"cell_id": "c1", "class": "A", "method": "m", "scores": {"G": 1.0}}\n'
            '{"cell_id": "c2", "class": "A", "method": "m", "scores": {"G": NaN}}\n'
        )
        with pytest.raises(NonFiniteScore) as err:
            import_external_attributions(p)
        assert err.value.line == 2

    def test_unknown_cell_rejected(self, tmp_path):
        p = self._write(
            tmp_path, [{"cell_id": "ghost", "class": "A", "method": "m", "scores": {}}]
        )
        with pytest.raises(UnknownCellId):
            import_external_attributions(p, known_cells={"c1"})

    def test_mixed_methods_rejected(self, tmp_path):
        p = self._write(
            tmp_path,
            [
                {"cell_id": "c1", "class": "A", "method": "m1", "scores": {}},
                {"cell_id": "c2", "class": "A", "method": "m2", "scores": {}},
            ],
        )
        with pytest.raises(MixedMethods):
            import_external_attributions(p)

    def test_missing_field_rejected(self, tmp_path):
        p = self._write(tmp_path, [{"cell_id": "c1", "class": "A", "scores": {}}])
        with pytest.raises(ValueError, match="method"):
            import_external_attributions(p)

    def test_usable_alongside_native_records(self, tmp_path):
        p = self._write(
            tmp_path,
            [{"cell_id": "c1", "class": "Alpha", "method": "integrated_gradients",
              "scores": {"GCG": 2.0, "XXX": 1.0}}],
        )
        external = import_external_attributions(p)
        native = [AttributionRecord("c1", "Alpha", "lime", {"GCG": 1.0, "TTR": 0.5})]
        top = {
            "lime": aggregate_attributions(native),
            "integrated_gradients": aggregate_attributions(external),
        }
        db = MarkerDb([("Alpha", "GCG", 1), ("Alpha", "TTR", 2)])
        report = marker_overlap(top, db)
        assert report.types["Alpha"].consensus == ["GCG"]
