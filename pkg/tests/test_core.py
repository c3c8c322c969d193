import numpy as np
import pytest

from pemb import (
    BadConfig,
    DimensionMismatch,
    DuplicateId,
    EmbeddingSet,
    GaussianEmbedding,
    LengthMismatch,
    MatchTable,
    Modality,
    NonFiniteValue,
    OutOfRange,
    ShapeMismatch,
    UnknownId,
    make_embedding,
    uncertainty_mass,
)


class TestGaussianEmbedding:
    def test_basic_construction(self):
        e = make_embedding([1.0, 2.0], [0.0, np.log(2.0)])
        assert e.dim == 2
        np.testing.assert_allclose(e.var, [1.0, 2.0])

    def test_mass_is_variance_l1(self):
        e = make_embedding([0.0, 0.0, 0.0], np.log([0.5, 1.0, 2.5]))
        assert uncertainty_mass(e) == pytest.approx(4.0)

    def test_immutable(self):
        e = make_embedding([1.0], [0.0])
        with pytest.raises(ValueError):
            e.mu[0] = 7.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatch):
            make_embedding([1.0, 2.0], [0.0])

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteValue):
            make_embedding([np.nan], [0.0])

    def test_rejects_matrix(self):
        with pytest.raises(DimensionMismatch):
            make_embedding(np.zeros((2, 2)), np.zeros((2, 2)))


class TestEmbeddingSet:
    def test_from_embeddings(self):
        es = EmbeddingSet(
            ["a", "b"],
            [make_embedding([1, 2], [0, 0]), make_embedding([3, 4], [0, 0])],
        )
        assert len(es) == 2
        assert es.dim == 2
        np.testing.assert_array_equal(es.mu, [[1, 2], [3, 4]])
        assert es["b"].mu[0] == 3.0
        assert es.index_of("b") == 1

    def test_duplicate_ids(self):
        with pytest.raises(DuplicateId):
            EmbeddingSet(["a", "a"], mu=np.zeros((2, 1)), log_var=np.zeros((2, 1)))

    def test_unknown_id(self):
        es = EmbeddingSet(["a"], mu=np.zeros((1, 1)), log_var=np.zeros((1, 1)))
        with pytest.raises(UnknownId):
            es["nope"]

    def test_row_count_mismatch(self):
        with pytest.raises(LengthMismatch):
            EmbeddingSet(["a", "b", "c"], mu=np.zeros((2, 1)), log_var=np.zeros((2, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            EmbeddingSet(["a"], mu=np.zeros((1, 2)), log_var=np.zeros((1, 3)))

    def test_empty_needs_dim(self):
        with pytest.raises(DimensionMismatch):
            EmbeddingSet([], [])
        es = EmbeddingSet([], [], dim=3)
        assert len(es) == 0 and es.dim == 3

    def test_masses_vector(self):
        es = EmbeddingSet(
            ["a", "b"], mu=np.zeros((2, 2)), log_var=np.log([[1, 2], [3, 4]])
        )
        np.testing.assert_allclose(es.masses(), [3.0, 7.0])

    def test_iteration_order(self):
        es = EmbeddingSet(["a", "b"], mu=np.array([[1.0], [2.0]]), log_var=np.zeros((2, 1)))
        assert [e.mu[0] for e in es] == [1.0, 2.0]

    def test_arrays_are_frozen(self):
        es = EmbeddingSet(["a"], mu=np.ones((1, 2)), log_var=np.zeros((1, 2)))
        with pytest.raises(ValueError):
            es.mu[0, 0] = 9.0


class TestMeanOnlySet:
    # deterministic encoders emit no variance head; such sets still retrieve
    def test_construction_and_masses(self):
        es = EmbeddingSet(["a", "b"], mu=np.ones((2, 3)))
        assert not es.has_log_var
        np.testing.assert_array_equal(es.masses(), [0.0, 0.0])

    def test_variance_access_raises(self):
        es = EmbeddingSet(["a"], mu=np.ones((1, 3)))
        with pytest.raises(BadConfig):
            es.log_var
        with pytest.raises(BadConfig):
            es.var
        with pytest.raises(BadConfig):
            es["a"]

    def test_full_set_has_log_var(self):
        es = EmbeddingSet(["a"], mu=np.ones((1, 3)), log_var=np.zeros((1, 3)))
        assert es.has_log_var


class TestModality:
    def test_wire_round_trip(self):
        for m in Modality:
            assert Modality.from_wire(m.wire_value) is m

    def test_bad_code(self):
        with pytest.raises(OutOfRange):
            Modality.from_wire(3)


class TestMatchTable:
    def test_value_and_positives(self):
        t = MatchTable(
            ("q1", "q2"), ("g1", "g2", "g3"),
            {("q1", "g1"): 1.0, ("q1", "g2"): 0.3, ("q2", "g3"): 0.8},
        )
        assert t.value("q1", "g1") == 1.0
        assert t.value("q1", "g3") == 0.0
        assert t.positives("q1") == {"g1"}
        assert t.positives("q1", threshold=0.2) == {"g1", "g2"}

    def test_dense_layout(self):
        t = MatchTable(("q1",), ("g1", "g2"), {("q1", "g2"): 0.5})
        np.testing.assert_array_equal(t.dense(), [[0.0, 0.5]])
        np.testing.assert_array_equal(t.dense(gallery_ids=["g2", "g1"]), [[0.5, 0.0]])

    def test_unknown_reference(self):
        with pytest.raises(UnknownId):
            MatchTable(("q",), ("g",), {("q", "zzz"): 1.0})

    def test_range_check(self):
        with pytest.raises(OutOfRange):
            MatchTable(("q",), ("g",), {("q", "g"): 1.5})

    def test_duplicate_queries(self):
        with pytest.raises(DuplicateId):
            MatchTable(("q", "q"), ("g",), {})
