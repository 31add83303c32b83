import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cluster_separation
from tastepipe import embed
from tastepipe.embed import (
    CorpusTooSparseError,
    DegenerateVectorError,
    MemoryBudgetError,
    S2VConfig,
    TrainingDivergedError,
    artist_similarity_report,
    build_vocabulary,
    cosine_distance,
    cosine_similarity,
    nearest_songs,
    negative_sampling_gradients,
    negative_sampling_loss,
    train_s2v,
)


class TestVocabulary:
    def test_min_count_two_drops_singletons(self):
        corpus = build_vocabulary([["a", "b"], ["a"]], min_count=2)
        assert corpus.track_ids == ["a"]
        assert [list(s) for s in corpus.sessions] == [[0], [0]]
        assert corpus.frequencies.tolist() == [2]

    def test_min_count_one_keeps_everything(self):
        corpus = build_vocabulary([["a", "b"], ["c"]], min_count=1)
        assert sorted(corpus.track_ids) == ["a", "b", "c"]

    def test_track_appearing_once_excluded(self):
        corpus = build_vocabulary([["x", "y", "x"]], min_count=2)
        assert corpus.track_ids == ["x"]

    def test_all_pruned_is_fatal(self):
        with pytest.raises(CorpusTooSparseError, match="sparse"):
            build_vocabulary([["a"], ["b"]], min_count=2)

    def test_empty_corpus_is_fatal(self):
        with pytest.raises(CorpusTooSparseError):
            build_vocabulary([], min_count=1)

    def test_frequency_table_sums_to_token_count(self):
        corpus = build_vocabulary([["a", "b", "a"], ["b", "c", "c", "c"]], min_count=2)
        assert corpus.frequencies.sum() == corpus.token_count()

    @given(
        st.lists(
            st.lists(st.sampled_from("abcdef"), min_size=1, max_size=6),
            min_size=1, max_size=10,
        ),
        st.integers(min_value=1, max_value=3),
    )
    @settings(max_examples=50)
    def test_pruning_monotonicity(self, sessions, m):
        try:
            low = set(build_vocabulary(sessions, m).track_ids)
        except CorpusTooSparseError:
            low = set()
        try:
            high = set(build_vocabulary(sessions, m + 1).track_ids)
        except CorpusTooSparseError:
            high = set()
        assert high <= low


class TestCosine:
    def test_identical_vectors(self):
        v = np.array([1.0, 2.0, 3.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0)
        assert cosine_distance(v, v) == pytest.approx(0.0)

    def test_orthogonal_unit_vectors(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)
        assert cosine_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(1.0)

    def test_opposite_vectors(self):
        v = np.array([0.5, -2.0])
        assert cosine_similarity(v, -v) == pytest.approx(-1.0)
        assert cosine_distance(v, -v) == pytest.approx(2.0)

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateVectorError):
            cosine_similarity(np.zeros(3), np.ones(3))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            cosine_similarity(np.ones(2), np.ones(3))

    @given(st.lists(st.floats(min_value=-10, max_value=10), min_size=2, max_size=6),
           st.floats(min_value=0.01, max_value=100.0))
    @settings(max_examples=50)
    def test_scale_invariance(self, values, c):
        v = np.asarray(values)
        if np.linalg.norm(v) == 0:
            return
        w = np.roll(v, 1) + 1.0
        if np.linalg.norm(w) == 0:
            return
        assert cosine_similarity(c * v, w) == pytest.approx(cosine_similarity(v, w), abs=1e-12)


class TestGradients:
    def _toy(self, seed=0):
        rng = np.random.default_rng(seed)
        inputs = rng.normal(size=(3, 4)) * 0.3
        outputs = rng.normal(size=(3, 4)) * 0.3
        return inputs, outputs

    @pytest.mark.parametrize("context,target,noise", [
        ([0, 2], 1, [0]),
        ([0], 1, [2, 0]),
        ([0, 2, 0], 1, [2]),  # duplicated context entry
    ])
    def test_matches_central_differences(self, context, target, noise):
        inputs, outputs = self._toy()
        grad_in, grad_out = negative_sampling_gradients(inputs, outputs, context, target, noise)
        h = 1e-6
        for mat, grad in ((inputs, grad_in), (outputs, grad_out)):
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    orig = mat[i, j]
                    mat[i, j] = orig + h
                    up = negative_sampling_loss(inputs, outputs, context, target, noise)
                    mat[i, j] = orig - h
                    down = negative_sampling_loss(inputs, outputs, context, target, noise)
                    mat[i, j] = orig
                    fd = (up - down) / (2 * h)
                    scale = max(abs(fd), abs(grad[i, j]), 1e-12)
                    assert abs(fd - grad[i, j]) / scale <= 1e-4

    def test_training_step_is_gradient_descent(self):
        inputs, outputs = self._toy(seed=4)
        context, target, noise = np.array([0, 2]), 1, np.array([2, 0])
        grad_in, grad_out = negative_sampling_gradients(inputs, outputs, context, target, noise)
        lr = 0.05
        stepped_in, stepped_out = inputs.copy(), outputs.copy()
        embed._cbow_step(stepped_in, stepped_out, context, target, noise, lr)
        np.testing.assert_allclose(stepped_in, inputs - lr * grad_in, atol=1e-12)
        np.testing.assert_allclose(stepped_out, outputs - lr * grad_out, atol=1e-12)


class TestTraining:
    def test_same_seed_bitwise_identical(self):
        corpus = build_vocabulary([["a", "b", "c", "a"], ["b", "c", "a", "b"]] * 5, min_count=2)
        cfg = S2VConfig(dimension=8, window=2, epochs=3, negative=4, seed=9)
        first = train_s2v(corpus, cfg)
        second = train_s2v(corpus, cfg)
        assert np.array_equal(first.vectors, second.vectors)
        assert first.loss_trace == second.loss_trace

    def test_loss_decreases(self, cluster_setup):
        space, *_ = cluster_setup
        assert space.loss_trace[-1] < space.loss_trace[0]

    def test_cluster_separation(self, cluster_setup):
        space, catalog, _, _ = cluster_setup
        within, cross = cluster_separation(space, catalog.track_genre)
        assert within - cross >= 0.2

    def test_multi_worker_preserves_separation(self, cluster_setup):
        _, catalog, corpus, train_cfg = cluster_setup
        cfg = S2VConfig(dimension=16, window=3, epochs=8, negative=10, seed=3, workers=2)
        space = train_s2v(corpus, cfg)
        within, cross = cluster_separation(space, catalog.track_genre)
        assert within - cross >= 0.15

    def test_every_vector_sized_and_nonzero(self, cluster_setup):
        space, *_ = cluster_setup
        assert space.vectors.shape == (len(space.vocabulary), space.dimension)
        assert space.degenerate_tracks == []
        assert np.all(np.linalg.norm(space.vectors, axis=1) > 0)

    def test_memory_budget(self):
        corpus = build_vocabulary([["a", "b"] * 3], min_count=2)
        cfg = S2VConfig(dimension=64, epochs=1, memory_budget_bytes=100)
        with pytest.raises(MemoryBudgetError, match="GiB"):
            train_s2v(corpus, cfg)

    def test_nan_loss_is_fatal(self, monkeypatch):
        corpus = build_vocabulary([list("abcdef") * 2], min_count=2)

        def poisoned_step(*args, **kwargs):
            return float("nan")

        monkeypatch.setattr(embed, "_cbow_step", poisoned_step)
        with pytest.raises(TrainingDivergedError, match="epoch|position"):
            train_s2v(corpus, S2VConfig(dimension=4, window=1, epochs=1, negative=2, seed=1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            S2VConfig(window=0).validate()
        with pytest.raises(ValueError):
            S2VConfig(dimension=1).validate()


class TestNearest:
    def _tiny_space(self):
        vectors = np.array(
            [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.9, 0.1]], dtype=np.float32
        )
        vocab = {"q": 0, "near_a": 1, "far": 2, "near_b": 3}
        return embed.EmbeddingSpace(2, vocab, vectors, S2VConfig(dimension=2))

    def test_full_ranking(self):
        space = self._tiny_space()
        ranking = nearest_songs(space, "q", k=3)
        assert [t for t, _ in ranking] == ["near_a", "near_b", "far"]

    def test_tie_broken_by_vocabulary_index(self):
        space = self._tiny_space()
        top = nearest_songs(space, "q", k=2)
        assert [t for t, _ in top] == ["near_a", "near_b"]  # equal vectors, lower index first

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError):
            nearest_songs(self._tiny_space(), "q", k=0)

    def test_unknown_track(self):
        with pytest.raises(KeyError):
            nearest_songs(self._tiny_space(), "missing", k=1)

    def test_excludes_query(self):
        ranking = nearest_songs(self._tiny_space(), "q", k=10)
        assert all(t != "q" for t, _ in ranking)

    def test_rankings_scale_invariant(self, cluster_setup):
        space, *_ = cluster_setup
        track = space.track_list()[0]
        baseline = [t for t, _ in nearest_songs(space, track, k=5)]
        rng = np.random.default_rng(1)
        scaled = embed.EmbeddingSpace(
            space.dimension,
            space.vocabulary,
            space.vectors * rng.uniform(0.5, 4.0, size=(len(space.vocabulary), 1)).astype(np.float32),
            space.training_config,
        )
        assert [t for t, _ in nearest_songs(scaled, track, k=5)] == baseline

    def test_planted_cluster_top5_same_cluster(self, cluster_setup):
        space, catalog, _, _ = cluster_setup
        query = space.track_list()[0]
        own = catalog.track_genre[query]
        top = nearest_songs(space, query, k=5)
        assert all(catalog.track_genre[t] == own for t, _ in top)


class TestArtistReport:
    def test_identical_within_orthogonal_across(self):
        vectors = np.array(
            [[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1]],
            dtype=np.float32,
        )
        vocab = {f"t{i}": i for i in range(6)}
        space = embed.EmbeddingSpace(3, vocab, vectors, S2VConfig(dimension=3))
        mapping = {"t0": "a", "t1": "a", "t2": "b", "t3": "b", "t4": "c", "t5": "c"}
        report = artist_similarity_report(space, mapping)
        assert report.within_mean == pytest.approx(1.0)
        assert report.cross_mean == pytest.approx(0.0)
        assert report.n_artists == 3
        assert report.t_statistic > 0

    def test_insufficient_artists(self):
        vectors = np.eye(3, dtype=np.float32)
        space = embed.EmbeddingSpace(3, {"a": 0, "b": 1, "c": 2}, vectors, S2VConfig(dimension=3))
        with pytest.raises(ValueError, match="artists"):
            artist_similarity_report(space, {"a": "x", "b": "x", "c": "y"})

    def test_planted_clusters_within_exceeds_cross(self, cluster_setup):
        space, catalog, _, _ = cluster_setup
        report = artist_similarity_report(space, catalog.track_artist)
        assert report.within_mean - report.cross_mean >= 0.15
        assert report.t_statistic > 0
