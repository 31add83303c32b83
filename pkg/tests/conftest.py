import numpy as np
import pytest

from tastepipe import embed, ingest, synth


@pytest.fixture(scope="session")
def cluster_setup():
    """Two planted clusters (20 songs each), sessions 95% within-cluster,
    trained with a fixed seed. Shared by the embedding-quality tests."""
    cfg = synth.SynthConfig(
        seed=11,
        n_users=10,
        n_artists=4,
        songs_per_artist=10,
        n_genres=2,
        within_genre_session_prob=0.95,
        months=4,
        sessions_per_user_month=12,
        mean_session_length=7,
        short_stream_prob=0.0,
        travel_prob=0.2,
    )
    events, catalog, truth = synth.generate_sessions(cfg)
    kept, _ = ingest.filter_streams(events, 60)
    sessions_by_user = ingest.sessionize(kept)
    sessions = [s.track_ids() for u in sorted(sessions_by_user) for s in sessions_by_user[u]]
    corpus = embed.build_vocabulary(sessions, min_count=2)
    train_cfg = embed.S2VConfig(dimension=16, window=3, epochs=15, negative=10, seed=3)
    space = embed.train_s2v(corpus, train_cfg)
    return space, catalog, corpus, train_cfg


def cluster_separation(space: embed.EmbeddingSpace, track_genre: dict[str, str]) -> tuple[float, float]:
    """Mean within-cluster and cross-cluster cosine over vocabulary tracks."""
    unit = space.vectors.astype(np.float64)
    unit = unit / np.linalg.norm(unit, axis=1, keepdims=True)
    genres = np.array([track_genre[t] for t in space.track_list()])
    sims = unit @ unit.T
    same = (genres[:, None] == genres[None, :]) & ~np.eye(len(genres), dtype=bool)
    diff = genres[:, None] != genres[None, :]
    return float(sims[same].mean()), float(sims[diff].mean())
