"""Session-based song embeddings: CBOW with negative sampling, plus similarity queries.

The trainer slides a context window over each listening session (sessions
are never bridged), averages the context song vectors, and pushes that
average toward the target song and away from sampled noise songs. Noise
songs are drawn from the unigram distribution raised to the 3/4 power and
re-drawn whenever they collide with the target or with a song inside the
current context window.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

logger = logging.getLogger(__name__)


class CorpusTooSparseError(RuntimeError):
    pass


class DegenerateVectorError(ValueError):
    """A cosine operation received a zero-norm vector."""


class TrainingDivergedError(RuntimeError):
    pass


class MemoryBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class S2VConfig:
    dimension: int = 300
    window: int = 3
    min_count: int = 2
    epochs: int = 100
    negative: int = 20
    lr_start: float = 0.025
    lr_end: float = 1e-4
    noise_exponent: float = 0.75
    seed: int = 1
    workers: int = 1
    memory_budget_bytes: int = 4 << 30

    def validate(self) -> None:
        if self.dimension < 2:
            raise ValueError("dimension must be >= 2")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.negative < 1:
            raise ValueError("negative must be >= 1")
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class TrainingCorpus:
    sessions: list[np.ndarray]  # int32 vocabulary indices, one array per session
    track_ids: list[str]  # vocabulary index -> track id
    frequencies: np.ndarray  # per-index corpus counts; sums to token count

    @property
    def vocab_size(self) -> int:
        return len(self.track_ids)

    def token_count(self) -> int:
        return int(sum(len(s) for s in self.sessions))


@dataclass
class EmbeddingSpace:
    dimension: int
    vocabulary: dict[str, int]  # track id -> row index
    vectors: np.ndarray  # (vocab, dimension) float32
    training_config: S2VConfig
    loss_trace: list[float] = field(default_factory=list)
    degenerate_tracks: list[str] = field(default_factory=list)

    def vector(self, track_id: str) -> np.ndarray:
        idx = self.vocabulary.get(track_id)
        if idx is None:
            raise KeyError(f"track not in vocabulary: {track_id}")
        return self.vectors[idx]

    def __contains__(self, track_id: str) -> bool:
        return track_id in self.vocabulary

    def track_list(self) -> list[str]:
        ordered = sorted(self.vocabulary.items(), key=lambda kv: kv[1])
        return [t for t, _ in ordered]


def build_vocabulary(sessions: Iterable[Sequence[str]], min_count: int = 2) -> TrainingCorpus:
    """Prune tracks below min_count, drop emptied sessions, index the rest.

    Vocabulary order is descending corpus frequency, ties broken by track id,
    so corpora are reproducible across runs.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    materialized = [list(s) for s in sessions]
    if not materialized:
        raise CorpusTooSparseError("corpus too sparse: no sessions")
    counts: dict[str, int] = {}
    for session in materialized:
        for track in session:
            counts[track] = counts.get(track, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    if not kept:
        raise CorpusTooSparseError("corpus too sparse: every track fell below min_count")
    index = {t: i for i, t in enumerate(kept)}

    pruned: list[np.ndarray] = []
    frequencies = np.zeros(len(kept), dtype=np.int64)
    for session in materialized:
        ids = [index[t] for t in session if t in index]
        if not ids:
            continue
        arr = np.asarray(ids, dtype=np.int32)
        pruned.append(arr)
        np.add.at(frequencies, arr, 1)
    return TrainingCorpus(sessions=pruned, track_ids=kept, frequencies=frequencies)


def _noise_cdf(frequencies: np.ndarray, exponent: float) -> np.ndarray:
    weights = np.asarray(frequencies, dtype=np.float64) ** exponent
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def _draw_negatives(
    rng: np.random.Generator,
    cdf: np.ndarray,
    n: int,
    forbidden: set[int],
    max_attempts_per_draw: int = 64,
) -> np.ndarray:
    """Sample up to n distinct noise indices outside the forbidden set.

    On a tiny vocabulary the forbidden set can exhaust the candidates, in
    which case fewer than n indices come back.
    """
    drawn: list[int] = []
    seen = set(forbidden)
    for _ in range(n):
        for _ in range(max_attempts_per_draw):
            idx = int(np.searchsorted(cdf, rng.random(), side="right"))
            if idx not in seen:
                drawn.append(idx)
                seen.add(idx)
                break
    return np.asarray(drawn, dtype=np.int64)


def negative_sampling_loss(
    input_vectors: np.ndarray,
    output_vectors: np.ndarray,
    context: Sequence[int],
    target: int,
    noise: Sequence[int],
) -> float:
    """Objective for one CBOW example: -log s(u_t.h) - sum_k log s(-u_k.h),
    where h is the mean of the context input vectors."""
    h = input_vectors[np.asarray(context)].mean(axis=0)
    s_target = float(output_vectors[target] @ h)
    s_noise = output_vectors[np.asarray(noise)] @ h if len(noise) else np.zeros(0)
    loss = -np.log(expit(s_target))
    if len(noise):
        loss -= np.log(expit(-s_noise)).sum()
    return float(loss)


def negative_sampling_gradients(
    input_vectors: np.ndarray,
    output_vectors: np.ndarray,
    context: Sequence[int],
    target: int,
    noise: Sequence[int],
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of negative_sampling_loss w.r.t. both matrices.

    Returns dense (vocab, dim) arrays; meant for verification at toy scale,
    the trainer applies the same math in place.
    """
    context = np.asarray(context)
    noise = np.asarray(noise, dtype=np.int64)
    h = input_vectors[context].mean(axis=0)

    grad_in = np.zeros_like(input_vectors)
    grad_out = np.zeros_like(output_vectors)

    g_target = expit(float(output_vectors[target] @ h)) - 1.0  # dL/ds_target
    grad_out[target] += g_target * h
    grad_h = g_target * output_vectors[target]
    for k in noise:
        g_k = expit(float(output_vectors[k] @ h))
        grad_out[k] += g_k * h
        grad_h = grad_h + g_k * output_vectors[k]
    for c in context:
        grad_in[c] += grad_h / len(context)
    return grad_in, grad_out


def _cbow_step(
    input_vectors: np.ndarray,
    output_vectors: np.ndarray,
    context: np.ndarray,
    target: int,
    noise: np.ndarray,
    lr: float,
) -> float:
    """One in-place stochastic gradient step; returns the example loss."""
    h = input_vectors[context].mean(axis=0)
    idx = np.empty(len(noise) + 1, dtype=np.int64)
    idx[0] = target
    idx[1:] = noise
    out = output_vectors[idx]  # (k+1, dim); indices are distinct by construction
    score = out @ h
    f = expit(score)
    g = np.empty_like(f)
    g[0] = 1.0 - f[0]
    g[1:] = -f[1:]
    # gradient descent: move along -(dL/du) = g * h and -(dL/dh) = g @ out
    output_vectors[idx] += np.outer(g * lr, h)
    delta_h = (g @ out) * (lr / len(context))
    for c in context:
        input_vectors[c] += delta_h

    loss = -np.log(max(f[0], 1e-12))
    if len(noise):
        loss -= np.log(np.maximum(1.0 - f[1:], 1e-12)).sum()
    return float(loss)


def _context_indices(session: np.ndarray, pos: int, window: int) -> np.ndarray:
    lo = max(0, pos - window)
    return np.concatenate((session[lo:pos], session[pos + 1 : pos + 1 + window]))


def _train_shard(
    sessions: list[np.ndarray],
    input_vectors: np.ndarray,
    output_vectors: np.ndarray,
    cdf: np.ndarray,
    config: S2VConfig,
    rng: np.random.Generator,
    progress: list[int],
    total_positions: int,
    losses: list[float],
) -> None:
    lr_span = config.lr_end - config.lr_start
    shard_loss = 0.0
    for session in sessions:
        if len(session) < 2:
            progress[0] += len(session)
            continue
        for pos in range(len(session)):
            frac = min(1.0, progress[0] / max(1, total_positions))
            lr = config.lr_start + lr_span * frac
            context = _context_indices(session, pos, config.window)
            forbidden = set(int(i) for i in context)
            forbidden.add(int(session[pos]))
            noise = _draw_negatives(rng, cdf, config.negative, forbidden)
            if len(noise):
                shard_loss += _cbow_step(
                    input_vectors, output_vectors, context, int(session[pos]), noise, lr
                )
            progress[0] += 1
        if not np.isfinite(shard_loss):
            raise TrainingDivergedError(
                f"loss became non-finite near position {progress[0]}"
            )
    losses.append(shard_loss)


def train_s2v(corpus: TrainingCorpus, config: S2VConfig) -> EmbeddingSpace:
    """Train the embedding space over the session corpus.

    Single-worker training is fully deterministic for a fixed seed.
    Multi-worker training shares the weight matrices without locks, so exact
    values vary run to run while the learned structure is preserved.
    """
    config.validate()
    if not corpus.sessions:
        raise CorpusTooSparseError("corpus too sparse: no sessions")
    vocab_size = corpus.vocab_size
    needed = 2 * vocab_size * config.dimension * 8
    if needed > config.memory_budget_bytes:
        raise MemoryBudgetError(
            f"weight matrices need ~{needed / (1 << 30):.2f} GiB "
            f"(vocab {vocab_size} x dim {config.dimension}), "
            f"budget is {config.memory_budget_bytes / (1 << 30):.2f} GiB"
        )

    rng = np.random.Generator(np.random.Philox(config.seed))
    input_vectors = (rng.random((vocab_size, config.dimension)) - 0.5) / config.dimension
    output_vectors = np.zeros((vocab_size, config.dimension))
    cdf = _noise_cdf(corpus.frequencies, config.noise_exponent)

    positions_per_epoch = sum(len(s) for s in corpus.sessions)
    total_positions = config.epochs * positions_per_epoch
    progress = [0]
    loss_trace: list[float] = []

    if config.workers == 1:
        for epoch in range(config.epochs):
            losses: list[float] = []
            _train_shard(
                corpus.sessions, input_vectors, output_vectors, cdf, config, rng,
                progress, total_positions, losses,
            )
            epoch_loss = losses[0] / max(1, positions_per_epoch)
            if not np.isfinite(epoch_loss):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}")
            loss_trace.append(epoch_loss)
    else:
        worker_rngs = rng.spawn(config.workers)
        shards = [corpus.sessions[w :: config.workers] for w in range(config.workers)]
        for epoch in range(config.epochs):
            losses = []
            threads = [
                threading.Thread(
                    target=_train_shard,
                    args=(shards[w], input_vectors, output_vectors, cdf, config,
                          worker_rngs[w], progress, total_positions, losses),
                )
                for w in range(config.workers)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            epoch_loss = sum(losses) / max(1, positions_per_epoch)
            if not np.isfinite(epoch_loss):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}")
            loss_trace.append(epoch_loss)

    vectors = input_vectors.astype(np.float32)
    vocabulary = {t: i for i, t in enumerate(corpus.track_ids)}
    norms = np.linalg.norm(vectors, axis=1)
    degenerate = [corpus.track_ids[i] for i in np.nonzero(norms == 0.0)[0]]
    if degenerate:
        logger.warning("%d tracks ended training with all-zero vectors", len(degenerate))
    return EmbeddingSpace(
        dimension=config.dimension,
        vocabulary=vocabulary,
        vectors=vectors,
        training_config=config,
        loss_trace=loss_trace,
        degenerate_tracks=degenerate,
    )


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - cosine_similarity(a, b)


def _unit_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(matrix, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    return matrix / safe[:, None], norms


def nearest_songs(space: EmbeddingSpace, track_id: str, k: int) -> list[tuple[str, float]]:
    """Exact top-k most similar vocabulary tracks, excluding the query.

    Ties are broken by vocabulary index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query_idx = space.vocabulary.get(track_id)
    if query_idx is None:
        raise KeyError(f"track not in vocabulary: {track_id}")
    matrix = space.vectors.astype(np.float64)
    unit, norms = _unit_rows(matrix)
    if norms[query_idx] == 0.0:
        raise DegenerateVectorError(f"query track has a zero vector: {track_id}")
    sims = unit @ unit[query_idx]
    sims[query_idx] = -np.inf
    sims[norms == 0.0] = -np.inf
    order = np.lexsort((np.arange(len(sims)), -sims))
    tracks = space.track_list()
    top = order[: min(k, len(sims) - 1)]
    return [(tracks[i], float(sims[i])) for i in top if np.isfinite(sims[i])]


@dataclass(frozen=True)
class ArtistSimilarityReport:
    within_mean: float
    cross_mean: float
    t_statistic: float
    p_value: float
    n_artists: int


def artist_similarity_report(
    space: EmbeddingSpace, track_to_artist: dict[str, str]
) -> ArtistSimilarityReport:
    """Mean within-artist vs cross-artist cosine similarity with a paired t-test.

    Within-artist: mean pairwise similarity among an artist's tracks,
    averaged over artists with at least two vocabulary tracks. Cross-artist:
    mean similarity between those tracks and every other mapped track,
    averaged the same way. The t statistic is the paired test over artists
    on (within - cross).
    """
    matrix = space.vectors.astype(np.float64)
    unit, norms = _unit_rows(matrix)
    by_artist: dict[str, list[int]] = {}
    for track, idx in space.vocabulary.items():
        artist = track_to_artist.get(track)
        if artist is None or norms[idx] == 0.0:
            continue
        by_artist.setdefault(artist, []).append(idx)

    eligible = {a: idxs for a, idxs in by_artist.items() if len(idxs) >= 2}
    if len(eligible) < 2:
        raise ValueError(
            f"need >= 2 artists with >= 2 vocabulary tracks each, got {len(eligible)}"
        )

    all_mapped = sorted(i for idxs in by_artist.values() for i in idxs)
    all_unit = unit[all_mapped]
    owner = np.empty(len(all_mapped), dtype=object)
    pos_of = {idx: p for p, idx in enumerate(all_mapped)}
    for artist, idxs in by_artist.items():
        for idx in idxs:
            owner[pos_of[idx]] = artist

    within: list[float] = []
    cross: list[float] = []
    for artist in sorted(eligible):
        idxs = eligible[artist]
        u = unit[idxs]
        gram = u @ u.T
        n = len(idxs)
        pair_sum = (gram.sum() - np.trace(gram)) / 2.0
        within.append(pair_sum / (n * (n - 1) / 2.0))
        others = all_unit[owner != artist]
        cross.append(float((u @ others.T).mean()))

    diffs = np.asarray(within) - np.asarray(cross)
    if np.ptp(diffs) == 0.0:  # zero-variance differences degenerate the t-test
        t_stat = 0.0 if diffs[0] == 0.0 else np.copysign(np.inf, diffs[0])
        p_value = 1.0 if diffs[0] == 0.0 else 0.0
    else:
        t_stat, p_value = stats.ttest_rel(within, cross)
    return ArtistSimilarityReport(
        within_mean=float(np.mean(within)),
        cross_mean=float(np.mean(cross)),
        t_statistic=float(t_stat),
        p_value=float(p_value),
        n_artists=len(eligible),
    )
