"""Aggregate song vectors into user, city, country, and global taste vectors.

Every taste vector is a centroid (arithmetic mean) of song vectors at some
scope. User vectors weight songs by stream instance by default: a song
played ten times pulls the centroid ten times as hard. City vectors average
their home users' overall vectors with equal weight, and country vectors
average their cities' vectors with equal weight, so a one-listener town
counts as much as a metropolis within its country.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .embed import EmbeddingSpace
from .ingest import StreamEvent

logger = logging.getLogger(__name__)


class Scope(str, Enum):
    USER_MONTH = "user_month"
    USER_WEEK = "user_week"  # weekly analogue used by the DiD panel
    USER_CITY_MONTH = "user_city_month"
    USER_HOME = "user_home"
    USER_OVERALL = "user_overall"  # full-window user centroid feeding city vectors
    CITY = "city"
    COUNTRY = "country"
    GLOBAL_LOO = "global_loo"


@dataclass
class TasteVector:
    scope: Scope
    key: tuple[str, ...]
    vector: np.ndarray
    support: int


@dataclass
class HomeAssignment:
    user_id: str
    year: int
    home_city_id: str
    evidence: dict[str, int]  # city -> stream count


def centroid(vectors: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """(Weighted) arithmetic mean of equal-dimension vectors, un-normalized."""
    if len(vectors) == 0:
        raise ValueError("centroid of an empty vector list")
    stacked = np.asarray(vectors, dtype=np.float64)
    if stacked.ndim != 2:
        raise ValueError("dimension mismatch among input vectors")
    if weights is None:
        return stacked.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(vectors):
        raise ValueError("one weight per vector required")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return (stacked * w[:, None]).sum(axis=0) / w.sum()


def is_degenerate(vector: np.ndarray) -> bool:
    return float(np.linalg.norm(vector)) == 0.0


def infer_home_city(events: Iterable[StreamEvent], year: int) -> HomeAssignment:
    """Home = the city with the most streams that year.

    Ties break by total listening duration, then lexicographic city id.
    """
    counts: dict[str, int] = {}
    durations: dict[str, int] = {}
    user_ids = set()
    for e in events:
        if e.utc_date().year != year:
            continue
        user_ids.add(e.user_id)
        counts[e.city_id] = counts.get(e.city_id, 0) + 1
        durations[e.city_id] = durations.get(e.city_id, 0) + e.duration
    if not counts:
        raise ValueError(f"no streams in year {year}")
    if len(user_ids) > 1:
        raise ValueError(f"expected one user's events, got {sorted(user_ids)}")
    home = min(counts, key=lambda c: (-counts[c], -durations[c], c))
    return HomeAssignment(
        user_id=next(iter(user_ids)), year=year, home_city_id=home, evidence=counts
    )


def assign_homes(events: Iterable[StreamEvent]) -> dict[tuple[str, int], HomeAssignment]:
    """Year-by-year home assignment for every user in the stream."""
    by_user_year: dict[tuple[str, int], list[StreamEvent]] = {}
    for e in events:
        by_user_year.setdefault((e.user_id, e.utc_date().year), []).append(e)
    return {
        key: infer_home_city(evts, key[1]) for key, evts in sorted(by_user_year.items())
    }


def primary_home(assignments: dict[tuple[str, int], HomeAssignment]) -> dict[str, str]:
    """One home city per user over the whole window: the home of the year
    with the most streams; earlier years win ties."""
    best: dict[str, tuple[int, int, str]] = {}
    for (user, year), ha in assignments.items():
        streams = sum(ha.evidence.values())
        current = best.get(user)
        if current is None or (-streams, year) < (-current[0], current[1]):
            best[user] = (streams, year, ha.home_city_id)
    return {user: home for user, (_, _, home) in best.items()}


@dataclass
class VectorBuildStats:
    out_of_vocabulary: int = 0
    degenerate: int = 0


def _build_keyed_vectors(
    events: Iterable[StreamEvent],
    space: EmbeddingSpace,
    key_fn: Callable[[StreamEvent], tuple[str, ...]],
    scope: Scope,
    weighting: str = "stream",
    min_support: int = 1,
    stats: VectorBuildStats | None = None,
) -> dict[tuple[str, ...], TasteVector]:
    if weighting not in ("stream", "unique"):
        raise ValueError(f"weighting must be 'stream' or 'unique', got {weighting!r}")
    stats = stats if stats is not None else VectorBuildStats()
    dim = space.dimension
    sums: dict[tuple[str, ...], np.ndarray] = {}
    counts: dict[tuple[str, ...], int] = {}
    seen_tracks: dict[tuple[str, ...], set[str]] = {}
    for e in events:
        idx = space.vocabulary.get(e.track_id)
        if idx is None:
            stats.out_of_vocabulary += 1
            continue
        key = key_fn(e)
        if weighting == "unique":
            seen = seen_tracks.setdefault(key, set())
            if e.track_id in seen:
                continue
            seen.add(e.track_id)
        if key not in sums:
            sums[key] = np.zeros(dim, dtype=np.float64)
            counts[key] = 0
        sums[key] += space.vectors[idx].astype(np.float64)
        counts[key] += 1

    out: dict[tuple[str, ...], TasteVector] = {}
    for key in sorted(sums):
        n = counts[key]
        if n < min_support:
            continue
        vec = sums[key] / n
        if is_degenerate(vec):
            stats.degenerate += 1
            continue
        out[key] = TasteVector(scope=scope, key=key, vector=vec, support=n)
    return out


def build_user_month_vectors(
    events: Iterable[StreamEvent],
    space: EmbeddingSpace,
    weighting: str = "stream",
    min_support: int = 1,
    stats: VectorBuildStats | None = None,
) -> dict[tuple[str, str], TasteVector]:
    """Centroid per (user, month) over that month's vocabulary streams."""
    return _build_keyed_vectors(
        events, space, lambda e: (e.user_id, e.month_key()), Scope.USER_MONTH,
        weighting, min_support, stats,
    )


def build_user_week_vectors(
    events: Iterable[StreamEvent],
    space: EmbeddingSpace,
    weighting: str = "stream",
    min_support: int = 1,
    stats: VectorBuildStats | None = None,
) -> dict[tuple[str, str], TasteVector]:
    """Weekly analogue of build_user_month_vectors (ISO weeks, UTC)."""
    return _build_keyed_vectors(
        events, space, lambda e: (e.user_id, e.week_key()), Scope.USER_WEEK,
        weighting, min_support, stats,
    )


def build_user_city_month_vectors(
    events: Iterable[StreamEvent],
    space: EmbeddingSpace,
    weighting: str = "stream",
    min_support: int = 1,
    stats: VectorBuildStats | None = None,
) -> dict[tuple[str, str, str], TasteVector]:
    """Centroid per (user, city, month): only streams geolocated in that city."""
    return _build_keyed_vectors(
        events, space, lambda e: (e.user_id, e.city_id, e.month_key()),
        Scope.USER_CITY_MONTH, weighting, min_support, stats,
    )


def build_user_city_month_vector(
    events: Iterable[StreamEvent],
    space: EmbeddingSpace,
    user_id: str,
    city_id: str,
    month: str,
    weighting: str = "stream",
) -> TasteVector | None:
    """Single-key variant of build_user_city_month_vectors; None when the
    user played nothing from the vocabulary in that city-month."""
    built = build_user_city_month_vectors(
        (e for e in events if e.user_id == user_id and e.city_id == city_id),
        space,
        weighting,
    )
    return built.get((user_id, city_id, month))


def build_user_overall_vectors(
    events: Iterable[StreamEvent],
    space: EmbeddingSpace,
    weighting: str = "stream",
    stats: VectorBuildStats | None = None,
) -> dict[str, TasteVector]:
    """Full-window centroid per user, over every vocabulary stream."""
    built = _build_keyed_vectors(
        events, space, lambda e: (e.user_id,), Scope.USER_MONTH, weighting, 1, stats
    )
    return {key[0]: tv for key, tv in built.items()}


def build_home_vectors(
    events: Iterable[StreamEvent],
    space: EmbeddingSpace,
    home_by_user: dict[str, str],
    weighting: str = "stream",
    stats: VectorBuildStats | None = None,
) -> dict[str, TasteVector]:
    """Home-taste vector per user: centroid of full-window streams geolocated
    in the user's home city."""
    home_events = (e for e in events if home_by_user.get(e.user_id) == e.city_id)
    built = _build_keyed_vectors(
        home_events, space, lambda e: (e.user_id,), Scope.USER_HOME, weighting, 1, stats
    )
    return {key[0]: tv for key, tv in built.items()}


def build_location_vectors(
    user_overall: dict[str, TasteVector],
    home_by_user: dict[str, str],
    city_to_country: dict[str, str],
) -> tuple[dict[str, TasteVector], dict[str, TasteVector]]:
    """City vectors (mean over home users' overall vectors) and country
    vectors (mean over the country's city vectors). Cities without home
    users simply have no vector; downstream metrics must tolerate absence.
    """
    by_city: dict[str, list[np.ndarray]] = {}
    for user, tv in user_overall.items():
        home = home_by_user.get(user)
        if home is None:
            continue
        by_city.setdefault(home, []).append(tv.vector)

    city_vectors: dict[str, TasteVector] = {}
    for city in sorted(by_city):
        vec = centroid(by_city[city])
        if is_degenerate(vec):
            logger.warning("city %s has a degenerate taste vector; skipped", city)
            continue
        city_vectors[city] = TasteVector(
            scope=Scope.CITY, key=(city,), vector=vec, support=len(by_city[city])
        )

    by_country: dict[str, list[np.ndarray]] = {}
    for city, tv in city_vectors.items():
        country = city_to_country.get(city)
        if country is None:
            logger.warning("city %s missing from gazetteer; skipped for country vector", city)
            continue
        by_country.setdefault(country, []).append(tv.vector)

    country_vectors: dict[str, TasteVector] = {}
    for country in sorted(by_country):
        vec = centroid(by_country[country])
        if is_degenerate(vec):
            continue
        country_vectors[country] = TasteVector(
            scope=Scope.COUNTRY, key=(country,), vector=vec, support=len(by_country[country])
        )
    return city_vectors, country_vectors


class MonthlyLooMeans:
    """Leave-one-out global taste per month, from per-user month vectors.

    loo(user, month) = mean of all *other* users' month vectors, computed
    from the month sum so each query is O(dim).
    """

    def __init__(self, user_month_vectors: dict[tuple[str, str], TasteVector]):
        self._sums: dict[str, np.ndarray] = {}
        self._counts: dict[str, int] = {}
        self._vectors = user_month_vectors
        for (user, month), tv in user_month_vectors.items():
            if month not in self._sums:
                self._sums[month] = np.zeros_like(tv.vector, dtype=np.float64)
                self._counts[month] = 0
            self._sums[month] += tv.vector
            self._counts[month] += 1

    def users_in_month(self, month: str) -> int:
        return self._counts.get(month, 0)

    def loo(self, user: str, month: str) -> np.ndarray:
        n = self._counts.get(month, 0)
        if n < 2:
            raise ValueError(f"need >= 2 users with vectors in {month}, got {n}")
        tv = self._vectors.get((user, month))
        if tv is None:
            raise KeyError(f"no vector for user {user} in {month}")
        return (self._sums[month] - tv.vector) / (n - 1)


def build_global_vector_loo(
    user_month_vectors: dict[tuple[str, str], TasteVector],
    focal_user: str,
    month: str,
) -> np.ndarray:
    """Unweighted mean of every other user's month vector."""
    return MonthlyLooMeans(user_month_vectors).loo(focal_user, month)
