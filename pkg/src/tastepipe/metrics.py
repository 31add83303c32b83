"""Dependent variables and controls computed from taste vectors and event streams.

Taste exploration compares a user's current-period vector against the mean
of their prior vectors inside a baseline window; taste adaptation compares
similarity-to-a-city while visiting against the user's home-taste baseline.
Both live on the cosine scale, so every metric here is invariant to positive
rescaling of the underlying vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from . import geo
from .embed import cosine_distance, cosine_similarity
from .ingest import Origin, StreamEvent
from .taste import MonthlyLooMeans, TasteVector

logger = logging.getLogger(__name__)

EXPLORATION_WINDOWS = ("prior_month", "prior_6_months", "cumulative")


def month_index(key: str) -> int:
    """Months since year 0 for a 'YYYY-MM' key."""
    year, month = key.split("-")
    return int(year) * 12 + int(month) - 1


def week_index(key: str) -> int:
    """ISO weeks since epoch for a 'YYYY-Www' key (via that week's Monday)."""
    year, week = key.split("-W")
    monday = date.fromisocalendar(int(year), int(week), 1)
    return monday.toordinal() // 7


def _period_index(key: str) -> int:
    return week_index(key) if "-W" in key else month_index(key)


def taste_exploration(
    user_vectors: Mapping[str, np.ndarray],
    period: str,
    window: str = "prior_6_months",
) -> tuple[float, int] | None:
    """Cosine distance between the current-period vector and the mean of the
    prior-window vectors.

    `user_vectors` maps period keys (months or ISO weeks) to one user's taste
    vectors. The baseline averages whichever prior periods exist inside the
    window; the second return value is that count, so estimation can filter
    on baseline coverage. Returns None when the current vector or the whole
    baseline is missing.
    """
    if window not in EXPLORATION_WINDOWS:
        raise ValueError(f"window must be one of {EXPLORATION_WINDOWS}, got {window!r}")
    current = user_vectors.get(period)
    if current is None:
        return None
    t = _period_index(period)
    prior = []
    for key, vec in user_vectors.items():
        k = _period_index(key)
        if k >= t:
            continue
        if window == "prior_month" and k != t - 1:
            continue
        if window == "prior_6_months" and k < t - 6:
            continue
        prior.append((k, vec))
    if not prior:
        return None
    baseline = np.mean([v for _, v in prior], axis=0)
    return cosine_distance(current, baseline), len(prior)


def taste_adaptation(
    user_city_month_vector: np.ndarray,
    user_home_vector: np.ndarray,
    city_vector: np.ndarray,
) -> float:
    """Similarity to the visited city while there, minus the home baseline
    similarity to that same city."""
    return cosine_similarity(user_city_month_vector, city_vector) - cosine_similarity(
        user_home_vector, city_vector
    )


def distance_from_global_taste(user_vector: np.ndarray, global_loo_vector: np.ndarray) -> float:
    return cosine_distance(user_vector, global_loo_vector)


def jaccard_chart_similarity(chart_a: set[str], chart_b: set[str]) -> float:
    if not chart_a or not chart_b:
        raise ValueError("jaccard similarity of an empty chart is undefined")
    return len(chart_a & chart_b) / len(chart_a | chart_b)


@dataclass
class ControlMetrics:
    listening_count: int
    algorithmic_guidedness: float
    mean_song_recency: float | None  # weeks; None when no release dates known
    recency_anomalies: int


def listen_age_weeks(event: StreamEvent) -> int | None:
    """Whole weeks between release and listen; negative ages clamp to 0."""
    if event.release_date is None:
        return None
    days = (event.utc_date() - event.release_date).days
    return max(0, days // 7)


def max_listen_age_weeks(events: Iterable[StreamEvent]) -> int:
    """Dataset-wide maximum listen age (first pass for the recency inverse)."""
    ages = [a for a in (listen_age_weeks(e) for e in events) if a is not None]
    if not ages:
        return 0
    return max(ages)


def control_metrics(
    events: list[StreamEvent],
    max_age_weeks: int,
    algorithmic_origins: frozenset[Origin] = frozenset({Origin.ALGORITHMIC}),
) -> ControlMetrics:
    """Listening count, algorithmic share, and mean song recency for one
    user-period slice of (already duration-filtered) events."""
    if not events:
        raise ValueError("control metrics need at least one stream")
    count = len(events)
    algorithmic = sum(1 for e in events if e.origin in algorithmic_origins)
    recencies = []
    anomalies = 0
    for e in events:
        if e.release_date is None:
            continue
        raw_days = (e.utc_date() - e.release_date).days
        if raw_days < 0:
            anomalies += 1
        recencies.append(max_age_weeks - max(0, raw_days // 7))
    mean_recency = float(np.mean(recencies)) if recencies else None
    return ControlMetrics(
        listening_count=count,
        algorithmic_guidedness=algorithmic / count,
        mean_song_recency=mean_recency,
        recency_anomalies=anomalies,
    )


def _years_of_month(month: str) -> int:
    return int(month.split("-")[0])


def _group_events(
    events: Iterable[StreamEvent], key_fn
) -> dict:
    grouped: dict = {}
    for e in events:
        grouped.setdefault(key_fn(e), []).append(e)
    return grouped


def user_month_metric_table(
    events: list[StreamEvent],
    user_month_vectors: dict[tuple[str, str], TasteVector],
    loo: MonthlyLooMeans,
    homes_by_year: dict[tuple[str, int], str],
    gazetteer: dict[str, geo.CityLocation],
    exploration_window: str = "prior_6_months",
    travel_mode: str = "sum",
    algorithmic_origins: frozenset[Origin] = frozenset({Origin.ALGORITHMIC}),
) -> pd.DataFrame:
    """One row per (user, month) with the outcome and every control.

    `events` must already carry the metric-side duration filter (30 s rule).
    `homes_by_year` maps (user, year) to the home city for travel distance.
    """
    max_age = max_listen_age_weeks(events)
    by_user_month = _group_events(events, lambda e: (e.user_id, e.month_key()))
    vectors_by_user: dict[str, dict[str, np.ndarray]] = {}
    for (user, month), tv in user_month_vectors.items():
        vectors_by_user.setdefault(user, {})[month] = tv.vector

    rows = []
    for (user, month) in sorted(by_user_month):
        slice_events = by_user_month[(user, month)]
        controls = control_metrics(slice_events, max_age, algorithmic_origins)

        exploration = np.nan
        baseline_periods = 0
        explored = taste_exploration(
            vectors_by_user.get(user, {}), month, exploration_window
        )
        if explored is not None:
            exploration, baseline_periods = explored

        global_dist = np.nan
        tv = user_month_vectors.get((user, month))
        if tv is not None and loo.users_in_month(month) >= 2:
            global_dist = distance_from_global_taste(tv.vector, loo.loo(user, month))

        travel = np.nan
        home_city = homes_by_year.get((user, _years_of_month(month)))
        if home_city is not None and home_city in gazetteer:
            visited = {e.city_id for e in slice_events if e.city_id != home_city}
            travel, _unknown = geo.monthly_travel_distance(
                gazetteer[home_city], visited, gazetteer, mode=travel_mode
            )

        rows.append(
            {
                "user_id": user,
                "month": month,
                "taste_exploration": exploration,
                "exploration_window": exploration_window,
                "exploration_baseline_periods": baseline_periods,
                "distance_from_global_taste": global_dist,
                "travel_distance_km": travel,
                "listening_count": controls.listening_count,
                "algorithmic_guidedness": controls.algorithmic_guidedness,
                "mean_song_recency": controls.mean_song_recency if controls.mean_song_recency is not None else np.nan,
            }
        )
    return pd.DataFrame(rows)


def user_city_month_metric_table(
    events: list[StreamEvent],
    user_city_month_vectors: dict[tuple[str, str, str], TasteVector],
    user_home_vectors: dict[str, TasteVector],
    city_vectors: dict[str, TasteVector],
    primary_home_by_user: dict[str, str],
    gazetteer: dict[str, geo.CityLocation],
) -> pd.DataFrame:
    """One row per visited (user, city, month): adaptation plus the city-level
    distances. Home-city rows are out of scope, and rows for cities without a
    taste vector are omitted and counted in the log."""
    rows = []
    missing_city_vector = 0
    for (user, city, month) in sorted(user_city_month_vectors):
        home = primary_home_by_user.get(user)
        if home is None or city == home:
            continue
        cv = city_vectors.get(city)
        home_cv = city_vectors.get(home)
        uv_home = user_home_vectors.get(user)
        if cv is None or home_cv is None:
            missing_city_vector += 1
            continue
        if uv_home is None:
            continue
        uv_cm = user_city_month_vectors[(user, city, month)]
        geo_km = np.nan
        if home in gazetteer and city in gazetteer:
            geo_km = geo.haversine_km(gazetteer[home], gazetteer[city])
        rows.append(
            {
                "user_id": user,
                "city_id": city,
                "month": month,
                "taste_adaptation": taste_adaptation(uv_cm.vector, uv_home.vector, cv.vector),
                "taste_distance_to_city": cosine_distance(home_cv.vector, cv.vector),
                "geo_distance_to_city_km": geo_km,
            }
        )
    if missing_city_vector:
        logger.info("%d visited-city rows omitted: city without taste vector", missing_city_vector)
    return pd.DataFrame(rows)


def user_week_metric_table(
    events: list[StreamEvent],
    user_week_vectors: dict[tuple[str, str], TasteVector],
    country_vectors: dict[str, TasteVector],
    primary_home_by_user: dict[str, str],
    gazetteer: dict[str, geo.CityLocation],
    exploration_window: str = "prior_6_months",
    travel_mode: str = "sum",
    algorithmic_origins: frozenset[Origin] = frozenset({Origin.ALGORITHMIC}),
) -> pd.DataFrame:
    """Weekly analogue of the monthly table, for the DiD panel.

    The prior-window semantics match the monthly table but count ISO weeks;
    the global-taste control becomes distance from the home country's taste
    vector, and home_country is carried for treatment assignment.
    """
    max_age = max_listen_age_weeks(events)
    by_user_week = _group_events(events, lambda e: (e.user_id, e.week_key()))
    vectors_by_user: dict[str, dict[str, np.ndarray]] = {}
    for (user, week), tv in user_week_vectors.items():
        vectors_by_user.setdefault(user, {})[week] = tv.vector

    rows = []
    for (user, week) in sorted(by_user_week):
        slice_events = by_user_week[(user, week)]
        controls = control_metrics(slice_events, max_age, algorithmic_origins)

        exploration = np.nan
        explored = taste_exploration(vectors_by_user.get(user, {}), week, exploration_window)
        if explored is not None:
            exploration = explored[0]

        home_city = primary_home_by_user.get(user)
        home_loc = gazetteer.get(home_city) if home_city else None
        home_country = home_loc.country_id if home_loc else ""

        national_dist = np.nan
        tv = user_week_vectors.get((user, week))
        cv = country_vectors.get(home_country)
        if tv is not None and cv is not None:
            national_dist = cosine_distance(tv.vector, cv.vector)

        travel = np.nan
        if home_loc is not None:
            visited = {e.city_id for e in slice_events if e.city_id != home_city}
            travel, _unknown = geo.monthly_travel_distance(
                home_loc, visited, gazetteer, mode=travel_mode
            )

        rows.append(
            {
                "user_id": user,
                "week": week,
                "home_country": home_country,
                "taste_exploration": exploration,
                "distance_from_national_taste": national_dist,
                "travel_distance_km": travel,
                "listening_count": controls.listening_count,
                "algorithmic_guidedness": controls.algorithmic_guidedness,
                "mean_song_recency": controls.mean_song_recency if controls.mean_song_recency is not None else np.nan,
            }
        )
    return pd.DataFrame(rows)
