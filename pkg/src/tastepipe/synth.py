"""Synthetic catalogs, sessions, and panels with planted ground truth.

Everything draws from a counter-based Philox generator, so identical
(config, seed) pairs reproduce byte-identical datasets on any platform.
Each generator returns its ground truth alongside the data and the file
writers emit it as a JSON sidecar, so verification never re-derives what
was planted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from . import ingest
from .econ import term_bases
from .geo import CityLocation, write_gazetteer

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    # catalog / sessions
    n_users: int = 40
    n_cities: int = 6
    n_countries: int = 2
    n_artists: int = 20
    songs_per_artist: int = 10
    n_genres: int = 4
    within_genre_session_prob: float = 0.9
    months: int = 8
    start_month: str = "2019-01"
    sessions_per_user_month: int = 12
    mean_session_length: int = 7
    travel_prob: float = 0.25
    short_stream_prob: float = 0.04
    algorithmic_prob: float = 0.2
    editorial_prob: float = 0.2
    skip_prob: float = 0.05
    missing_release_prob: float = 0.05
    # monthly panel
    panel_coefficients: dict[str, float] = field(
        default_factory=lambda: {"x1": 0.05, "x2": 0.40, "x3": -0.25}
    )
    panel_months: int = 24
    regressor_correlation: float = 0.3
    unit_effect_sd: float = 1.0
    period_effect_sd: float = 0.5
    noise_sd: float = 1.0
    # weekly DiD panel
    planted_atet: float = 0.023
    did_n_users: int = 120
    did_n_weeks: int = 20
    did_treatment_week: int = 12
    did_noise_sd: float = 0.05
    did_pretrend_slope: float = 0.0
    did_anticipation_weeks: int = 0
    did_anticipation_effect: float = 0.0
    did_effect_profile: str = "step"  # step | ramp
    did_n_controls: int = 0
    did_control_coef: float = 0.1

    def validate(self) -> None:
        for name in ("within_genre_session_prob", "travel_prob", "short_stream_prob",
                     "algorithmic_prob", "editorial_prob", "skip_prob",
                     "missing_release_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        for name in ("n_users", "n_cities", "n_countries", "n_artists",
                     "songs_per_artist", "n_genres", "months",
                     "sessions_per_user_month", "mean_session_length",
                     "panel_months", "did_n_users", "did_n_weeks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_artists * self.songs_per_artist < 1:
            raise ValueError("catalog has no songs")
        if not 1 <= self.did_treatment_week < self.did_n_weeks:
            raise ValueError("did_treatment_week must lie inside the week range")
        if self.did_effect_profile not in ("step", "ramp"):
            raise ValueError("did_effect_profile must be 'step' or 'ramp'")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _month_starts(start_month: str, months: int) -> list[int]:
    year, month = (int(p) for p in start_month.split("-"))
    starts = []
    for _ in range(months):
        starts.append(int(datetime(year, month, 1, tzinfo=timezone.utc).timestamp()))
        month += 1
        if month > 12:
            month = 1
            year += 1
    return starts


@dataclass
class SynthCatalog:
    track_artist: dict[str, str]
    track_genre: dict[str, str]
    track_release: dict[str, date | None]
    cities: list[CityLocation]
    home_by_user: dict[str, str]

    def genre_tracks(self) -> dict[str, list[str]]:
        grouped: dict[str, list[str]] = {}
        for track, genre in self.track_genre.items():
            grouped.setdefault(genre, []).append(track)
        return {g: sorted(ts) for g, ts in grouped.items()}


@dataclass
class SessionTruth:
    session_labels: list[int]  # per emitted event row, user-scoped sequential id
    session_genres: list[str]  # designated genre per planted session
    n_sessions: int

    def to_json(self) -> dict:
        return {
            "session_labels": self.session_labels,
            "session_genres": self.session_genres,
            "n_sessions": self.n_sessions,
        }


def _build_catalog(config: SynthConfig, rng: np.random.Generator) -> SynthCatalog:
    track_artist: dict[str, str] = {}
    track_genre: dict[str, str] = {}
    track_release: dict[str, date | None] = {}
    start_ordinal = date(2000, 1, 1).toordinal()
    end_ordinal = date(int(config.start_month.split("-")[0]), 1, 1).toordinal()
    track_no = 0
    for a in range(config.n_artists):
        artist = f"a{a:04d}"
        genre = f"g{a % config.n_genres:02d}"
        for _ in range(config.songs_per_artist):
            track = f"t{track_no:05d}"
            track_no += 1
            track_artist[track] = artist
            track_genre[track] = genre
            if rng.random() < config.missing_release_prob:
                track_release[track] = None
            else:
                track_release[track] = date.fromordinal(
                    int(rng.integers(start_ordinal, end_ordinal))
                )

    cities = []
    for c in range(config.n_cities):
        cities.append(
            CityLocation(
                city_id=f"c{c:03d}",
                latitude=float(np.round(rng.uniform(-60.0, 60.0), 4)),
                longitude=float(np.round(rng.uniform(-170.0, 170.0), 4)),
                country_id=f"n{c % config.n_countries:02d}",
            )
        )

    home_by_user = {
        f"u{u:04d}": cities[int(rng.integers(config.n_cities))].city_id
        for u in range(config.n_users)
    }
    return SynthCatalog(track_artist, track_genre, track_release, cities, home_by_user)


def generate_sessions(config: SynthConfig) -> tuple[list[ingest.StreamEvent], SynthCatalog, SessionTruth]:
    """Event log with planted sessions, genres, homes, and travel.

    Timestamps guarantee that re-segmenting the 60s-filtered log with the
    standard 5-minute gap recovers the planted sessions exactly: gaps inside
    a session stay <= 300 s even if a short stream between two long ones is
    filtered out, and consecutive sessions are separated by > 400 s.
    """
    config.validate()
    rng = _rng(config.seed)
    catalog = _build_catalog(config, rng)
    genre_tracks = catalog.genre_tracks()
    genres = sorted(genre_tracks)
    all_tracks = sorted(catalog.track_genre)
    month_starts = _month_starts(config.start_month, config.months)
    origin_values = ["algorithmic", "editorial", "collection"]
    platforms = ["android", "ios", "web"]

    events: list[ingest.StreamEvent] = []
    labels: list[int] = []
    session_genres: list[str] = []
    n_sessions = 0

    for user in sorted(catalog.home_by_user):
        home = catalog.home_by_user[user]
        session_counter = 0
        for month_start in month_starts:
            n_month_sessions = max(1, int(rng.poisson(config.sessions_per_user_month)))
            # spread sessions across ~4 weeks so every ISO week sees activity
            slot = (28 * SECONDS_PER_DAY) // n_month_sessions
            cursor = month_start + int(rng.integers(0, 3600))
            traveling = rng.random() < config.travel_prob
            visit_city = None
            if traveling:
                others = [c.city_id for c in catalog.cities if c.city_id != home]
                if others:
                    visit_city = others[int(rng.integers(len(others)))]
            for s in range(n_month_sessions):
                cursor = max(cursor, month_start + s * slot + int(rng.integers(0, 3600)))
                length = max(2, int(rng.poisson(config.mean_session_length)))
                designated = genres[int(rng.integers(len(genres)))]
                in_visit = visit_city is not None and s < max(1, n_month_sessions // 4)
                city = visit_city if in_visit else home
                session_genres.append(designated)
                prev_short = True  # forbid a short first stream
                for _ in range(length):
                    if rng.random() < config.within_genre_session_prob:
                        pool = genre_tracks[designated]
                    else:
                        pool = all_tracks
                    track = pool[int(rng.integers(len(pool)))]
                    short = (not prev_short) and rng.random() < config.short_stream_prob
                    duration = int(rng.integers(5, 51)) if short else int(rng.integers(61, 241))
                    prev_short = short
                    r = rng.random()
                    if r < config.algorithmic_prob:
                        origin = "algorithmic"
                    elif r < config.algorithmic_prob + config.editorial_prob:
                        origin = "editorial"
                    else:
                        origin = "collection"
                    events.append(
                        ingest.StreamEvent(
                            user_id=user,
                            track_id=track,
                            artist_id=catalog.track_artist[track],
                            origin=ingest.Origin(origin),
                            start_timestamp=cursor,
                            duration=duration,
                            skipped=bool(rng.random() < config.skip_prob),
                            platform=platforms[int(rng.integers(len(platforms)))],
                            city_id=city,
                            release_date=catalog.track_release[track],
                        )
                    )
                    labels.append(session_counter)
                    cursor += duration + int(rng.integers(0, 101))
                session_counter += 1
                n_sessions += 1
                cursor += 401 + int(rng.integers(0, 1800))

    truth = SessionTruth(session_labels=labels, session_genres=session_genres, n_sessions=n_sessions)
    return events, catalog, truth


def write_session_dataset(
    out_dir: str | Path,
    events: list[ingest.StreamEvent],
    catalog: SynthCatalog,
    truth: SessionTruth,
    delimiter: str = ",",
) -> dict[str, Path]:
    """Emit the log, gazetteer, track metadata, and ground-truth sidecar in
    the formats the pipeline consumes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "stream_log": out / "streams.csv",
        "gazetteer": out / "cities.csv",
        "track_metadata": out / "tracks.csv",
        "truth": out / "truth.json",
    }
    ingest.write_event_log(paths["stream_log"], events, delimiter=delimiter)
    write_gazetteer(paths["gazetteer"], catalog.cities, delimiter=delimiter)
    with open(paths["track_metadata"], "w", encoding="utf-8", newline="") as fh:
        fh.write("track_id,artist_id,release_date\n")
        for track in sorted(catalog.track_artist):
            release = catalog.track_release[track]
            fh.write(f"{track},{catalog.track_artist[track]},{release.isoformat() if release else ''}\n")
    truth_doc = {
        "track_genre": catalog.track_genre,
        "track_artist": catalog.track_artist,
        "home_by_user": catalog.home_by_user,
        "sessions": truth.to_json(),
    }
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(truth_doc, fh, indent=2, sort_keys=True)
    return paths


# ---------------------------------------------------------------------------
# Monthly panel with a planted fixed-effects linear model
# ---------------------------------------------------------------------------

def _standardize_columns(matrix: np.ndarray) -> np.ndarray:
    return (matrix - matrix.mean(axis=0)) / matrix.std(axis=0, ddof=1)


def generate_panel(config: SynthConfig) -> tuple[pd.DataFrame, dict]:
    """Monthly panel: outcome = planted terms + unit FE + month FE + noise.

    Raw regressors carry arbitrary scales; the planted coefficients apply to
    their z-scores (and to squares/products of z-scores for quadratic and
    interaction terms), mirroring how estimation builds its design.
    """
    config.validate()
    rng = _rng(config.seed)
    base_names = sorted({b for t in config.panel_coefficients for b in term_bases(t)})
    n = config.n_users * config.panel_months

    rho = config.regressor_correlation
    factor = rng.normal(size=n)
    raw = {}
    for j, name in enumerate(base_names):
        noise = rng.normal(size=n)
        latent = rho * factor + np.sqrt(1.0 - rho * rho) * noise
        raw[name] = 2.0 + 3.0 * (j + 1) * latent  # arbitrary location/scale
    z = {name: _standardize_columns(raw[name]) for name in base_names}

    y = np.zeros(n)
    for term, beta in config.panel_coefficients.items():
        y += beta * _term_values(z, term)
    unit_ids = np.repeat(np.arange(config.n_users), config.panel_months)
    period_ids = np.tile(np.arange(config.panel_months), config.n_users)
    unit_fe = rng.normal(scale=config.unit_effect_sd, size=config.n_users)
    period_fe = rng.normal(scale=config.period_effect_sd, size=config.panel_months)
    y += unit_fe[unit_ids] + period_fe[period_ids]
    if config.noise_sd > 0:
        y += rng.normal(scale=config.noise_sd, size=n)

    frame = pd.DataFrame(
        {
            "unit_id": [f"u{i:05d}" for i in unit_ids],
            "period": period_ids,
            "outcome": y,
        }
    )
    for name in base_names:
        frame[name] = raw[name]
    truth = {
        "coefficients": dict(config.panel_coefficients),
        "noise_sd": config.noise_sd,
        "n_users": config.n_users,
        "panel_months": config.panel_months,
    }
    return frame, truth


def _term_values(z: dict[str, np.ndarray], term: str) -> np.ndarray:
    if "^2" in term:
        return z[term[: term.index("^2")]] ** 2
    for sep in ("*", ":"):
        if sep in term:
            a, b = term.split(sep, 1)
            return z[a] * z[b]
    return z[term]


# ---------------------------------------------------------------------------
# Weekly two-group DiD panel
# ---------------------------------------------------------------------------

def generate_did_panel(config: SynthConfig) -> tuple[pd.DataFrame, dict]:
    """Weekly two-country panel with a planted treatment effect.

    Half the users are treated; treatment switches on at week index
    did_treatment_week. Optional planted pre-trend divergence and
    anticipation (the effect starting early) support calibration tests.
    """
    config.validate()
    rng = _rng(config.seed)
    n_users = config.did_n_users
    n_weeks = config.did_n_weeks
    t_star = config.did_treatment_week

    treated_users = np.arange(n_users) >= n_users // 2
    unit_ids = np.repeat(np.arange(n_users), n_weeks)
    weeks = np.tile(np.arange(n_weeks), n_users)
    treated = treated_users[unit_ids].astype(float)
    post = (weeks >= t_star).astype(float)

    unit_fe = rng.normal(scale=config.unit_effect_sd, size=n_users)
    week_fe = rng.normal(scale=config.period_effect_sd, size=n_weeks)
    y = unit_fe[unit_ids] + week_fe[weeks]

    if config.did_effect_profile == "step":
        effect = config.planted_atet * post
    else:  # ramp: linear ramp over the post period up to 2x the mean effect
        ramp = np.clip((weeks - t_star + 1) / max(1, n_weeks - t_star), 0.0, None)
        effect = 2.0 * config.planted_atet * ramp * post
    y += treated * effect

    if config.did_pretrend_slope != 0.0:
        y += config.did_pretrend_slope * treated * weeks
    if config.did_anticipation_weeks > 0 and config.did_anticipation_effect != 0.0:
        early = (weeks >= t_star - config.did_anticipation_weeks) & (weeks < t_star)
        y += config.did_anticipation_effect * treated * early

    frame = pd.DataFrame(
        {
            "unit_id": [f"u{i:04d}" for i in unit_ids],
            "period": weeks,
            "treated": treated,
            "post": post,
            "outcome": y,
        }
    )
    controls = []
    for j in range(config.did_n_controls):
        name = f"w{j + 1}"
        values = rng.normal(size=len(frame))
        frame[name] = values
        frame["outcome"] = frame["outcome"] + config.did_control_coef * values
        controls.append(name)
    if config.did_noise_sd > 0:
        frame["outcome"] = frame["outcome"] + rng.normal(
            scale=config.did_noise_sd, size=len(frame)
        )

    truth = {
        "atet": config.planted_atet,
        "treatment_week": t_star,
        "pretrend_slope": config.did_pretrend_slope,
        "anticipation_weeks": config.did_anticipation_weeks,
        "anticipation_effect": config.did_anticipation_effect,
        "effect_profile": config.did_effect_profile,
        "controls": controls,
        "noise_sd": config.did_noise_sd,
    }
    return frame, truth


def write_panel(out_dir: str | Path, name: str, frame: pd.DataFrame, truth: dict) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"panel": out / f"{name}.csv", "truth": out / f"{name}_truth.json"}
    frame.to_csv(paths["panel"], index=False)
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
    return paths


# ---------------------------------------------------------------------------
# Monte Carlo calibration
# ---------------------------------------------------------------------------

@dataclass
class MonteCarloResult:
    atet_p_values: np.ndarray
    pretrend_p_values: np.ndarray
    rejection_rate: float

    def summary(self, alpha: float = 0.05) -> str:
        return (
            f"draws={len(self.atet_p_values)} "
            f"atet-rejection@{alpha:.0%}={self.rejection_rate:.3f}"
        )


def monte_carlo_did(
    base_config: SynthConfig,
    n_draws: int,
    master_seed: int,
    alpha: float = 0.05,
) -> MonteCarloResult:
    """Repeated generate-and-estimate draws with per-draw seeds derived from
    the master seed; collects ATET and parallel-trends p-values."""
    from . import econ  # local import to keep module load cheap

    seeds = np.random.SeedSequence(master_seed).generate_state(n_draws)
    atet_ps = np.empty(n_draws)
    pre_ps = np.empty(n_draws)
    for i in range(n_draws):
        cfg = replace(base_config, seed=int(seeds[i]))
        panel, _ = generate_did_panel(cfg)
        fit = econ.did_estimate(panel, outcome="outcome")
        atet_ps[i] = fit.atet_p
        _, pre_ps[i] = econ.pretrend_test(panel, outcome="outcome")
    return MonteCarloResult(
        atet_p_values=atet_ps,
        pretrend_p_values=pre_ps,
        rejection_rate=float((atet_ps < alpha).mean()),
    )
