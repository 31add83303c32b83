"""Pipeline stages over a shared output tree, with manifests and atomic writes.

Every stage writes its artifacts through a temp-file-and-rename so a crash
never leaves a truncated file at a final path, and records a manifest
(config hash, input/output digests, timing). A stage whose manifest still
matches its inputs is a no-op on re-run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from . import econ, geo, ingest, metrics, store, synth, taste
from .config import ConfigError, ModelSpec, PipelineConfig, config_digest_payload
from .embed import EmbeddingSpace, S2VConfig, build_vocabulary, train_s2v
from .taste import Scope, TasteVector

logger = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "train", "vectors", "metrics", "regress", "did", "report")


class MissingArtifactError(RuntimeError):
    """An upstream stage's artifact is absent; `stage` names the culprit."""

    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing artifact {path} — run the '{stage}' stage first")
        self.stage = stage
        self.path = path


@contextmanager
def atomic_output(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(cfg: PipelineConfig) -> str:
    payload = config_digest_payload(cfg)
    payload.pop("output_dir", None)  # environment, not semantics
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _rel(cfg: PipelineConfig, path: Path) -> str:
    try:
        return str(path.resolve().relative_to(cfg.output_dir.resolve()))
    except ValueError:
        return str(path)


class StageRunner:
    """Declares inputs/outputs per stage and handles manifests and no-ops."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.output_dir

    # -- layout ------------------------------------------------------------
    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def manifest_path(self, stage: str) -> Path:
        return self.path("manifests", f"{stage}.json")

    def stage_inputs(self, stage: str) -> list[Path]:
        cfg = self.cfg
        inputs = cfg.resolved_inputs()
        table = {
            "synth": [],
            "ingest": [p for p in (inputs.stream_log, inputs.track_metadata) if p],
            "train": [self.path("ingest", "sessions.csv")],
            "vectors": [
                self.path("ingest", "streams_30s.csv"),
                self.path("train", "embedding.s2v"),
                inputs.gazetteer,
            ],
            "metrics": [
                self.path("ingest", "streams_30s.csv"),
                self.path("vectors", "taste_vectors.s2v"),
                self.path("vectors", "taste_supports.csv"),
                self.path("vectors", "homes.csv"),
                inputs.gazetteer,
            ],
            "regress": self._regress_inputs(),
            "did": [self.path("metrics", "user_week.csv")],
            "report": self._report_inputs(),
        }
        return table[stage]

    def _regress_inputs(self) -> list[Path]:
        needed = [self.path("metrics", "user_month.csv")]
        if any(m.panel == "user_city_month" for m in self.cfg.models):
            needed.append(self.path("metrics", "user_city_month.csv"))
        return needed

    def _report_inputs(self) -> list[Path]:
        needed = [self.path("metrics", "user_month.csv")]
        if self.cfg.models:
            needed.append(self.path("regress", "regress_results.json"))
        if self.cfg.did is not None:
            needed.append(self.path("did", "event_study.csv"))
            needed.append(self.path("did", "did_results.json"))
        return needed

    _PRODUCER = {
        "data": "synth",
        "ingest": "ingest",
        "train": "train",
        "vectors": "vectors",
        "metrics": "metrics",
        "regress": "regress",
        "did": "did",
    }

    def _producer_of(self, path: Path) -> str:
        rel = _rel(self.cfg, path)
        head = rel.split(os.sep)[0] if os.sep in rel else rel.split("/")[0]
        return self._PRODUCER.get(head, "synth" if self.cfg.inputs is None else "ingest")

    # -- manifest ----------------------------------------------------------
    def _check_inputs(self, stage: str) -> dict[str, str]:
        external = set()
        if self.cfg.inputs is not None:
            inputs = self.cfg.inputs
            external = {p for p in (inputs.stream_log, inputs.gazetteer, inputs.track_metadata) if p}
        digests = {}
        for path in self.stage_inputs(stage):
            if not path.exists():
                if path in external:
                    raise ConfigError("inputs", f"input file not found: {path}")
                raise MissingArtifactError(self._producer_of(path), path)
            digests[_rel(self.cfg, path)] = _sha256(path)
        return digests

    def up_to_date(self, stage: str) -> bool:
        manifest_file = self.manifest_path(stage)
        if not manifest_file.exists():
            return False
        try:
            manifest = json.loads(manifest_file.read_text())
        except json.JSONDecodeError:
            return False
        if manifest.get("config_sha256") != _config_hash(self.cfg):
            return False
        try:
            current_inputs = self._check_inputs(stage)
        except MissingArtifactError:
            return False
        if manifest.get("inputs") != current_inputs:
            return False
        for rel, digest in manifest.get("outputs", {}).items():
            path = self.out / rel
            if not path.exists() or _sha256(path) != digest:
                return False
        return True

    def run(self, stage: str, force: bool = False) -> bool:
        """Execute one stage; returns False when skipped as up to date."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage: {stage}")
        if not force and self.up_to_date(stage):
            logger.info("stage %s is up to date; skipping", stage)
            return False
        input_digests = self._check_inputs(stage)
        started = datetime.now(timezone.utc).isoformat()
        t0 = time.time()
        outputs = getattr(self, f"_stage_{stage}")()
        elapsed = time.time() - t0
        manifest = {
            "stage": stage,
            "config_sha256": _config_hash(self.cfg),
            "seed": self.cfg.seed,
            "workers": self.cfg.workers,
            "inputs": input_digests,
            "outputs": {_rel(self.cfg, p): _sha256(p) for p in outputs},
            "timing": {"started_utc": started, "elapsed_seconds": round(elapsed, 3)},
        }
        with atomic_output(self.manifest_path(stage)) as tmp:
            tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        logger.info("stage %s finished in %.1fs (%d artifacts)", stage, elapsed, len(outputs))
        return True

    def run_all(self, force: bool = False) -> list[str]:
        ran = []
        plan = []
        if self.cfg.synth is not None:
            plan.append("synth")
        plan.extend(["ingest", "train", "vectors", "metrics"])
        if self.cfg.models:
            plan.append("regress")
        if self.cfg.did is not None:
            plan.append("did")
        plan.append("report")
        for stage in plan:
            if self.run(stage, force=force):
                ran.append(stage)
        return ran

    # -- stage bodies --------------------------------------------------------
    def _stage_synth(self) -> list[Path]:
        if self.cfg.synth is None:
            raise ConfigError("synth", "synth stage requested but no synth section configured")
        scfg = dataclasses.replace(self.cfg.synth, seed=self.cfg.synth.seed)
        events, catalog, truth = synth.generate_sessions(scfg)
        data_dir = self.path("data")
        data_dir.mkdir(parents=True, exist_ok=True)
        outputs = []
        with atomic_output(data_dir / "streams.csv") as tmp:
            ingest.write_event_log(tmp, events, delimiter=self.cfg.delimiter)
        outputs.append(data_dir / "streams.csv")
        with atomic_output(data_dir / "cities.csv") as tmp:
            geo.write_gazetteer(tmp, catalog.cities, delimiter=self.cfg.delimiter)
        outputs.append(data_dir / "cities.csv")
        with atomic_output(data_dir / "tracks.csv") as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write("track_id,artist_id,release_date\n")
                for track in sorted(catalog.track_artist):
                    release = catalog.track_release[track]
                    fh.write(
                        f"{track},{catalog.track_artist[track]},"
                        f"{release.isoformat() if release else ''}\n"
                    )
        outputs.append(data_dir / "tracks.csv")
        truth_doc = {
            "track_genre": catalog.track_genre,
            "track_artist": catalog.track_artist,
            "home_by_user": catalog.home_by_user,
            "sessions": truth.to_json(),
        }
        with atomic_output(data_dir / "truth.json") as tmp:
            tmp.write_text(json.dumps(truth_doc, indent=2, sort_keys=True))
        outputs.append(data_dir / "truth.json")
        return outputs

    def _load_events(self, which: str) -> list[ingest.StreamEvent]:
        path = self.path("ingest", which)
        if not path.exists():
            raise MissingArtifactError("ingest", path)
        return ingest.read_event_log(path, delimiter=self.cfg.delimiter)

    def _stage_ingest(self) -> list[Path]:
        cfg = self.cfg
        inputs = cfg.resolved_inputs()
        track_meta = None
        if inputs.track_metadata and inputs.track_metadata.exists():
            track_meta = ingest.load_track_metadata(inputs.track_metadata, cfg.delimiter)
        report = ingest.IngestReport()
        events, report = ingest.parse_stream_log(
            inputs.stream_log, cfg.log_schema, track_meta, report
        )
        train_events, dropped_train = ingest.filter_streams(
            events, cfg.ingest.min_duration_train
        )
        report.dropped_short = dropped_train
        report.min_duration = cfg.ingest.min_duration_train
        sessions_by_user = ingest.sessionize(train_events, cfg.ingest.session_gap, report)
        metric_events, _ = ingest.filter_streams(events, cfg.ingest.min_duration_metrics)

        out_dir = self.path("ingest")
        outputs = []
        with atomic_output(out_dir / "sessions.csv") as tmp:
            ingest.write_sessionized_log(tmp, sessions_by_user, delimiter=cfg.delimiter)
        outputs.append(out_dir / "sessions.csv")
        with atomic_output(out_dir / "streams_30s.csv") as tmp:
            ingest.write_event_log(tmp, metric_events, delimiter=cfg.delimiter)
        outputs.append(out_dir / "streams_30s.csv")
        with atomic_output(out_dir / "ingest_report.csv") as tmp:
            report.write(tmp, delimiter=cfg.delimiter)
        outputs.append(out_dir / "ingest_report.csv")
        return outputs

    def _stage_train(self) -> list[Path]:
        cfg = self.cfg
        sessions_path = self.path("ingest", "sessions.csv")
        if not sessions_path.exists():
            raise MissingArtifactError("ingest", sessions_path)
        events = ingest.read_event_log(sessions_path, delimiter=cfg.delimiter)
        sessions_by_user = ingest.sessionize(events, cfg.ingest.session_gap)
        session_tracks = [
            s.track_ids() for user in sorted(sessions_by_user) for s in sessions_by_user[user]
        ]
        corpus = build_vocabulary(session_tracks, cfg.embedding.min_count)
        s2v_cfg = dataclasses.replace(
            cfg.embedding, seed=cfg.seed, workers=cfg.workers
        )
        space = train_s2v(corpus, s2v_cfg)

        out_dir = self.path("train")
        outputs = []
        tracks = space.track_list()
        with atomic_output(out_dir / "embedding.s2v") as tmp:
            store.write_matrix(tmp, tracks, space.vectors)
        outputs.append(out_dir / "embedding.s2v")
        with atomic_output(out_dir / "embedding.csv") as tmp:
            store.write_matrix_csv(tmp, tracks, space.vectors, delimiter=cfg.delimiter,
                                   key_header="track_id")
        outputs.append(out_dir / "embedding.csv")
        report = {
            "vocabulary_size": len(tracks),
            "sessions": len(session_tracks),
            "tokens": corpus.token_count(),
            "epochs": s2v_cfg.epochs,
            "loss_trace": [round(x, 6) for x in space.loss_trace],
            "degenerate_tracks": space.degenerate_tracks,
        }
        with atomic_output(out_dir / "train_report.json") as tmp:
            tmp.write_text(json.dumps(report, indent=2, sort_keys=True))
        outputs.append(out_dir / "train_report.json")
        return outputs

    def _load_space(self) -> EmbeddingSpace:
        path = self.path("train", "embedding.s2v")
        if not path.exists():
            raise MissingArtifactError("train", path)
        keys, matrix = store.read_matrix(path)
        return EmbeddingSpace(
            dimension=matrix.shape[1],
            vocabulary={k: i for i, k in enumerate(keys)},
            vectors=matrix,
            training_config=S2VConfig(dimension=matrix.shape[1]),
        )

    def _stage_vectors(self) -> list[Path]:
        cfg = self.cfg
        events = self._load_events("streams_30s.csv")
        space = self._load_space()
        gazetteer = geo.load_gazetteer(cfg.resolved_inputs().gazetteer, cfg.delimiter)

        weighting = cfg.taste.weighting
        min_support = cfg.taste.min_support
        homes = taste.assign_homes(events)
        primary = taste.primary_home(homes)
        user_month = taste.build_user_month_vectors(events, space, weighting, min_support)
        user_week = taste.build_user_week_vectors(events, space, weighting, min_support)
        user_city_month = taste.build_user_city_month_vectors(
            events, space, weighting, min_support
        )
        overall = taste.build_user_overall_vectors(events, space, weighting)
        home_vectors = taste.build_home_vectors(events, space, primary, weighting)
        city_to_country = {c: loc.country_id for c, loc in gazetteer.items()}
        city_vectors, country_vectors = taste.build_location_vectors(
            overall, primary, city_to_country
        )

        keys: list[str] = []
        rows: list[np.ndarray] = []
        supports: list[tuple[str, tuple[str, ...], int]] = []

        def add(scope: Scope, mapping: dict, key_parts) -> None:
            for key in sorted(mapping):
                tv: TasteVector = mapping[key]
                parts = key_parts(key)
                keys.append(store.composite_key(scope.value, *parts))
                rows.append(tv.vector)
                supports.append((scope.value, parts, tv.support))

        add(Scope.USER_MONTH, user_month, lambda k: k)
        add(Scope.USER_WEEK, user_week, lambda k: k)
        add(Scope.USER_CITY_MONTH, user_city_month, lambda k: k)
        add(Scope.USER_HOME, home_vectors, lambda k: (k,))
        add(Scope.CITY, city_vectors, lambda k: (k,))
        add(Scope.COUNTRY, country_vectors, lambda k: (k,))
        for user in sorted(overall):
            keys.append(store.composite_key(Scope.USER_OVERALL.value, user))
            rows.append(overall[user].vector)
            supports.append((Scope.USER_OVERALL.value, (user,), overall[user].support))

        matrix = np.vstack(rows).astype(np.float32) if rows else np.zeros((0, space.dimension), np.float32)
        out_dir = self.path("vectors")
        outputs = []
        with atomic_output(out_dir / "taste_vectors.s2v") as tmp:
            store.write_matrix(tmp, keys, matrix)
        outputs.append(out_dir / "taste_vectors.s2v")
        with atomic_output(out_dir / "taste_vectors.csv") as tmp:
            store.write_matrix_csv(tmp, keys, matrix, delimiter=cfg.delimiter)
        outputs.append(out_dir / "taste_vectors.csv")
        with atomic_output(out_dir / "taste_supports.csv") as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write("scope,part1,part2,part3,support\n")
                for scope_value, parts, support in supports:
                    padded = list(parts) + [""] * (3 - len(parts))
                    fh.write(f"{scope_value},{padded[0]},{padded[1]},{padded[2]},{support}\n")
        outputs.append(out_dir / "taste_supports.csv")
        with atomic_output(out_dir / "homes.csv") as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write("user_id,year,home_city_id,streams,is_primary\n")
                for (user, year), ha in sorted(homes.items()):
                    primary_flag = 1 if primary.get(user) == ha.home_city_id else 0
                    fh.write(
                        f"{user},{year},{ha.home_city_id},{sum(ha.evidence.values())},{primary_flag}\n"
                    )
        outputs.append(out_dir / "homes.csv")
        return outputs

    def _load_taste_store(self) -> dict[str, dict[tuple[str, ...], TasteVector]]:
        path = self.path("vectors", "taste_vectors.s2v")
        supports_path = self.path("vectors", "taste_supports.csv")
        for p in (path, supports_path):
            if not p.exists():
                raise MissingArtifactError("vectors", p)
        keys, matrix = store.read_matrix(path)
        supports_frame = pd.read_csv(supports_path, dtype=str, keep_default_na=False)
        support_of = {
            (row.scope, tuple(p for p in (row.part1, row.part2, row.part3) if p != "")): int(row.support)
            for row in supports_frame.itertuples()
        }
        grouped: dict[str, dict[tuple[str, ...], TasteVector]] = {}
        for key, row in zip(keys, matrix):
            parts = store.split_key(key)
            scope_value, key_parts = parts[0], tuple(parts[1:])
            support = support_of.get((scope_value, key_parts), 1)
            grouped.setdefault(scope_value, {})[key_parts] = TasteVector(
                scope=Scope(scope_value), key=key_parts,
                vector=row.astype(np.float64), support=support,
            )
        return grouped

    def _load_homes(self) -> tuple[dict[tuple[str, int], str], dict[str, str]]:
        path = self.path("vectors", "homes.csv")
        if not path.exists():
            raise MissingArtifactError("vectors", path)
        frame = pd.read_csv(path, dtype={"user_id": str, "home_city_id": str})
        by_year = {
            (row.user_id, int(row.year)): row.home_city_id for row in frame.itertuples()
        }
        primary = {
            row.user_id: row.home_city_id
            for row in frame.itertuples()
            if int(row.is_primary) == 1
        }
        return by_year, primary

    def _stage_metrics(self) -> list[Path]:
        cfg = self.cfg
        events = self._load_events("streams_30s.csv")
        vectors = self._load_taste_store()
        homes_by_year, primary = self._load_homes()
        gazetteer = geo.load_gazetteer(cfg.resolved_inputs().gazetteer, cfg.delimiter)
        origins = frozenset(ingest.Origin(o) for o in cfg.metrics.algorithmic_origins)

        user_month = {k: tv for k, tv in vectors.get("user_month", {}).items()}
        loo = taste.MonthlyLooMeans(user_month)
        month_table = metrics.user_month_metric_table(
            events, user_month, loo, homes_by_year, gazetteer,
            exploration_window=cfg.metrics.exploration_window,
            travel_mode=cfg.metrics.travel_mode,
            algorithmic_origins=origins,
        )
        city_table = metrics.user_city_month_metric_table(
            events,
            {k: tv for k, tv in vectors.get("user_city_month", {}).items()},
            {k[0]: tv for k, tv in vectors.get("user_home", {}).items()},
            {k[0]: tv for k, tv in vectors.get("city", {}).items()},
            primary,
            gazetteer,
        )
        week_table = metrics.user_week_metric_table(
            events,
            {k: tv for k, tv in vectors.get("user_week", {}).items()},
            {k[0]: tv for k, tv in vectors.get("country", {}).items()},
            primary,
            gazetteer,
            exploration_window=(cfg.did.exploration_window if cfg.did else cfg.metrics.exploration_window),
            travel_mode=cfg.metrics.travel_mode,
            algorithmic_origins=origins,
        )

        out_dir = self.path("metrics")
        outputs = []
        for name, table in (
            ("user_month.csv", month_table),
            ("user_city_month.csv", city_table),
            ("user_week.csv", week_table),
        ):
            with atomic_output(out_dir / name) as tmp:
                table.to_csv(tmp, index=False, sep=cfg.delimiter)
            outputs.append(out_dir / name)
        return outputs

    # -- estimation stages ---------------------------------------------------
    def _assemble_model_panel(self, model: ModelSpec) -> pd.DataFrame:
        month_path = self.path("metrics", "user_month.csv")
        if not month_path.exists():
            raise MissingArtifactError("metrics", month_path)
        month_frame = pd.read_csv(
            month_path, sep=self.cfg.delimiter, dtype={"user_id": str, "month": str}
        )
        if model.panel == "user_month":
            frame = month_frame
        else:
            city_path = self.path("metrics", "user_city_month.csv")
            if not city_path.exists():
                raise MissingArtifactError("metrics", city_path)
            city_frame = pd.read_csv(
                city_path, sep=self.cfg.delimiter,
                dtype={"user_id": str, "city_id": str, "month": str},
            )
            controls = month_frame.drop(
                columns=[c for c in ("exploration_window",) if c in month_frame.columns]
            )
            frame = city_frame.merge(controls, on=["user_id", "month"], how="left")
        if (
            model.outcome == "taste_exploration"
            and "exploration_baseline_periods" in frame.columns
            and model.min_baseline_periods > 0
        ):
            frame = frame[frame["exploration_baseline_periods"] >= model.min_baseline_periods]
        return frame

    def _stage_regress(self) -> list[Path]:
        cfg = self.cfg
        out_dir = self.path("regress")
        outputs = []
        results: dict[str, dict] = {}
        tables: dict[str, pd.DataFrame] = {}
        for model in cfg.models:
            frame = self._assemble_model_panel(model)
            bases = sorted({b for term in model.regressors for b in econ.term_bases(term)})
            needed = [model.outcome] + bases
            frame, n_dropped = econ.drop_missing(frame, needed)
            if frame.empty:
                raise econ.EstimationError(f"model {model.name}: no complete rows")
            frame = econ.standardize(frame, model.standardize, model.log_transform)
            fit = econ.fe_ols(
                frame,
                outcome=model.outcome,
                regressors=list(model.regressors),
                unit_col="user_id",
                period_col="month",
                unit_fe=model.unit_fe,
                period_dummies=model.period_dummies,
            )
            results[model.name] = {
                "panel": model.panel,
                "outcome": model.outcome,
                "n_obs": fit.n_obs,
                "n_units": fit.n_units,
                "n_clusters": fit.n_clusters,
                "listwise_dropped": n_dropped,
                "r2_within": fit.r2_within,
                "r2_between": fit.r2_between,
                "r2_overall": fit.r2_overall,
                "dropped_collinear": fit.dropped_collinear,
                "params": fit.params,
                "se": fit.se,
                "p_values": fit.p_values,
            }
            tables[model.name] = fit.to_frame()
            coef_path = out_dir / f"{model.name}_coefs.csv"
            with atomic_output(coef_path) as tmp:
                fit.to_frame().to_csv(tmp, index=False, sep=cfg.delimiter)
            outputs.append(coef_path)

        with atomic_output(out_dir / "regress_results.json") as tmp:
            tmp.write_text(json.dumps(results, indent=2, sort_keys=True))
        outputs.append(out_dir / "regress_results.json")
        with atomic_output(out_dir / "regress_table.csv") as tmp:
            _write_wide_table(tmp, results, cfg.delimiter)
        outputs.append(out_dir / "regress_table.csv")
        return outputs

    def _stage_did(self) -> list[Path]:
        cfg = self.cfg
        if cfg.did is None:
            raise ConfigError("did", "did stage requested but no did section configured")
        week_path = self.path("metrics", "user_week.csv")
        if not week_path.exists():
            raise MissingArtifactError("metrics", week_path)
        frame = pd.read_csv(
            week_path, sep=cfg.delimiter,
            dtype={"user_id": str, "week": str, "home_country": str},
        )
        if (frame["home_country"] == cfg.did.treated_country).sum() == 0:
            raise ConfigError(
                "did.treated_country",
                f"{cfg.did.treated_country!r} matches no user's home country",
            )
        missing_controls = [c for c in cfg.did.controls if c not in frame.columns]
        if missing_controls:
            raise ConfigError(
                "did.controls", f"not in the weekly metric table: {missing_controls}"
            )
        frame["week_idx"] = frame["week"].map(metrics.week_index)
        treat_idx = metrics.week_index(cfg.did.treatment_week)
        frame["treated"] = (frame["home_country"] == cfg.did.treated_country).astype(float)
        frame["post"] = (frame["week_idx"] >= treat_idx).astype(float)

        key = pd.MultiIndex.from_arrays([frame["user_id"], frame["week_idx"]])
        lagged = []
        for col in cfg.did.controls:
            series = pd.Series(frame[col].to_numpy(), index=key)
            lag_key = pd.MultiIndex.from_arrays([frame["user_id"], frame["week_idx"] - 1])
            name = f"{col}_lag1"
            frame[name] = series.reindex(lag_key).to_numpy()
            lagged.append(name)

        outcome = cfg.did.outcome
        frame, n_dropped = econ.drop_missing(frame, [outcome] + lagged)
        if frame.empty:
            raise econ.EstimationError(
                "did panel has no complete rows after lagging controls; "
                "check weekly coverage of the metric table"
            )
        log_cols = tuple(f"{c}_lag1" for c in cfg.did.log_transform)
        frame = econ.standardize(frame, [outcome] + lagged, log_cols)

        suite = econ.run_did_suite(
            frame,
            outcome=outcome,
            n_leads=cfg.did.n_leads,
            controls=lagged,
            unit_col="user_id",
            period_col="week",
            unit_fe=cfg.did.unit_fe,
            time_fe=cfg.did.time_fe,
        )
        out_dir = self.path("did")
        outputs = []
        doc = {
            "atet": suite.atet,
            "atet_se": suite.atet_se,
            "atet_p": suite.atet_p,
            "pretrend_f": suite.pretrend_f,
            "pretrend_p": suite.pretrend_p,
            "granger_f": suite.granger_f,
            "granger_p": suite.granger_p,
            "granger_leads": suite.granger_leads,
            "n_obs": suite.fit.n_obs,
            "n_users": suite.fit.n_units,
            "listwise_dropped": n_dropped,
            "r2_within": suite.fit.r2_within,
            "r2_between": suite.fit.r2_between,
            "r2_overall": suite.fit.r2_overall,
            "dropped_collinear": suite.fit.dropped_collinear,
            "treated_country": cfg.did.treated_country,
            "treatment_week": cfg.did.treatment_week,
        }
        with atomic_output(out_dir / "did_results.json") as tmp:
            tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
        outputs.append(out_dir / "did_results.json")
        with atomic_output(out_dir / "did_coefs.csv") as tmp:
            suite.fit.to_frame().to_csv(tmp, index=False, sep=cfg.delimiter)
        outputs.append(out_dir / "did_coefs.csv")
        with atomic_output(out_dir / "event_study.csv") as tmp:
            suite.event_study.to_frame().to_csv(tmp, index=False, sep=cfg.delimiter)
        outputs.append(out_dir / "event_study.csv")
        return outputs

    def _stage_report(self) -> list[Path]:
        from . import report

        return report.render(self)


def _stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def _write_wide_table(path: Path, results: dict[str, dict], delimiter: str) -> None:
    """Terms as rows, models as columns, cells 'coef*** (se)'."""
    import csv as _csv

    model_names = sorted(results)
    term_order: list[str] = []
    for name in model_names:
        for term in results[name]["params"]:
            if not term.startswith("period[") and term not in term_order:
                term_order.append(term)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh, delimiter=delimiter)
        writer.writerow(["term"] + model_names)
        for term in term_order:
            row = [term]
            for name in model_names:
                r = results[name]
                if term in r["params"]:
                    cell = (
                        f"{r['params'][term]:.4f}{_stars(r['p_values'][term])} "
                        f"({r['se'][term]:.4f})"
                    )
                else:
                    row_value = ""
                    cell = row_value
                row.append(cell)
            writer.writerow(row)
        for stat in ("n_obs", "n_units", "r2_within", "r2_between", "r2_overall"):
            row = [stat]
            for name in model_names:
                value = results[name][stat]
                row.append(f"{value:.3f}" if isinstance(value, float) else str(value))
            writer.writerow(row)
