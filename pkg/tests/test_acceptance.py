"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and timings inline.
"""

import hashlib
import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from conftest import cluster_separation
from tastepipe import econ, embed, geo, ingest, synth, taste
from tastepipe.cli import main as cli_main
from tastepipe.metrics import taste_adaptation, taste_exploration


@contextmanager
def criterion(number: int, title: str, budget_seconds: float):
    started = time.time()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE FAIL — criterion {number}: {title}")
        raise
    elapsed = time.time() - started
    print(f"ACCEPTANCE PASS — criterion {number}: {title} ({elapsed:.1f}s)")
    assert elapsed < budget_seconds, f"criterion {number} exceeded {budget_seconds}s budget"


# ---------------------------------------------------------------------------
# 1. Embedding separation on a planted-cluster corpus
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def acceptance_embedding():
    cfg = synth.SynthConfig(
        seed=101,
        n_users=30,
        n_artists=40,
        songs_per_artist=10,  # 400 songs (cap: 2,000)
        n_genres=8,
        within_genre_session_prob=0.92,
        months=6,
        sessions_per_user_month=25,  # ~4,500 sessions (cap: 50,000)
        mean_session_length=7,
        short_stream_prob=0.0,
        travel_prob=0.2,
    )
    events, catalog, _ = synth.generate_sessions(cfg)
    kept, _ = ingest.filter_streams(events, 60)
    sessions_by_user = ingest.sessionize(kept)
    sessions = [s.track_ids() for u in sorted(sessions_by_user) for s in sessions_by_user[u]]
    corpus = embed.build_vocabulary(sessions, min_count=2)
    train_cfg = embed.S2VConfig(dimension=50, window=3, epochs=10, negative=10, seed=42)
    t0 = time.time()
    space = embed.train_s2v(corpus, train_cfg)
    return space, catalog, len(sessions), time.time() - t0


def test_criterion_1_embedding_separation(acceptance_embedding):
    with criterion(1, "embedding separation on planted clusters", 120.0):
        space, catalog, n_sessions, train_seconds = acceptance_embedding
        assert len(space.vocabulary) <= 2_000
        assert n_sessions <= 50_000
        assert space.dimension == 50
        assert train_seconds < 120.0, f"training took {train_seconds:.0f}s"

        within, cross = cluster_separation(space, catalog.track_genre)
        print(f"  within={within:.3f} cross={cross:.3f} gap={within - cross:.3f} "
              f"(trained {len(space.vocabulary)} tracks in {train_seconds:.1f}s)")
        assert within - cross >= 0.15

        report = embed.artist_similarity_report(space, catalog.track_artist)
        print(f"  artist within={report.within_mean:.3f} cross={report.cross_mean:.3f} "
              f"t={report.t_statistic:.1f}")
        assert report.t_statistic > 0


# ---------------------------------------------------------------------------
# 2. Gradient check on a 3-song toy corpus
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_check():
    with criterion(2, "negative-sampling gradients vs central differences", 1.0):
        rng = np.random.default_rng(7)
        inputs = rng.normal(size=(3, 6)) * 0.4
        outputs = rng.normal(size=(3, 6)) * 0.4
        cases = [([0, 2], 1, [0, 2]), ([1], 0, [2]), ([0, 1], 2, [0])]
        h = 1e-6
        worst = 0.0
        for context, target, noise in cases:
            grad_in, grad_out = embed.negative_sampling_gradients(
                inputs, outputs, context, target, noise
            )
            for mat, grad in ((inputs, grad_in), (outputs, grad_out)):
                for i in range(mat.shape[0]):
                    for j in range(mat.shape[1]):
                        orig = mat[i, j]
                        mat[i, j] = orig + h
                        up = embed.negative_sampling_loss(inputs, outputs, context, target, noise)
                        mat[i, j] = orig - h
                        down = embed.negative_sampling_loss(inputs, outputs, context, target, noise)
                        mat[i, j] = orig
                        fd = (up - down) / (2 * h)
                        scale = max(abs(fd), abs(grad[i, j]), 1e-12)
                        worst = max(worst, abs(fd - grad[i, j]) / scale)
        print(f"  max relative error {worst:.2e}")
        assert worst <= 1e-4


# ---------------------------------------------------------------------------
# 3. Estimator oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_3_estimator_oracle_equivalence():
    with criterion(3, "fe_ols vs brute-force dummy OLS and naive sandwich", 10.0):
        rng = np.random.default_rng(11)
        n_units, n_periods = 100, 6
        rows = []
        for u in range(n_units):
            fe = rng.normal()
            for t in range(n_periods):
                x1, x2 = rng.normal(), rng.normal()
                rows.append({
                    "unit_id": f"u{u:03d}", "period": t,
                    "outcome": fe + 0.2 * t + 1.5 * x1 - 0.7 * x2 + rng.normal(),
                    "x1": x1, "x2": x2,
                })
        frame = pd.DataFrame(rows)
        fit = econ.fe_ols(frame, "outcome", ["x1", "x2"])

        # oracle A: dummy-variable OLS, one intercept per unit
        unit_d = pd.get_dummies(frame["unit_id"]).to_numpy(dtype=float)
        period_d = pd.get_dummies(frame["period"], drop_first=True).to_numpy(dtype=float)
        X_dummy = np.column_stack([unit_d, period_d, frame[["x1", "x2"]].to_numpy()])
        beta, *_ = np.linalg.lstsq(X_dummy, frame["outcome"].to_numpy(), rcond=None)
        assert abs(fit.params["x1"] - beta[-2]) < 1e-8
        assert abs(fit.params["x2"] - beta[-1]) < 1e-8

        # oracle B: naive sandwich assembly on the demeaned design
        design_cols = []
        names = []
        periods = sorted(frame["period"].unique())
        for p in periods[1:]:
            design_cols.append((frame["period"] == p).to_numpy(dtype=float))
            names.append(f"period[{p}]")
        design_cols += [frame["x1"].to_numpy(), frame["x2"].to_numpy()]
        names += ["x1", "x2"]
        X = np.column_stack(design_cols)
        y = frame["outcome"].to_numpy()
        units = frame["unit_id"].to_numpy()
        for col in range(X.shape[1]):
            X[:, col] -= pd.Series(X[:, col]).groupby(units).transform("mean").to_numpy()
        yd = y - pd.Series(y).groupby(units).transform("mean").to_numpy()
        beta_d = np.array([fit.params[n] for n in names])
        resid = yd - X @ beta_d
        bread = np.linalg.inv(X.T @ X)
        meat = np.zeros((X.shape[1], X.shape[1]))
        for g in np.unique(units):
            score = X[units == g].T @ resid[units == g]
            meat += np.outer(score, score)
        G, N, K = n_units, len(frame), X.shape[1]
        c = (G / (G - 1)) * ((N - 1) / (N - K))
        V = c * bread @ meat @ bread
        max_gap = float(np.max(np.abs(V - fit.covariance)))
        print(f"  coefficient gap < 1e-8; covariance gap {max_gap:.2e}")
        assert max_gap < 1e-10


# ---------------------------------------------------------------------------
# 4. Coefficient recovery with quadratic and interaction terms
# ---------------------------------------------------------------------------

def test_criterion_4_coefficient_recovery():
    with criterion(4, "planted coefficients recovered on 2,000 x 24 panel", 30.0):
        coefs = {"x1": 0.05, "x2": 0.40, "x3": -0.25, "x1^2": -0.10, "x1*x2": 0.08}
        cfg = synth.SynthConfig(seed=131, n_users=2_000, panel_months=24,
                                panel_coefficients=coefs, noise_sd=1.0)
        panel, _ = synth.generate_panel(cfg)
        std = econ.standardize(panel, ["x1", "x2", "x3"])
        fit = econ.fe_ols(std, "outcome", list(coefs))
        for term, beta in coefs.items():
            gap_se = abs(fit.params[term] - beta) / fit.se[term]
            print(f"  {term}: est {fit.params[term]:+.4f} truth {beta:+.3f} |err|/se={gap_se:.2f}")
            assert gap_se < 3.0


# ---------------------------------------------------------------------------
# 5. DiD recovery and Monte Carlo calibration
# ---------------------------------------------------------------------------

def test_criterion_5_did_recovery_and_calibration():
    with criterion(5, "DiD recovery, size calibration, pretrend uniformity, granger power", 300.0):
        # recovery of the planted headline-scale effect
        cfg = synth.SynthConfig(seed=141, planted_atet=0.023, did_n_users=200,
                                did_n_weeks=20, did_treatment_week=12, did_noise_sd=0.05)
        panel, _ = synth.generate_did_panel(cfg)
        result = econ.did_estimate(panel, "outcome")
        gap_se = abs(result.atet - 0.023) / result.atet_se
        print(f"  ATET {result.atet:+.4f} (se {result.atet_se:.4f}) |err|/se={gap_se:.2f}")
        assert gap_se < 3.0

        # size and pretrend calibration under a planted null, 500 draws
        base = synth.SynthConfig(planted_atet=0.0, did_n_users=120, did_n_weeks=20,
                                 did_treatment_week=12, did_noise_sd=0.05,
                                 unit_effect_sd=0.3, period_effect_sd=0.1)
        mc = synth.monte_carlo_did(base, n_draws=500, master_seed=20240901)
        ks = stats.kstest(mc.pretrend_p_values, "uniform")
        print(f"  null rejection rate {mc.rejection_rate:.3f} (target 0.05 +/- 0.02)")
        print(f"  pretrend p-value KS distance {ks.statistic:.3f} (target < 0.1)")
        assert 0.03 <= mc.rejection_rate <= 0.07
        assert ks.statistic < 0.1

        # granger power against a planted 2-week anticipation
        ant = synth.SynthConfig(seed=142, planted_atet=0.023, did_n_users=200,
                                did_n_weeks=20, did_treatment_week=12, did_noise_sd=0.02,
                                did_anticipation_weeks=2, did_anticipation_effect=0.023)
        panel_ant, _ = synth.generate_did_panel(ant)
        f_stat, p, _ = econ.granger_anticipation_test(panel_ant, 3, "outcome")
        print(f"  granger on planted anticipation: F={f_stat:.1f} p={p:.2e}")
        assert p < 0.01


# ---------------------------------------------------------------------------
# 6. Event-study consistency
# ---------------------------------------------------------------------------

def test_criterion_6_event_study_consistency():
    with criterion(6, "event-study reference zero and post-mean == ATET", 30.0):
        cfg = synth.SynthConfig(seed=151, planted_atet=0.023, did_n_users=80,
                                did_n_weeks=16, did_treatment_week=10, did_noise_sd=0.0)
        panel, _ = synth.generate_did_panel(cfg)
        es = econ.event_study(panel, "outcome")
        atet = econ.did_estimate(panel, "outcome").atet
        ref_idx = es.periods.index(es.reference_period)
        assert es.coefficients[ref_idx] == 0.0
        post_mean = float(np.mean(
            [c for c, r in zip(es.coefficients, es.relative_weeks) if r >= 0]
        ))
        print(f"  post-mean {post_mean:.8f} vs ATET {atet:.8f}")
        assert abs(post_mean - atet) < 1e-6


# ---------------------------------------------------------------------------
# 7. Metric invariant suite
# ---------------------------------------------------------------------------

def test_criterion_7_metric_invariants():
    with criterion(7, "metric ranges, antisymmetry, LOO identity, haversine properties", 60.0):
        rng = np.random.default_rng(33)

        # exploration stays in [0, 2] across random histories
        for _ in range(200):
            vectors = {f"2019-{m:02d}": rng.normal(size=5) for m in range(1, 9)}
            out = taste_exploration(vectors, "2019-08")
            assert out is not None and 0.0 <= out[0] <= 2.0

        # adaptation: the three boundary fixtures and antisymmetry
        cv = np.array([1.0, 0.0])
        orth = np.array([0.0, 1.0])
        assert taste_adaptation(cv, cv, cv) == pytest.approx(0.0)
        assert taste_adaptation(cv, orth, cv) == pytest.approx(1.0)
        assert taste_adaptation(orth, cv, cv) == pytest.approx(-1.0)
        for _ in range(100):
            a, b, c = rng.normal(size=(3, 4))
            assert taste_adaptation(a, b, c) == pytest.approx(
                -taste_adaptation(b, a, c), abs=1e-12
            )

        # leave-one-out identity at 1e-10
        month_vectors = {
            (f"u{i}", "2020-01"): taste.TasteVector(
                taste.Scope.USER_MONTH, (f"u{i}", "2020-01"), rng.normal(size=8), 1
            )
            for i in range(23)
        }
        loo = taste.MonthlyLooMeans(month_vectors)
        mean = np.mean([tv.vector for tv in month_vectors.values()], axis=0)
        n = len(month_vectors)
        for (user, month), tv in month_vectors.items():
            lhs = n * mean
            rhs = tv.vector + (n - 1) * loo.loo(user, month)
            assert np.max(np.abs(lhs - rhs)) < 1e-10

        # haversine symmetry + triangle inequality over 1,000 random triples
        def random_city(i):
            return geo.CityLocation(
                f"c{i}", float(rng.uniform(-90, 90)), float(rng.uniform(-179.9, 180)), "x"
            )

        for i in range(1_000):
            a, b, c = random_city(3 * i), random_city(3 * i + 1), random_city(3 * i + 2)
            assert geo.haversine_km(a, b) == geo.haversine_km(b, a)
            assert geo.haversine_km(a, c) <= (
                geo.haversine_km(a, b) + geo.haversine_km(b, c) + 1e-6
            )

        # London-Paris against the independent spherical-law-of-cosines oracle
        london = geo.CityLocation("london", 51.5074, -0.1278, "uk")
        paris = geo.CityLocation("paris", 48.8566, 2.3522, "fr")
        p1, p2 = math.radians(london.latitude), math.radians(paris.latitude)
        dl = math.radians(paris.longitude - london.longitude)
        oracle = geo.EARTH_RADIUS_KM * math.acos(
            math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
        )
        got = geo.haversine_km(london, paris)
        print(f"  London-Paris {got:.2f} km vs oracle {oracle:.2f} km")
        assert abs(got - oracle) / oracle < 0.005


# ---------------------------------------------------------------------------
# 8. Pipeline determinism
# ---------------------------------------------------------------------------

def test_criterion_8_pipeline_determinism(tmp_path, monkeypatch):
    with criterion(8, "run all twice -> byte-identical artifact trees", 240.0):
        import yaml

        from test_cli import TINY_CONFIG

        config_path = tmp_path / "cfg.yaml"
        config_path.write_text(yaml.safe_dump(TINY_CONFIG))

        trees = []
        for run in ("first", "second"):
            out_dir = tmp_path / run
            monkeypatch.setenv("TASTEPIPE_OUTPUT_DIR", str(out_dir))
            assert cli_main(["run", "all", "--config", str(config_path)]) == 0
            trees.append(out_dir)

        first, second = trees
        rel_first = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
        rel_second = sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
        assert rel_first == rel_second
        compared = 0
        for rel in rel_first:
            a, b = first / rel, second / rel
            if rel.parts[0] == "manifests":
                # manifests record wall-clock timings; everything else must match
                doc_a, doc_b = json.loads(a.read_text()), json.loads(b.read_text())
                doc_a.pop("timing"), doc_b.pop("timing")
                assert doc_a == doc_b, f"manifest drift in {rel}"
            else:
                digest_a = hashlib.sha256(a.read_bytes()).hexdigest()
                digest_b = hashlib.sha256(b.read_bytes()).hexdigest()
                assert digest_a == digest_b, f"byte drift in {rel}"
                compared += 1
        print(f"  {compared} artifacts byte-identical across independent runs")
        assert compared >= 20
