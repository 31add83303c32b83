"""Standardization, fixed-effects panel estimation, and the DiD suite.

The estimator is a within (unit-demeaned) OLS with explicit period dummies,
solved by QR factorization, never by inverting normal equations. Inference
is cluster-robust: V = c * (X'X)^-1 (sum_g X_g' e_g e_g' X_g) (X'X)^-1 with
the small-sample factor c = [G/(G-1)] * [(N-1)/(N-K)], K counting the
estimated columns. Coefficient p-values use the normal approximation; joint
tests use F with (q, G-1) degrees of freedom.

Collinear columns are detected by the R diagonal of a sequential QR.
Columns are ordered so that fixed-effect dummies come first: a treated or
post main effect that is a linear combination of the dummies is dropped and
reported, while a collinear regressor of interest is a hard error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats
from scipy.linalg import solve_triangular

logger = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PanelObservation:
    """One standardized user-period row of outcome + regressors."""

    unit_id: str
    period: str
    outcome: float
    regressors: dict[str, float]
    cluster_id: str | None = None


def observations_to_frame(observations: Sequence[PanelObservation]) -> pd.DataFrame:
    rows = []
    for obs in observations:
        row = {"unit_id": obs.unit_id, "period": obs.period, "outcome": obs.outcome}
        row.update(obs.regressors)
        row["cluster_id"] = obs.cluster_id if obs.cluster_id is not None else obs.unit_id
        rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

def standardize(
    frame: pd.DataFrame,
    variables: Sequence[str],
    log_transform: Sequence[str] = (),
) -> pd.DataFrame:
    """z-score the listed columns over the full sample (sample sd, n-1).

    Columns in `log_transform` get ln(1+x) first. Quadratic and interaction
    terms are formed downstream from these z-scores, never the other way
    around.
    """
    out = frame.copy()
    for var in variables:
        if var not in out.columns:
            raise EstimationError(f"standardize: column not in panel: {var}")
        x = out[var].astype(float)
        if var in log_transform:
            if (x < -1.0 + 1e-12).any():
                raise EstimationError(f"standardize: log1p undefined for {var} (values <= -1)")
            x = np.log1p(x)
        sd = x.std(ddof=1)
        if not np.isfinite(sd) or sd == 0.0:
            raise EstimationError(f"standardize: zero variance in {var}")
        out[var] = (x - x.mean()) / sd
    return out


def drop_missing(frame: pd.DataFrame, columns: Sequence[str]) -> tuple[pd.DataFrame, int]:
    """Listwise deletion over the listed columns; returns the dropped count."""
    mask = frame[list(columns)].notna().all(axis=1)
    dropped = int((~mask).sum())
    if dropped:
        logger.info("listwise deletion dropped %d rows", dropped)
    return frame.loc[mask].copy(), dropped


# ---------------------------------------------------------------------------
# Term parsing: "x", "x^2", "a*b" (or "a:b"), built from standardized bases
# ---------------------------------------------------------------------------

def term_bases(term: str) -> list[str]:
    """Base column names a term is built from."""
    if "^2" in term:
        return [term[: term.index("^2")]]
    for sep in ("*", ":"):
        if sep in term:
            return term.split(sep, 1)
    return [term]


def term_column(frame: pd.DataFrame, term: str) -> np.ndarray:
    def col(name: str) -> np.ndarray:
        if name not in frame.columns:
            raise EstimationError(f"unknown regressor column: {name}")
        return frame[name].to_numpy(dtype=np.float64)

    if "^2" in term:
        base = term[: term.index("^2")]
        return col(base) ** 2
    for sep in ("*", ":"):
        if sep in term:
            a, b = term.split(sep, 1)
            return col(a) * col(b)
    return col(term)


# ---------------------------------------------------------------------------
# Core solver
# ---------------------------------------------------------------------------

def _sequential_collinearity(
    X: np.ndarray, names: list[str], rel_tol: float = 1e-8
) -> list[int]:
    """Indices of columns (nearly) dependent on the columns before them."""
    dependent: list[int] = []
    col_norms = np.linalg.norm(X, axis=0)
    scale = col_norms.max() if len(col_norms) else 0.0
    if scale == 0.0:
        return list(range(X.shape[1]))
    R = np.linalg.qr(X, mode="r")
    diag = np.abs(np.diag(R))
    if len(diag) < X.shape[1]:  # more columns than rows: the overflow is dependent
        diag = np.concatenate([diag, np.zeros(X.shape[1] - len(diag))])
    for j in range(X.shape[1]):
        if col_norms[j] == 0.0 or diag[j] <= rel_tol * max(col_norms[j], rel_tol * scale):
            dependent.append(j)
    return dependent


def _qr_solve(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least squares via QR; returns (beta, xtx_inv)."""
    Q, R = np.linalg.qr(X)
    beta = solve_triangular(R, Q.T @ y)
    r_inv = solve_triangular(R, np.eye(R.shape[0]))
    return beta, r_inv @ r_inv.T


def cluster_robust_covariance(
    X: np.ndarray,
    residuals: np.ndarray,
    clusters: np.ndarray,
    xtx_inv: np.ndarray,
    small_sample: bool = True,
) -> tuple[np.ndarray, int]:
    """Sandwich covariance clustered on `clusters`; returns (V, G)."""
    n, k = X.shape
    scores = X * residuals[:, None]
    frame = pd.DataFrame(scores)
    frame["__g"] = clusters
    cluster_scores = frame.groupby("__g", sort=False).sum().to_numpy()
    meat = cluster_scores.T @ cluster_scores
    g = cluster_scores.shape[0]
    if small_sample:
        if g < 2:
            raise EstimationError("cluster-robust covariance needs >= 2 clusters")
        if n <= k:
            raise EstimationError(f"no residual degrees of freedom (N={n}, K={k})")
        c = (g / (g - 1.0)) * ((n - 1.0) / (n - k))
    else:
        c = 1.0
    return c * xtx_inv @ meat @ xtx_inv, g


@dataclass
class FitResult:
    params: dict[str, float]
    se: dict[str, float]
    p_values: dict[str, float]
    covariance: np.ndarray
    param_names: list[str]
    r2_within: float
    r2_between: float
    r2_overall: float
    n_obs: int
    n_units: int
    n_clusters: int
    dropped_collinear: list[str]
    dropped_singleton_units: int
    residuals: np.ndarray = field(repr=False, default=None)

    def coef(self, name: str) -> float:
        return self.params[name]

    def conf_int(self, name: str, z: float = 1.96) -> tuple[float, float]:
        return self.params[name] - z * self.se[name], self.params[name] + z * self.se[name]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "term": self.param_names,
                "coef": [self.params[n] for n in self.param_names],
                "se": [self.se[n] for n in self.param_names],
                "p_value": [self.p_values[n] for n in self.param_names],
            }
        )

    def covariance_block(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.param_names.index(n) for n in names]
        return self.covariance[np.ix_(idx, idx)]


def _squared_corr(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) < 2 or np.std(a) == 0.0 or np.std(b) == 0.0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1] ** 2)


def fe_ols(
    frame: pd.DataFrame,
    outcome: str,
    regressors: Sequence[str],
    unit_col: str = "unit_id",
    period_col: str = "period",
    cluster_col: str | None = None,
    unit_fe: bool = True,
    period_dummies: bool = True,
    droppable: Sequence[str] = (),
) -> FitResult:
    """Panel OLS with optional unit fixed effects (absorbed by demeaning) and
    explicit period dummies, clustered on `cluster_col` (default: the unit).

    `regressors` are term strings over already-standardized columns ("x",
    "x^2", "a*b"). `droppable` columns (e.g. DiD treated/post main effects)
    enter the design but may be silently dropped when the fixed effects
    absorb them; a collinear term in `regressors` raises instead.
    """
    work = frame.copy()
    needed = [outcome] + list(droppable)
    for term in regressors:
        work[f"__term_{term}"] = term_column(work, term)
        needed.append(f"__term_{term}")
    if work[needed].isna().any().any():
        bad = [c for c in needed if work[c].isna().any()]
        raise EstimationError(
            f"missing values in estimation sample (listwise-delete upstream): {bad}"
        )

    dropped_singletons = 0
    if unit_fe:
        period_counts = work.groupby(unit_col)[period_col].nunique()
        singletons = set(period_counts[period_counts < 2].index)
        if singletons:
            dropped_singletons = int(work[unit_col].isin(singletons).sum())
            logger.info(
                "dropping %d observations from %d single-period units",
                dropped_singletons, len(singletons),
            )
            work = work[~work[unit_col].isin(singletons)]
    if work.empty:
        raise EstimationError("no observations left to estimate on")

    # Column order matters for collinearity attribution: dummies and the
    # intercept first, droppable main effects next, regressors last.
    columns: list[np.ndarray] = []
    names: list[str] = []
    protected: set[str] = set()
    if not unit_fe:
        columns.append(np.ones(len(work)))
        names.append("intercept")
    if period_dummies:
        periods = sorted(work[period_col].unique())
        for p in periods[1:]:  # first period is the omitted baseline
            columns.append((work[period_col] == p).to_numpy(dtype=np.float64))
            names.append(f"period[{p}]")
    for aux in droppable:
        columns.append(work[aux].to_numpy(dtype=np.float64))
        names.append(aux)
    for term in regressors:
        columns.append(work[f"__term_{term}"].to_numpy(dtype=np.float64))
        names.append(term)
        protected.add(term)

    if not columns:
        raise EstimationError("empty design matrix")
    X = np.column_stack(columns)
    y = work[outcome].to_numpy(dtype=np.float64)
    units = work[unit_col].to_numpy()
    clusters = work[cluster_col].to_numpy() if cluster_col else units

    if unit_fe:
        codes, _ = pd.factorize(units)
        stacked = np.column_stack([X, y])
        means = (
            pd.DataFrame(stacked).groupby(codes, sort=False).transform("mean").to_numpy()
        )
        Xd = X - means[:, :-1]
        yd = y - means[:, -1]
    else:
        Xd, yd = X, y

    dependent = _sequential_collinearity(Xd, names)
    dropped_names = [names[j] for j in dependent]
    fatal = [n for n in dropped_names if n in protected]
    if fatal:
        raise EstimationError(f"regressors of interest are collinear: {fatal}")
    if dropped_names:
        logger.info("dropping collinear columns: %s", dropped_names)
        keep = [j for j in range(X.shape[1]) if j not in dependent]
        X, Xd = X[:, keep], Xd[:, keep]
        names = [names[j] for j in keep]

    if Xd.shape[1] >= Xd.shape[0]:
        raise EstimationError(
            f"under-determined design: {Xd.shape[1]} columns for {Xd.shape[0]} observations"
        )
    beta, xtx_inv = _qr_solve(Xd, yd)
    residuals = yd - Xd @ beta
    covariance, g = cluster_robust_covariance(Xd, residuals, clusters, xtx_inv)
    se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.inf)
    p = 2.0 * stats.norm.sf(np.abs(z))

    fitted_x = X @ beta  # excludes absorbed unit effects
    unit_groups = pd.DataFrame({"f": fitted_x, "y": y, "u": units}).groupby("u", sort=False)
    unit_means = unit_groups.mean()
    if unit_fe:
        sst = float(yd @ yd)
        ssr = float(residuals @ residuals)
        r2_within = 1.0 - ssr / sst if sst > 0 else float("nan")
    else:
        f_within = fitted_x - unit_groups["f"].transform("mean").to_numpy()
        y_within = y - unit_groups["y"].transform("mean").to_numpy()
        r2_within = _squared_corr(f_within, y_within)
    r2_between = _squared_corr(unit_means["f"].to_numpy(), unit_means["y"].to_numpy())
    r2_overall = _squared_corr(fitted_x, y)

    return FitResult(
        params=dict(zip(names, beta)),
        se=dict(zip(names, se)),
        p_values=dict(zip(names, p)),
        covariance=covariance,
        param_names=names,
        r2_within=r2_within,
        r2_between=r2_between,
        r2_overall=r2_overall,
        n_obs=len(work),
        n_units=int(pd.Series(units).nunique()),
        n_clusters=g,
        dropped_collinear=dropped_names,
        dropped_singleton_units=dropped_singletons,
        residuals=residuals,
    )


def wald_joint_test(fit: FitResult, names: Sequence[str]) -> tuple[float, float]:
    """Joint test that the named coefficients are all zero.

    Returns (F, p) with F = W/q referred to F(q, G-1).
    """
    missing = [n for n in names if n not in fit.params]
    if missing:
        raise EstimationError(f"coefficients not in fit: {missing}")
    b = np.array([fit.params[n] for n in names])
    V = fit.covariance_block(names)
    try:
        w = float(b @ np.linalg.solve(V, b))
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"singular covariance block for {names}") from exc
    q = len(names)
    f_stat = w / q
    p = float(stats.f.sf(f_stat, q, max(1, fit.n_clusters - 1)))
    return f_stat, p


# ---------------------------------------------------------------------------
# Difference-in-differences suite
# ---------------------------------------------------------------------------

ATET_NAME = "treated_x_post"


@dataclass
class EventStudyResult:
    reference_period: str
    periods: list[str]
    relative_weeks: list[int]
    coefficients: list[float]
    std_errors: list[float]
    ci_lower: list[float]
    ci_upper: list[float]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "period": self.periods,
                "relative_week": self.relative_weeks,
                "coef": self.coefficients,
                "se": self.std_errors,
                "ci_lower": self.ci_lower,
                "ci_upper": self.ci_upper,
            }
        )


@dataclass
class DiDResult:
    atet: float
    atet_se: float
    atet_p: float
    fit: FitResult
    pretrend_f: float | None = None
    pretrend_p: float | None = None
    granger_f: float | None = None
    granger_p: float | None = None
    granger_leads: dict[str, float] | None = None
    event_study: EventStudyResult | None = None


def _did_periods(frame: pd.DataFrame, period_col: str, post_col: str) -> tuple[list, int]:
    """Sorted periods and the ordinal of the first post period."""
    periods = sorted(frame[period_col].unique())
    ordinal = {p: i for i, p in enumerate(periods)}
    post_by_period = frame.groupby(period_col)[post_col].agg(["min", "max"])
    if (post_by_period["min"] != post_by_period["max"]).any():
        raise EstimationError("post flag must be constant within a period")
    post_periods = [p for p in periods if post_by_period.loc[p, "max"] == 1]
    if not post_periods or len(post_periods) == len(periods):
        raise EstimationError("need both pre- and post-treatment periods")
    first_post = ordinal[post_periods[0]]
    flagged = {ordinal[p] for p in post_periods}
    if flagged != set(range(first_post, len(periods))):
        raise EstimationError("post flag must be a threshold in the period order")
    return periods, first_post


def _check_groups(frame: pd.DataFrame, treated_col: str, post_col: str) -> None:
    cells = frame.groupby([treated_col, post_col]).size()
    for treated in (0, 1):
        for post in (0, 1):
            if (treated, post) not in cells.index:
                raise EstimationError(
                    f"group treated={treated} has no observations with post={post}"
                )


def did_estimate(
    frame: pd.DataFrame,
    outcome: str,
    treated_col: str = "treated",
    post_col: str = "post",
    controls: Sequence[str] = (),
    unit_col: str = "unit_id",
    period_col: str = "period",
    cluster_col: str | None = None,
    unit_fe: bool = True,
    time_fe: bool = True,
) -> DiDResult:
    """ATET from the two-way DiD regression.

    The treated x post interaction is the coefficient of interest; treated
    and post main effects enter as droppable columns, so in fixed-effects
    specifications they are detected as collinear and dropped, while the
    no-FE robustness variants keep and report them.
    """
    _check_groups(frame, treated_col, post_col)
    _did_periods(frame, period_col, post_col)
    work = frame.copy()
    work[ATET_NAME] = work[treated_col] * work[post_col]
    fit = fe_ols(
        work,
        outcome=outcome,
        regressors=[ATET_NAME] + list(controls),
        unit_col=unit_col,
        period_col=period_col,
        cluster_col=cluster_col,
        unit_fe=unit_fe,
        period_dummies=time_fe,
        droppable=(treated_col, post_col),
    )
    return DiDResult(
        atet=fit.params[ATET_NAME],
        atet_se=fit.se[ATET_NAME],
        atet_p=fit.p_values[ATET_NAME],
        fit=fit,
    )


def pretrend_test(
    frame: pd.DataFrame,
    outcome: str,
    treated_col: str = "treated",
    post_col: str = "post",
    unit_col: str = "unit_id",
    period_col: str = "period",
    cluster_col: str | None = None,
) -> tuple[float, float]:
    """Parallel-trends check: fit group-specific linear trends on the
    pre-treatment sample and test that the trend difference is zero."""
    periods, first_post = _did_periods(frame, period_col, post_col)
    if first_post < 3:
        raise EstimationError(f"pretrend test needs >= 3 pre-treatment periods, got {first_post}")
    ordinal = {p: i for i, p in enumerate(periods)}
    pre = frame[frame[post_col] == 0].copy()
    pre["__trend"] = pre[period_col].map(ordinal).astype(float)
    pre["__trend_diff"] = pre["__trend"] * pre[treated_col]
    fit = fe_ols(
        pre,
        outcome=outcome,
        regressors=["__trend", "__trend_diff"],
        unit_col=unit_col,
        period_col=period_col,
        cluster_col=cluster_col,
        unit_fe=False,
        period_dummies=False,
        droppable=(treated_col,),
    )
    b = fit.params["__trend_diff"]
    se = fit.se["__trend_diff"]
    scale = max(float(pre[outcome].std(ddof=1)), 1e-30)
    if se <= 1e-14 * scale:  # exact fit: the Wald ratio is 0/0 noise
        return (0.0, 1.0) if abs(b) <= 1e-10 * scale else (float("inf"), 0.0)
    return wald_joint_test(fit, ["__trend_diff"])


def granger_anticipation_test(
    frame: pd.DataFrame,
    n_leads: int,
    outcome: str,
    treated_col: str = "treated",
    post_col: str = "post",
    controls: Sequence[str] = (),
    unit_col: str = "unit_id",
    period_col: str = "period",
    cluster_col: str | None = None,
) -> tuple[float, float, dict[str, float]]:
    """Joint Wald test that treated x (k weeks before treatment) dummies are
    zero for k = 1..n_leads; rejection signals anticipatory effects."""
    if n_leads < 1:
        raise ValueError("n_leads must be >= 1")
    periods, first_post = _did_periods(frame, period_col, post_col)
    if n_leads >= first_post:
        raise EstimationError(
            f"n_leads={n_leads} exhausts the {first_post} pre-treatment periods"
        )
    work = frame.copy()
    work[ATET_NAME] = work[treated_col] * work[post_col]
    lead_names = []
    for k in range(1, n_leads + 1):
        lead_period = periods[first_post - k]
        name = f"lead{k}"
        work[name] = ((work[period_col] == lead_period) & (work[treated_col] == 1)).astype(float)
        lead_names.append(name)
    fit = fe_ols(
        work,
        outcome=outcome,
        regressors=[ATET_NAME] + lead_names + list(controls),
        unit_col=unit_col,
        period_col=period_col,
        cluster_col=cluster_col,
        unit_fe=True,
        period_dummies=True,
        droppable=(treated_col, post_col),
    )
    f_stat, p = wald_joint_test(fit, lead_names)
    leads = {name: fit.params[name] for name in lead_names}
    return f_stat, p, leads


def event_study(
    frame: pd.DataFrame,
    outcome: str,
    treated_col: str = "treated",
    post_col: str = "post",
    controls: Sequence[str] = (),
    unit_col: str = "unit_id",
    period_col: str = "period",
    cluster_col: str | None = None,
) -> EventStudyResult:
    """Per-period treatment coefficients with 95% CIs.

    The reference period (the last pre-treatment period) is the omitted
    category; its coefficient is exactly zero by construction.
    """
    _check_groups(frame, treated_col, post_col)
    periods, first_post = _did_periods(frame, period_col, post_col)
    reference = periods[first_post - 1]
    work = frame.copy()
    names = []
    for p in periods:
        if p == reference:
            continue
        name = f"treated_x_period[{p}]"
        work[name] = ((work[period_col] == p) & (work[treated_col] == 1)).astype(float)
        names.append(name)
    fit = fe_ols(
        work,
        outcome=outcome,
        regressors=names + list(controls),
        unit_col=unit_col,
        period_col=period_col,
        cluster_col=cluster_col,
        unit_fe=True,
        period_dummies=True,
        droppable=(treated_col, post_col),
    )
    coefficients, ses, lows, highs, rel = [], [], [], [], []
    for i, p in enumerate(periods):
        rel.append(i - first_post)
        if p == reference:
            coefficients.append(0.0)
            ses.append(0.0)
            lows.append(0.0)
            highs.append(0.0)
            continue
        name = f"treated_x_period[{p}]"
        coefficients.append(fit.params[name])
        ses.append(fit.se[name])
        lo, hi = fit.conf_int(name)
        lows.append(lo)
        highs.append(hi)
    return EventStudyResult(
        reference_period=str(reference),
        periods=[str(p) for p in periods],
        relative_weeks=rel,
        coefficients=coefficients,
        std_errors=ses,
        ci_lower=lows,
        ci_upper=highs,
    )


def run_did_suite(
    frame: pd.DataFrame,
    outcome: str,
    n_leads: int = 3,
    controls: Sequence[str] = (),
    **kwargs,
) -> DiDResult:
    """did_estimate plus parallel-trends, Granger anticipation, and the
    event study, bundled into one DiDResult."""
    result = did_estimate(frame, outcome, controls=controls, **kwargs)
    estimation_kwargs = {
        k: v for k, v in kwargs.items() if k in
        ("treated_col", "post_col", "unit_col", "period_col", "cluster_col")
    }
    result.pretrend_f, result.pretrend_p = pretrend_test(frame, outcome, **estimation_kwargs)
    result.granger_f, result.granger_p, result.granger_leads = granger_anticipation_test(
        frame, n_leads, outcome, controls=controls, **estimation_kwargs
    )
    result.event_study = event_study(frame, outcome, controls=controls, **estimation_kwargs)
    return result
