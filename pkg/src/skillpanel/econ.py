"""Panel estimators: fixed-effects OLS and examiner-leniency 2SLS.

Everything here works on plain numpy arrays extracted from a pandas frame.
Fixed effects are absorbed by alternating within-group demeaning rather than
dummy expansion, so the estimators stay usable on panels with thousands of
firm/occupation levels. Tests cross-check the absorbed estimates against an
explicit dummy-expansion regression built independently.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

DEFAULT_CONTROLS = ("log_assets", "roa", "leverage", "rnd_intensity")
DEFAULT_FIXED_EFFECTS = ("firm_id", "occ_id", "year")
LENIENCY_WINDOW = (2010, 2017)


class EstimationError(ValueError):
    """Raised when a regression cannot be run as specified."""


class CollinearityError(EstimationError):
    """Raised when regressors are linearly dependent after demeaning."""

    def __init__(self, columns: Sequence[str]):
        self.columns = tuple(columns)
        super().__init__(
            "collinear regressors after demeaning: " + ", ".join(self.columns)
        )


class DemeaningError(EstimationError):
    """Raised when alternating projections fail to converge."""


@dataclass(frozen=True)
class RegressionSpec:
    """What to regress on what; composite effects use the "a*b" syntax."""

    outcome: str
    regressor: str = "ai_stock"
    controls: tuple[str, ...] = DEFAULT_CONTROLS
    fixed_effects: tuple[str, ...] = DEFAULT_FIXED_EFFECTS
    cluster: str = "firm_id"
    transform: str = "log1p"

    def __post_init__(self):
        if self.transform not in ("log1p", "level"):
            raise EstimationError(f"unknown transform: {self.transform!r}")
        if not self.fixed_effects:
            raise EstimationError("at least one fixed effect is required")

    def spec_hash(self) -> str:
        canon = ";".join(
            [
                f"outcome={self.outcome}",
                f"regressor={self.regressor}",
                "controls=" + ",".join(self.controls),
                "fe=" + ",".join(self.fixed_effects),
                f"cluster={self.cluster}",
                f"transform={self.transform}",
            ]
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def fe_columns(self) -> list[str]:
        cols: list[str] = []
        for fe in self.fixed_effects:
            for part in fe.split("*"):
                if part not in cols:
                    cols.append(part)
        return cols


@dataclass
class EstimateResult:
    method: str
    coefficients: dict[str, float]
    std_errors: dict[str, float]
    t_stats: dict[str, float]
    n_obs: int
    n_dropped: int
    r2_within: float
    adj_r2: float
    cluster_count: int
    fe_levels: dict[str, int]
    spec: RegressionSpec
    first_stage_f: float | None = None
    weak_instrument: bool = False
    design: dict = field(default_factory=dict, repr=False)

    @property
    def coefficient(self) -> float:
        return self.coefficients[self.spec.regressor]

    @property
    def std_error(self) -> float:
        return self.std_errors[self.spec.regressor]


def demean(
    values: np.ndarray,
    groups: Sequence[np.ndarray],
    tol: float = 1e-8,
    max_iter: int = 500,
) -> tuple[np.ndarray, int]:
    """Remove group means for every partition by alternating projections.

    Converges when the largest absolute within-group mean across all
    partitions drops to tol. Returns the demeaned array and the number of
    full sweeps performed.
    """
    X = np.array(values, dtype=np.float64)
    flat = X.ndim == 1
    if flat:
        X = X[:, None]
    if not groups:
        raise EstimationError("demeaning requires at least one partition")
    counts = []
    for codes in groups:
        n_levels = int(codes.max()) + 1 if len(codes) else 0
        counts.append(np.bincount(codes, minlength=n_levels).astype(np.float64))
    for sweep in range(1, max_iter + 1):
        worst = 0.0
        for codes, cnt in zip(groups, counts):
            sums = np.zeros((len(cnt), X.shape[1]))
            np.add.at(sums, codes, X)
            means = sums / cnt[:, None]
            worst = max(worst, float(np.abs(means).max(initial=0.0)))
            X -= means[codes]
        if worst <= tol:
            return (X[:, 0] if flat else X), sweep
    raise DemeaningError(
        f"demeaning did not converge in {max_iter} sweeps "
        f"(last max group mean {worst:.3e})"
    )


def _fe_codes(df: pd.DataFrame, fe: str) -> np.ndarray:
    parts = fe.split("*")
    if len(parts) == 1:
        codes, _ = pd.factorize(df[parts[0]], sort=True)
    else:
        key = df[parts[0]].astype(str)
        for p in parts[1:]:
            key = key + "\x1f" + df[p].astype(str)
        codes, _ = pd.factorize(key, sort=True)
    return codes.astype(np.int64)


def _prepare(
    panel: pd.DataFrame, spec: RegressionSpec, extra: Sequence[str] = ()
) -> tuple[pd.DataFrame, int]:
    needed = [spec.outcome, spec.regressor, *spec.controls, *extra]
    needed += [c for c in spec.fe_columns() if c not in needed]
    if spec.cluster not in needed:
        needed.append(spec.cluster)
    missing = [c for c in needed if c not in panel.columns]
    if missing:
        raise EstimationError("panel is missing columns: " + ", ".join(missing))
    df = panel[needed].dropna()
    return df.reset_index(drop=True), len(panel) - len(df)


def _transform_outcome(y: np.ndarray, transform: str) -> np.ndarray:
    if transform == "log1p":
        if (y <= -1.0).any():
            raise EstimationError("log1p outcome requires values > -1")
        return np.log1p(y)
    return y.astype(np.float64)


def _check_collinearity(X: np.ndarray, names: Sequence[str]) -> None:
    # incremental rank scan so the error can name the offending columns
    bad: list[str] = []
    rank = 0
    for j in range(X.shape[1]):
        new_rank = np.linalg.matrix_rank(X[:, : j + 1])
        if new_rank == rank:
            bad.append(names[j])
        rank = new_rank
    if bad:
        raise CollinearityError(bad)


def _clustered_covariance(
    X: np.ndarray, resid: np.ndarray, codes: np.ndarray
) -> tuple[np.ndarray, int]:
    """CR1 cluster-robust sandwich for an already-demeaned design."""
    n, k = X.shape
    n_clusters = int(codes.max()) + 1
    if n_clusters < 2:
        raise EstimationError("clustered errors need at least two clusters")
    if n <= k:
        raise EstimationError("more regressors than observations")
    Xu = X * resid[:, None]
    scores = np.zeros((n_clusters, k))
    np.add.at(scores, codes, Xu)
    meat = scores.T @ scores
    bread = np.linalg.inv(X.T @ X)
    factor = (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - k))
    return factor * bread @ meat @ bread, n_clusters


def _fe_dof(fe_levels: Mapping[str, int]) -> int:
    # first partition absorbs all its levels, each later one loses one to overlap
    dofs = list(fe_levels.values())
    return dofs[0] + sum(d - 1 for d in dofs[1:]) if dofs else 0


def ols_fe(panel: pd.DataFrame, spec: RegressionSpec) -> EstimateResult:
    """Fixed-effects OLS with CR1 errors clustered on spec.cluster."""
    df, n_dropped = _prepare(panel, spec)
    names = [spec.regressor, *spec.controls]
    y_raw = df[spec.outcome].to_numpy(dtype=np.float64)
    y = _transform_outcome(y_raw, spec.transform)
    X = df[list(names)].to_numpy(dtype=np.float64)
    groups = [_fe_codes(df, fe) for fe in spec.fixed_effects]
    fe_levels = {
        fe: int(codes.max()) + 1 for fe, codes in zip(spec.fixed_effects, groups)
    }
    cluster_codes, _ = pd.factorize(df[spec.cluster], sort=True)

    stacked, _sweeps = demean(np.column_stack([y, X]), groups)
    yd, Xd = stacked[:, 0], stacked[:, 1:]
    n, k = Xd.shape

    tss = float(yd @ yd)
    if tss <= 1e-12 * max(n, 1):
        zeros = {name: 0.0 for name in names}
        return EstimateResult(
            method="ols",
            coefficients=dict(zeros),
            std_errors=dict(zeros),
            t_stats=dict(zeros),
            n_obs=n,
            n_dropped=n_dropped,
            r2_within=0.0,
            adj_r2=0.0,
            cluster_count=int(cluster_codes.max()) + 1 if n else 0,
            fe_levels=fe_levels,
            spec=spec,
            design={"X": Xd, "y": yd, "resid": np.zeros(n), "columns": names,
                    "cluster_codes": cluster_codes},
        )

    _check_collinearity(Xd, names)
    beta, *_ = np.linalg.lstsq(Xd, yd, rcond=None)
    resid = yd - Xd @ beta
    cov, n_clusters = _clustered_covariance(Xd, resid, cluster_codes)
    se = np.sqrt(np.diag(cov))

    rss = float(resid @ resid)
    r2 = 1.0 - rss / tss
    dof_resid = n - k - _fe_dof(fe_levels)
    if dof_resid <= 0:
        raise EstimationError("no residual degrees of freedom left")
    adj_r2 = 1.0 - (rss / dof_resid) / (tss / (n - 1))

    return EstimateResult(
        method="ols",
        coefficients={m: float(b) for m, b in zip(names, beta)},
        std_errors={m: float(s) for m, s in zip(names, se)},
        t_stats={
            m: float(b / s) if s > 0 else 0.0 for m, b, s in zip(names, beta, se)
        },
        n_obs=n,
        n_dropped=n_dropped,
        r2_within=r2,
        adj_r2=adj_r2,
        cluster_count=n_clusters,
        fe_levels=fe_levels,
        spec=spec,
        design={"X": Xd, "y": yd, "resid": resid, "columns": names,
                "cluster_codes": cluster_codes},
    )


def tsls(
    panel: pd.DataFrame, spec: RegressionSpec, instrument: str = "leniency_iv"
) -> EstimateResult:
    """Two-stage least squares with the named instrument column.

    Stage one projects the demeaned regressor on the demeaned instrument and
    controls; stage two replaces the regressor with its fitted values. The
    reported covariance uses structural residuals built from the original
    regressor, clustered like the OLS path. Rows with a missing instrument
    are dropped and counted.
    """
    df, n_dropped = _prepare(panel, spec, extra=(instrument,))
    names = [spec.regressor, *spec.controls]
    y = _transform_outcome(df[spec.outcome].to_numpy(dtype=np.float64), spec.transform)
    x = df[spec.regressor].to_numpy(dtype=np.float64)
    W = df[list(spec.controls)].to_numpy(dtype=np.float64)
    z = df[instrument].to_numpy(dtype=np.float64)
    groups = [_fe_codes(df, fe) for fe in spec.fixed_effects]
    fe_levels = {
        fe: int(codes.max()) + 1 for fe, codes in zip(spec.fixed_effects, groups)
    }
    cluster_codes, _ = pd.factorize(df[spec.cluster], sort=True)

    stacked, _sweeps = demean(np.column_stack([y, x, z, W]), groups)
    yd, xd, zd = stacked[:, 0], stacked[:, 1], stacked[:, 2]
    Wd = stacked[:, 3:]
    n = len(yd)

    # stage one: regressor on instrument and controls
    X1 = np.column_stack([zd, Wd])
    _check_collinearity(X1, [instrument, *spec.controls])
    pi, *_ = np.linalg.lstsq(X1, xd, rcond=None)
    resid1 = xd - X1 @ pi
    cov1, n_clusters = _clustered_covariance(X1, resid1, cluster_codes)
    se_z = float(np.sqrt(cov1[0, 0]))
    f_stat = float((pi[0] / se_z) ** 2) if se_z > 0 else 0.0
    weak = f_stat < 1e-6

    # stage two on fitted values
    x_hat = X1 @ pi
    X2 = np.column_stack([x_hat, Wd])
    _check_collinearity(X2, names)
    beta, *_ = np.linalg.lstsq(X2, yd, rcond=None)

    # structural residuals use the observed regressor, not the fitted one
    u = yd - np.column_stack([xd, Wd]) @ beta
    cov, _ = _clustered_covariance(X2, u, cluster_codes)
    se = np.sqrt(np.diag(cov))

    tss = float(yd @ yd)
    rss = float(u @ u)
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    dof_resid = n - X2.shape[1] - _fe_dof(fe_levels)
    if dof_resid <= 0:
        raise EstimationError("no residual degrees of freedom left")
    adj_r2 = (
        1.0 - (rss / dof_resid) / (tss / (n - 1)) if tss > 0 else 0.0
    )

    return EstimateResult(
        method="2sls",
        coefficients={m: float(b) for m, b in zip(names, beta)},
        std_errors={m: float(s) for m, s in zip(names, se)},
        t_stats={
            m: float(b / s) if s > 0 else 0.0 for m, b, s in zip(names, beta, se)
        },
        n_obs=n,
        n_dropped=n_dropped,
        r2_within=r2,
        adj_r2=adj_r2,
        cluster_count=n_clusters,
        fe_levels=fe_levels,
        spec=spec,
        first_stage_f=f_stat,
        weak_instrument=weak,
        design={
            "X": X2, "y": yd, "resid": u, "columns": names,
            "cluster_codes": cluster_codes,
            "first_stage": {"X": X1, "pi": pi, "resid": resid1,
                            "columns": [instrument, *spec.controls]},
        },
    )


# ---------------------------------------------------------------------------
# examiner instrument


@dataclass(frozen=True)
class ExaminerRecord:
    examiner_id: str
    application_id: str
    firm_id: str
    year: int
    is_ai: bool
    granted: bool


EXAMINER_COLUMNS = (
    "examiner_id",
    "application_id",
    "firm_id",
    "year",
    "is_ai",
    "granted",
)


def load_examiner_records(path) -> list[ExaminerRecord]:
    records: list[ExaminerRecord] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != EXAMINER_COLUMNS:
            raise EstimationError(
                f"examiner file must have columns {','.join(EXAMINER_COLUMNS)}"
            )
        for row in reader:
            if row["is_ai"] not in ("0", "1") or row["granted"] not in ("0", "1"):
                raise EstimationError(
                    f"is_ai/granted must be 0 or 1 in {row['application_id']!r}"
                )
            records.append(
                ExaminerRecord(
                    examiner_id=row["examiner_id"],
                    application_id=row["application_id"],
                    firm_id=row["firm_id"],
                    year=int(row["year"]),
                    is_ai=row["is_ai"] == "1",
                    granted=row["granted"] == "1",
                )
            )
    return records


def write_examiner_records(records: Sequence[ExaminerRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXAMINER_COLUMNS)
        for r in records:
            writer.writerow(
                [r.examiner_id, r.application_id, r.firm_id, r.year,
                 int(r.is_ai), int(r.granted)]
            )


def examiner_leniency(
    records: Sequence[ExaminerRecord],
    window: tuple[int, int] = LENIENCY_WINDOW,
) -> dict[str, float]:
    """Grant rate on non-AI applications inside the pre-period window.

    Examiners with no qualifying applications are simply absent from the
    result, never given an imputed rate.
    """
    lo, hi = window
    totals: dict[str, int] = {}
    grants: dict[str, int] = {}
    for r in records:
        if r.is_ai or not lo <= r.year <= hi:
            continue
        totals[r.examiner_id] = totals.get(r.examiner_id, 0) + 1
        grants[r.examiner_id] = grants.get(r.examiner_id, 0) + int(r.granted)
    return {e: grants[e] / totals[e] for e in sorted(totals)}


def build_instrument(
    records: Sequence[ExaminerRecord],
    leniency: Mapping[str, float],
) -> tuple[pd.DataFrame, int]:
    """Firm-year mean leniency of the examiners assigned to AI applications.

    Applications whose examiner has no leniency estimate are excluded and
    counted. Firm-years with no scorable application are absent, not zero.
    """
    sums: dict[tuple[str, int], float] = {}
    counts: dict[tuple[str, int], int] = {}
    excluded = 0
    for r in records:
        if not r.is_ai:
            continue
        if r.examiner_id not in leniency:
            excluded += 1
            continue
        key = (r.firm_id, r.year)
        sums[key] = sums.get(key, 0.0) + leniency[r.examiner_id]
        counts[key] = counts.get(key, 0) + 1
    rows = [
        {"firm_id": f, "year": y, "leniency_iv": sums[(f, y)] / counts[(f, y)]}
        for (f, y) in sorted(sums)
    ]
    frame = pd.DataFrame(rows, columns=["firm_id", "year", "leniency_iv"])
    return frame, excluded


def first_stage_firm_year(
    panel: pd.DataFrame,
    spec: RegressionSpec,
    instrument: str = "leniency_iv",
) -> float:
    """First-stage F at the firm-year level (the instrument's native grain).

    Deduplicates the panel to one row per firm-year and regresses the
    endogenous regressor on the instrument with firm and year effects,
    clustering on the firm.
    """
    cols = ["firm_id", "year", spec.regressor, instrument, *spec.controls]
    missing = [c for c in cols if c not in panel.columns]
    if missing:
        raise EstimationError("panel is missing columns: " + ", ".join(missing))
    fy = panel[cols].drop_duplicates(subset=["firm_id", "year"]).dropna()
    sub_spec = RegressionSpec(
        outcome=spec.regressor,
        regressor=instrument,
        controls=spec.controls,
        fixed_effects=("firm_id", "year"),
        cluster="firm_id",
        transform="level",
    )
    result = ols_fe(fy, sub_spec)
    t = result.t_stats[instrument]
    return float(t * t)


# ---------------------------------------------------------------------------
# calibrated simulator


@dataclass(frozen=True)
class DgpConfig:
    """Knobs for the synthetic panel generator used in estimator checks."""

    n_firms: int = 300
    n_occupations: int = 8
    years: tuple[int, int] = (2018, 2022)
    beta: float = 0.0002
    first_stage_slope: float = 45.8
    confounder_scale: float = 30.0
    confounder_effect: float = 0.05
    ai_noise_sd: float = 20.0
    firm_base_mean: float = 400.0
    firm_effect_sd: float = 155.0
    outcome_base: float = 2.3
    outcome_noise_sd: float = 0.5
    firm_fe_sd: float = 0.3
    occ_fe_sd: float = 0.4
    year_fe_sd: float = 0.1
    n_examiners: int = 150
    baseline_apps: int = 40
    apps_lambda: float = 2.0
    depreciation: float = 0.15
    seed: int = 0


@dataclass
class SimulatedPanel:
    panel: pd.DataFrame
    records: list[ExaminerRecord]
    truth: dict


_CONTROL_EFFECTS = {
    "log_assets": 0.02,
    "roa": 0.1,
    "leverage": -0.05,
    "rnd_intensity": 0.2,
}


def simulate_dgp(config: DgpConfig | None = None) -> SimulatedPanel:
    """Build a panel whose causal structure is known exactly.

    The endogenous regressor loads on an unobserved firm-year shock that
    also enters the outcome, so plain OLS is biased; the examiner-leniency
    channel restores identification. Stocks are drawn structurally and the
    implied non-negative flows are reported alongside.
    """
    cfg = config or DgpConfig()
    rng = np.random.default_rng(cfg.seed)
    firms = [f"f{i:04d}" for i in range(cfg.n_firms)]
    occs = [f"o{i:02d}" for i in range(cfg.n_occupations)]
    years = list(range(cfg.years[0], cfg.years[1] + 1))
    examiners = [f"ex{i:03d}" for i in range(cfg.n_examiners)]
    true_leniency = {e: float(v) for e, v in
                     zip(examiners, rng.uniform(0.3, 0.9, cfg.n_examiners))}

    records: list[ExaminerRecord] = []
    app_no = 0
    for e in examiners:
        for _ in range(cfg.baseline_apps):
            year = int(rng.integers(LENIENCY_WINDOW[0], LENIENCY_WINDOW[1] + 1))
            firm = firms[int(rng.integers(len(firms)))]
            granted = bool(rng.random() < true_leniency[e])
            records.append(ExaminerRecord(e, f"app{app_no:07d}", firm, year, False, granted))
            app_no += 1

    firm_base = cfg.firm_base_mean + cfg.firm_effect_sd * rng.standard_normal(cfg.n_firms)
    firm_fe = cfg.firm_fe_sd * rng.standard_normal(cfg.n_firms)
    occ_fe = cfg.occ_fe_sd * rng.standard_normal(cfg.n_occupations)
    year_fe = cfg.year_fe_sd * rng.standard_normal(len(years))

    controls = {}
    for fi, f in enumerate(firms):
        for y in years:
            controls[(f, y)] = {
                "log_assets": float(8.0 + rng.standard_normal()),
                "roa": float(0.1 + 0.05 * rng.standard_normal()),
                "leverage": float(0.3 + 0.1 * rng.standard_normal()),
                "rnd_intensity": float(0.05 + 0.02 * rng.standard_normal()),
            }

    stock: dict[tuple[str, int], float] = {}
    z_struct: dict[tuple[str, int], float] = {}
    eta: dict[tuple[str, int], float] = {}
    flows: dict[tuple[str, int], float] = {}
    for fi, f in enumerate(firms):
        prev = 0.0
        for y in years:
            n_apps = 1 + int(rng.poisson(cfg.apps_lambda))
            assigned = [examiners[int(i)] for i in rng.integers(0, cfg.n_examiners, n_apps)]
            z = float(np.mean([true_leniency[e] for e in assigned]))
            for e in assigned:
                granted = bool(rng.random() < true_leniency[e])
                records.append(ExaminerRecord(e, f"app{app_no:07d}", f, y, True, granted))
                app_no += 1
            h = float(rng.standard_normal())
            s = (
                firm_base[fi]
                + cfg.first_stage_slope * z
                + cfg.confounder_scale * h
                + cfg.ai_noise_sd * rng.standard_normal()
            )
            stock[(f, y)] = s
            z_struct[(f, y)] = z
            eta[(f, y)] = h
            flows[(f, y)] = max(0.0, s - (1.0 - cfg.depreciation) * prev)
            prev = s

    rows = []
    for fi, f in enumerate(firms):
        for oi, o in enumerate(occs):
            for yi, y in enumerate(years):
                ctrl = controls[(f, y)]
                mean_log = (
                    cfg.outcome_base
                    + cfg.beta * stock[(f, y)]
                    + cfg.confounder_effect * eta[(f, y)]
                    + firm_fe[fi]
                    + occ_fe[oi]
                    + year_fe[yi]
                    + sum(_CONTROL_EFFECTS[c] * ctrl[c] for c in DEFAULT_CONTROLS)
                )
                log_outcome = mean_log + cfg.outcome_noise_sd * rng.standard_normal()
                rows.append(
                    {
                        "firm_id": f,
                        "occ_id": o,
                        "year": y,
                        "aligned": float(np.expm1(log_outcome)),
                        "nonaligned": float(
                            np.expm1(log_outcome * 0.6 + 0.2 * rng.standard_normal())
                        ),
                        "ai_stock": stock[(f, y)],
                        "ai_flow": flows[(f, y)],
                        "leniency_iv": z_struct[(f, y)],
                        **ctrl,
                    }
                )
    panel = pd.DataFrame(rows)
    truth = {
        "beta": cfg.beta,
        "first_stage_slope": cfg.first_stage_slope,
        "confounder_effect": cfg.confounder_effect,
        "control_effects": dict(_CONTROL_EFFECTS),
        "outcome_base": cfg.outcome_base,
        "leniency": true_leniency,
    }
    return SimulatedPanel(panel=panel, records=records, truth=truth)
