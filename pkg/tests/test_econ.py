"""Estimator tests: demeaning, FE OLS, 2SLS, and the examiner instrument."""
import numpy as np
import pandas as pd
import pytest

from skillpanel.econ import (
    CollinearityError,
    DemeaningError,
    DgpConfig,
    EstimationError,
    ExaminerRecord,
    RegressionSpec,
    build_instrument,
    demean,
    examiner_leniency,
    first_stage_firm_year,
    load_examiner_records,
    ols_fe,
    simulate_dgp,
    tsls,
    write_examiner_records,
)


@pytest.fixture(scope="module")
def sim():
    # 12 firms x 3 occupations x 3 years = 108 rows, small enough to expand
    return simulate_dgp(DgpConfig(n_firms=12, n_occupations=3,
                                  years=(2018, 2020), seed=4))


@pytest.fixture(scope="module")
def spec():
    return RegressionSpec(outcome="aligned")


def _dummy_ols(df: pd.DataFrame, spec: RegressionSpec) -> dict[str, float]:
    """Brute-force oracle: expand every effect into explicit dummies."""
    y = np.log1p(df[spec.outcome].to_numpy(np.float64))
    names = [spec.regressor, *spec.controls]
    blocks = [df[list(names)].to_numpy(np.float64)]
    for i, fe in enumerate(spec.fixed_effects):
        codes, levels = pd.factorize(df[fe], sort=True)
        dummies = np.eye(len(levels))[codes]
        # keep all levels of the first effect, drop one from the rest
        blocks.append(dummies if i == 0 else dummies[:, 1:])
    full = np.column_stack(blocks)
    beta, *_ = np.linalg.lstsq(full, y, rcond=None)
    return {m: float(b) for m, b in zip(names, beta)}


def _cr1_sandwich(X: np.ndarray, resid: np.ndarray,
                  codes: np.ndarray) -> np.ndarray:
    """Direct sandwich oracle built with an explicit loop over clusters."""
    n, k = X.shape
    n_clusters = int(codes.max()) + 1
    scores = np.zeros((n_clusters, k))
    for g in range(n_clusters):
        mask = codes == g
        scores[g] = (X[mask] * resid[mask, None]).sum(axis=0)
    bread = np.linalg.inv(X.T @ X)
    factor = (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - k))
    cov = factor * bread @ scores.T @ scores @ bread
    return np.sqrt(np.diag(cov))


class TestDemean:
    def test_single_partition_matches_direct_subtraction(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=40)
        codes = np.repeat(np.arange(5), 8).astype(np.int64)
        out, sweeps = demean(values, [codes])
        expected = values - np.array(
            [values[codes == g].mean() for g in range(5)]
        )[codes]
        assert sweeps <= 2
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_two_partitions_drive_group_means_to_tol(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=(60, 2))
        g1 = rng.integers(0, 6, 60).astype(np.int64)
        g2 = rng.integers(0, 4, 60).astype(np.int64)
        out, _ = demean(values, [g1, g2])
        for codes, n_levels in ((g1, 6), (g2, 4)):
            for g in range(n_levels):
                assert np.abs(out[codes == g].mean(axis=0)).max() <= 1e-8

    def test_vector_and_column_agree(self):
        values = np.array([1.0, 4.0, 2.0, 7.0, 3.0, 5.0])
        codes = np.array([0, 0, 1, 1, 2, 2], dtype=np.int64)
        flat, _ = demean(values, [codes])
        wide, _ = demean(values[:, None], [codes])
        np.testing.assert_array_equal(flat, wide[:, 0])

    def test_requires_a_partition(self):
        with pytest.raises(EstimationError):
            demean(np.ones(4), [])

    def test_reports_non_convergence(self):
        values = np.array([1.0, 2.0, 3.0, 5.0])
        g1 = np.array([0, 0, 1, 1], dtype=np.int64)
        g2 = np.array([0, 1, 0, 1], dtype=np.int64)
        with pytest.raises(DemeaningError):
            demean(values, [g1, g2], max_iter=1)


class TestOlsFe:
    def test_matches_dummy_expansion(self, sim, spec):
        result = ols_fe(sim.panel, spec)
        oracle = _dummy_ols(sim.panel, spec)
        for name, value in oracle.items():
            assert abs(result.coefficients[name] - value) <= 1e-6

    def test_clustered_errors_match_direct_sandwich(self, sim, spec):
        result = ols_fe(sim.panel, spec)
        design = result.design
        se = _cr1_sandwich(design["X"], design["resid"],
                           design["cluster_codes"])
        for j, name in enumerate(design["columns"]):
            assert abs(result.std_errors[name] - se[j]) <= 1e-8

    def test_result_shape_and_properties(self, sim, spec):
        result = ols_fe(sim.panel, spec)
        assert result.method == "ols"
        assert result.coefficient == result.coefficients["ai_stock"]
        assert result.std_error == result.std_errors["ai_stock"]
        assert result.cluster_count == 12
        assert result.fe_levels == {"firm_id": 12, "occ_id": 3, "year": 3}
        assert result.n_obs == 108
        assert result.n_dropped == 0
        assert 0.0 <= result.r2_within <= 1.0
        assert result.adj_r2 <= result.r2_within

    def test_constant_outcome_short_circuits(self, sim, spec):
        panel = sim.panel.assign(aligned=3.0)
        result = ols_fe(panel, spec)
        assert all(v == 0.0 for v in result.coefficients.values())
        assert result.r2_within == 0.0
        assert result.adj_r2 == 0.0

    def test_log1p_guards_the_domain(self, sim, spec):
        panel = sim.panel.copy()
        panel.loc[0, "aligned"] = -1.5
        with pytest.raises(EstimationError):
            ols_fe(panel, spec)

    def test_level_shift_is_absorbed_by_effects(self, sim):
        level_spec = RegressionSpec(outcome="aligned", transform="level")
        base = ols_fe(sim.panel, level_spec)
        shifted = ols_fe(sim.panel.assign(aligned=sim.panel["aligned"] + 5.0),
                         level_spec)
        for name, value in base.coefficients.items():
            assert abs(shifted.coefficients[name] - value) <= 1e-9

    def test_duplicate_control_is_named(self, sim, spec):
        panel = sim.panel.assign(roa_copy=sim.panel["roa"])
        dup = RegressionSpec(outcome="aligned",
                             controls=(*spec.controls, "roa_copy"))
        with pytest.raises(CollinearityError) as err:
            ols_fe(panel, dup)
        assert "roa_copy" in err.value.columns

    def test_missing_column_is_named(self, sim):
        with pytest.raises(EstimationError, match="nope"):
            ols_fe(sim.panel, RegressionSpec(outcome="nope"))

    def test_nan_rows_are_dropped_and_counted(self, sim, spec):
        panel = sim.panel.copy()
        panel.loc[0, "roa"] = np.nan
        result = ols_fe(panel, spec)
        assert result.n_dropped == 1
        assert result.n_obs == len(panel) - 1

    def test_singleton_clusters_count_every_row(self, sim):
        panel = sim.panel.assign(row_id=np.arange(len(sim.panel)))
        solo = RegressionSpec(outcome="aligned", cluster="row_id")
        result = ols_fe(panel, solo)
        assert result.cluster_count == result.n_obs
        assert all(np.isfinite(s) and s > 0
                   for s in result.std_errors.values())

    def test_zero_noise_dgp_recovers_truth_exactly(self):
        cfg = DgpConfig(n_firms=30, n_occupations=4, years=(2018, 2020),
                        confounder_scale=0.0, confounder_effect=0.0,
                        outcome_noise_sd=0.0, firm_fe_sd=0.0, occ_fe_sd=0.0,
                        year_fe_sd=0.0, seed=12)
        noiseless = simulate_dgp(cfg)
        result = ols_fe(noiseless.panel, RegressionSpec(outcome="aligned"))
        assert abs(result.coefficient - cfg.beta) <= 1e-10

    def test_small_exogenous_dgp_covers_truth(self):
        cfg = DgpConfig(n_firms=10, n_occupations=5, years=(2018, 2020),
                        confounder_scale=0.0, confounder_effect=0.0, seed=0)
        exo = simulate_dgp(cfg)
        result = ols_fe(exo.panel, RegressionSpec(outcome="aligned"))
        assert abs(result.coefficient - cfg.beta) <= 3.0 * result.std_error


class TestRegressionSpec:
    def test_hash_is_stable_and_sensitive(self):
        a = RegressionSpec(outcome="aligned")
        b = RegressionSpec(outcome="aligned")
        c = RegressionSpec(outcome="aligned", transform="level")
        assert a.spec_hash() == b.spec_hash()
        assert a.spec_hash() != c.spec_hash()
        assert len(a.spec_hash()) == 16

    def test_transform_is_validated(self):
        with pytest.raises(EstimationError):
            RegressionSpec(outcome="aligned", transform="sqrt")

    def test_requires_fixed_effects(self):
        with pytest.raises(EstimationError):
            RegressionSpec(outcome="aligned", fixed_effects=())

    def test_fe_columns_split_composites(self):
        composite = RegressionSpec(outcome="aligned",
                                   fixed_effects=("firm_id", "occ_id*year"))
        assert composite.fe_columns() == ["firm_id", "occ_id", "year"]

    def test_composite_effect_builds_interacted_levels(self, sim):
        composite = RegressionSpec(outcome="aligned",
                                   fixed_effects=("firm_id", "occ_id*year"))
        result = ols_fe(sim.panel, composite)
        assert result.fe_levels["occ_id*year"] == 9


class TestTsls:
    def test_instrument_equal_to_regressor_reproduces_ols(self, sim, spec):
        panel = sim.panel.assign(z_same=sim.panel["ai_stock"])
        via_ols = ols_fe(sim.panel, spec)
        via_iv = tsls(panel, spec, instrument="z_same")
        for name in via_ols.coefficients:
            assert abs(via_iv.coefficients[name]
                       - via_ols.coefficients[name]) <= 1e-8
            assert abs(via_iv.std_errors[name]
                       - via_ols.std_errors[name]) <= 1e-8

    def test_simulated_panel_estimates_cleanly(self, sim, spec):
        result = tsls(sim.panel, spec)
        assert result.method == "2sls"
        assert result.first_stage_f is not None
        assert result.first_stage_f > 0.0
        assert not result.weak_instrument
        assert result.cluster_count == 12

    def test_first_stage_f_matches_design_payload(self, sim, spec):
        result = tsls(sim.panel, spec)
        stage = result.design["first_stage"]
        se = _cr1_sandwich(stage["X"], stage["resid"],
                           result.design["cluster_codes"])
        f_direct = (stage["pi"][0] / se[0]) ** 2
        assert abs(result.first_stage_f - f_direct) <= 1e-8

    def test_orthogonal_instrument_sets_weak_flag(self):
        x = np.array([3.0, -3.0, 1.0, -1.0, 2.0, -2.0, 4.0, -4.0])
        ortho = np.array([1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0])
        z = ortho + 1e-12 * x
        y = 0.1 * x + np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.2, -0.1, 0.6])
        frame = pd.DataFrame({
            "y": y, "x": x, "z": z, "grp": ["g0"] * 8,
            "cl": ["c0", "c1", "c2", "c3", "c0", "c1", "c2", "c3"],
        })
        degenerate = RegressionSpec(outcome="y", regressor="x", controls=(),
                                    fixed_effects=("grp",), cluster="cl",
                                    transform="level")
        result = tsls(frame, degenerate, instrument="z")
        assert result.weak_instrument
        assert result.first_stage_f < 1e-6

    def test_zero_endogeneity_agrees_with_ols(self, spec):
        cfg = DgpConfig(n_firms=60, n_occupations=4, years=(2018, 2021),
                        confounder_scale=0.0, confounder_effect=0.0, seed=1)
        exo = simulate_dgp(cfg)
        via_ols = ols_fe(exo.panel, spec)
        via_iv = tsls(exo.panel, spec)
        gap = abs(via_ols.coefficient - via_iv.coefficient)
        assert gap <= 3.0 * via_iv.std_error

    def test_missing_instrument_rows_dropped(self, sim, spec):
        panel = sim.panel.copy()
        panel.loc[0, "leniency_iv"] = np.nan
        result = tsls(panel, spec)
        assert result.n_dropped == 1
        assert result.n_obs == len(panel) - 1


class TestExaminerLeniency:
    def _records(self):
        def rec(ex, app, year, is_ai, granted, firm="f1"):
            return ExaminerRecord(ex, app, firm, year, is_ai, granted)

        return [
            rec("e1", "a1", 2012, False, True),
            rec("e1", "a2", 2013, False, True),
            rec("e1", "a3", 2014, False, True),
            rec("e1", "a4", 2015, False, False),
            rec("e2", "a5", 2011, False, True),
            rec("e2", "a6", 2016, False, True),
            # AI-era applications never enter the leniency estimate
            rec("e3", "a7", 2014, True, True),
            rec("e3", "a8", 2015, True, False),
            # outside the default pre-period window
            rec("e4", "a9", 2009, False, True),
            rec("e4", "a10", 2018, False, True),
        ]

    def test_grant_rates_over_pre_window_non_ai_apps(self):
        rates = examiner_leniency(self._records())
        assert rates == {"e1": 0.75, "e2": 1.0}

    def test_window_override_admits_more_years(self):
        rates = examiner_leniency(self._records(), window=(2009, 2018))
        assert rates["e4"] == 1.0

    def test_unscored_examiners_are_absent_not_imputed(self):
        rates = examiner_leniency(self._records())
        assert "e3" not in rates
        assert "e4" not in rates


class TestBuildInstrument:
    def test_firm_year_mean_of_assigned_examiners(self):
        records = [
            ExaminerRecord("e1", "a1", "f1", 2020, True, True),
            ExaminerRecord("e2", "a2", "f1", 2020, True, False),
            ExaminerRecord("e1", "a3", "f2", 2019, True, True),
            ExaminerRecord("e1", "a4", "f3", 2019, False, True),
        ]
        frame, excluded = build_instrument(records, {"e1": 0.6, "e2": 0.8})
        assert excluded == 0
        rows = {(r.firm_id, r.year): r.leniency_iv
                for r in frame.itertuples()}
        assert rows[("f1", 2020)] == pytest.approx(0.7, abs=1e-12)
        assert rows[("f2", 2019)] == pytest.approx(0.6, abs=1e-12)
        # non-AI application on f3 contributes nothing
        assert ("f3", 2019) not in rows

    def test_unknown_examiner_is_excluded_and_counted(self):
        records = [
            ExaminerRecord("ghost", "a1", "f1", 2020, True, True),
            ExaminerRecord("e1", "a2", "f1", 2020, True, True),
        ]
        frame, excluded = build_instrument(records, {"e1": 0.5})
        assert excluded == 1
        assert len(frame) == 1
        assert frame.loc[0, "leniency_iv"] == 0.5

    def test_firm_years_without_scores_are_absent(self):
        frame, excluded = build_instrument(
            [ExaminerRecord("ghost", "a1", "f1", 2020, True, True)],
            {"e1": 0.5},
        )
        assert excluded == 1
        assert frame.empty
        assert list(frame.columns) == ["firm_id", "year", "leniency_iv"]


class TestExaminerIO:
    def test_roundtrip(self, tmp_path):
        records = [
            ExaminerRecord("e1", "a1", "f1", 2012, False, True),
            ExaminerRecord("e2", "a2", "f2", 2020, True, False),
        ]
        path = tmp_path / "examiners.csv"
        write_examiner_records(records, path)
        assert load_examiner_records(path) == records

    def test_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("examiner_id,application_id\ne1,a1\n",
                        encoding="utf-8")
        with pytest.raises(EstimationError):
            load_examiner_records(path)

    def test_rejects_non_binary_flags(self, tmp_path):
        path = tmp_path / "flags.csv"
        path.write_text(
            "examiner_id,application_id,firm_id,year,is_ai,granted\n"
            "e1,a1,f1,2012,2,1\n",
            encoding="utf-8",
        )
        with pytest.raises(EstimationError):
            load_examiner_records(path)


class TestFirstStageFirmYear:
    def test_positive_on_simulated_panel(self, sim, spec):
        assert first_stage_firm_year(sim.panel, spec) > 0.0

    def test_invariant_to_instrument_rescaling(self, sim, spec):
        base = first_stage_firm_year(sim.panel, spec)
        scaled_panel = sim.panel.assign(
            leniency_iv=sim.panel["leniency_iv"] * 3.0
        )
        scaled = first_stage_firm_year(scaled_panel, spec)
        assert scaled == pytest.approx(base, rel=1e-9)

    def test_invariant_to_duplicated_occupation_rows(self, sim, spec):
        base = first_stage_firm_year(sim.panel, spec)
        doubled = pd.concat([sim.panel, sim.panel], ignore_index=True)
        assert first_stage_firm_year(doubled, spec) == pytest.approx(
            base, rel=1e-12
        )

    def test_missing_instrument_column_is_named(self, sim, spec):
        panel = sim.panel.drop(columns=["leniency_iv"])
        with pytest.raises(EstimationError, match="leniency_iv"):
            first_stage_firm_year(panel, spec)


class TestSimulateDgp:
    def test_same_seed_reproduces_everything(self):
        cfg = DgpConfig(n_firms=8, n_occupations=2, years=(2018, 2019),
                        n_examiners=20, seed=9)
        one, two = simulate_dgp(cfg), simulate_dgp(cfg)
        pd.testing.assert_frame_equal(one.panel, two.panel)
        assert one.records == two.records
        assert one.truth == two.truth

    def test_seed_changes_draws_but_not_structure(self):
        base = DgpConfig(n_firms=8, n_occupations=2, years=(2018, 2019),
                         n_examiners=20, seed=9)
        other = DgpConfig(n_firms=8, n_occupations=2, years=(2018, 2019),
                          n_examiners=20, seed=10)
        one, two = simulate_dgp(base), simulate_dgp(other)
        assert not one.panel["aligned"].equals(two.panel["aligned"])
        assert one.truth["beta"] == two.truth["beta"]
        assert set(one.truth) == set(two.truth)

    def test_panel_grain_is_firm_occupation_year(self):
        cfg = DgpConfig(n_firms=8, n_occupations=2, years=(2018, 2019),
                        n_examiners=20, seed=9)
        panel = simulate_dgp(cfg).panel
        assert len(panel) == 8 * 2 * 2
        keys = panel[["firm_id", "occ_id", "year"]]
        assert not keys.duplicated().any()

    def test_truth_reports_generator_constants(self):
        cfg = DgpConfig(n_firms=8, n_occupations=2, years=(2018, 2019),
                        n_examiners=20, seed=9)
        truth = simulate_dgp(cfg).truth
        assert truth["beta"] == cfg.beta
        assert truth["first_stage_slope"] == cfg.first_stage_slope
        assert set(truth["leniency"]) == {f"ex{i:03d}" for i in range(20)}
