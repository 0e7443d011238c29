"""Pipeline CLI tests: config parsing, exit codes, artifacts, reruns."""
import configparser
import json
from pathlib import Path

import pytest

from skillpanel import cli
from skillpanel.cli import (
    EXIT_CONFIG,
    EXIT_MISSING,
    EXIT_OK,
    ConfigError,
    MissingArtifactError,
    PipelineConfig,
    _read_posting_skills,
    _threshold_warnings,
    _write_posting_skills,
)
from skillpanel.corpus import JobPosting, load_controls, load_postings
from skillpanel.econ import load_examiner_records
from skillpanel.extraction import PANEL_HEADER, PostingSkills, read_panel
from skillpanel.fixtures import generate_fixture
from skillpanel.trainer import MetricsReport


def _mutated_config(source: Path, target: Path, mutate) -> Path:
    parser = configparser.ConfigParser()
    parser.read(source, encoding="utf-8")
    mutate(parser)
    with open(target, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return target


class TestConfigErrors:
    def test_absent_config_file(self, tmp_path):
        code = cli.main(["train", "--config", str(tmp_path / "none.ini")])
        assert code == EXIT_CONFIG

    def test_missing_section(self, bundle_config, tmp_path):
        bad = _mutated_config(
            bundle_config, tmp_path / "bad.ini",
            lambda p: p.remove_section("regressions"),
        )
        assert cli.main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG

    def test_missing_path_key(self, bundle_config, tmp_path):
        bad = _mutated_config(
            bundle_config, tmp_path / "bad.ini",
            lambda p: p.remove_option("paths", "controls"),
        )
        assert cli.main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG

    def test_depreciation_outside_unit_interval(self, bundle_config, tmp_path):
        bad = _mutated_config(
            bundle_config, tmp_path / "bad.ini",
            lambda p: p.set("panel", "depreciation", "1.5"),
        )
        assert cli.main(["panel", "--config", str(bad)]) == EXIT_CONFIG

    def test_inverted_year_window(self, bundle_config, tmp_path):
        bad = _mutated_config(
            bundle_config, tmp_path / "bad.ini",
            lambda p: p.set("corpus", "year_min", "2030"),
        )
        assert cli.main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG

    def test_unknown_regression_method(self, bundle_config, tmp_path):
        bad = _mutated_config(
            bundle_config, tmp_path / "bad.ini",
            lambda p: p.set("regressions", "aligned_ols", "aligned,magic"),
        )
        assert cli.main(["estimate", "--config", str(bad)]) == EXIT_CONFIG

    def test_empty_regressions(self, bundle_config, tmp_path):
        def clear(p):
            p.remove_section("regressions")
            p.add_section("regressions")

        bad = _mutated_config(bundle_config, tmp_path / "bad.ini", clear)
        assert cli.main(["estimate", "--config", str(bad)]) == EXIT_CONFIG


class TestConfigParsing:
    def test_reads_fixture_values(self, bundle_config):
        cfg = PipelineConfig.from_ini(bundle_config)
        assert cfg.seed == 7
        assert cfg.year_window == (2018, 2022)
        assert cfg.cap == 5
        assert cfg.extract_threshold == 0.6
        assert cfg.depreciation == 0.15
        assert cfg.regressions["aligned_2sls"] == ("aligned", "2sls", "log1p")
        assert cfg.workdir == cfg.paths["workdir"]

    def test_overrides_win(self, bundle_config, tmp_path):
        cfg = PipelineConfig.from_ini(
            bundle_config, seed_override=3,
            workdir_override=str(tmp_path / "elsewhere"),
        )
        assert cfg.seed == 3
        assert cfg.workdir == tmp_path / "elsewhere"

    def test_two_part_regression_defaults_to_log1p(self, bundle_config, tmp_path):
        cfgfile = _mutated_config(
            bundle_config, tmp_path / "two.ini",
            lambda p: p.set("regressions", "aligned_ols", "aligned,ols"),
        )
        cfg = PipelineConfig.from_ini(cfgfile)
        assert cfg.regressions["aligned_ols"] == ("aligned", "ols", "log1p")

    def test_from_ini_raises_config_error_directly(self, tmp_path):
        with pytest.raises(ConfigError):
            PipelineConfig.from_ini(tmp_path / "missing.ini")


class TestMissingArtifacts:
    def test_extract_without_trained_model(self, bundle_config, tmp_path):
        code = cli.main([
            "extract", "--config", str(bundle_config),
            "--out", str(tmp_path / "fresh"),
        ])
        assert code == EXIT_MISSING

    def test_estimate_without_panel(self, bundle_config, tmp_path):
        code = cli.main([
            "estimate", "--config", str(bundle_config),
            "--out", str(tmp_path / "fresh2"),
        ])
        assert code == EXIT_MISSING


class TestPostingSkillsIO:
    def _rows(self):
        full = (
            JobPosting("p1", "f1", 2020, "analyst", "Builds SQL reports."),
            PostingSkills(
                posting_id="p1",
                skills=frozenset({"sk001", "sk007"}),
                sentence_matches={"sk001": (0, 2), "sk007": (1,)},
                kept_sentences=((0, "Builds SQL reports."), (2, "Owns, and ships")),
                occ_id="occ03",
                aligned=frozenset({"sk001"}),
                nonaligned=frozenset({"sk007"}),
            ),
            3,
            0.5,
        )
        empty = (
            JobPosting("p2", "f2", 2021, "generalist", "Great benefits."),
            PostingSkills(
                posting_id="p2",
                skills=frozenset(),
                sentence_matches={},
                kept_sentences=(),
                occ_id=None,
                aligned=frozenset(),
                nonaligned=frozenset(),
            ),
            0,
            0.0,
        )
        return [full, empty]

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "posting_skills.csv"
        rows = self._rows()
        _write_posting_skills(path, rows)
        loaded = _read_posting_skills(path)
        assert len(loaded) == 2
        for (posting, ps, _, _), (lp, lps) in zip(rows, loaded):
            assert lp.posting_id == posting.posting_id
            assert lp.firm_id == posting.firm_id
            assert lp.year == posting.year
            assert lps.skills == ps.skills
            assert lps.sentence_matches == ps.sentence_matches
            assert lps.kept_sentences == ps.kept_sentences
            assert lps.occ_id == ps.occ_id
            assert lps.aligned == ps.aligned
            assert lps.nonaligned == ps.nonaligned

    def test_rejects_foreign_csv(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(MissingArtifactError):
            _read_posting_skills(path)


class TestThresholdWarnings:
    def test_off_grid_value_warns(self):
        warnings = _threshold_warnings(0.9, "extraction")
        assert len(warnings) == 1
        assert "0.9" in warnings[0]

    @pytest.mark.parametrize("tau", [0.5, 0.6, 0.7, 0.8])
    def test_grid_values_stay_silent(self, tau):
        assert _threshold_warnings(tau, "extraction") == []


class TestFixtureBundle:
    def test_bundle_counts(self, bundle_config):
        cfg = PipelineConfig.from_ini(bundle_config)
        postings, rejected = load_postings(cfg.paths["postings"], (2018, 2022))
        assert rejected == 0
        # 200 firms x 5 years x 2 home occupations x 2 postings per cell
        assert len(postings) == 4000
        controls = load_controls(cfg.paths["controls"])
        assert len(controls) == 200 * 5
        records = load_examiner_records(cfg.paths["examiner_records"])
        assert len(records) >= 80 * 30

    def test_bundle_is_deterministic(self, tmp_path):
        a = generate_fixture(tmp_path / "a", seed=11, n_firms=4, n_examiners=6)
        b = generate_fixture(tmp_path / "b", seed=11, n_firms=4, n_examiners=6)
        for name in ("postings.jsonl", "controls.csv", "examiner_records.csv",
                     "skills_2022.csv", "tasks_2018.csv"):
            assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()

    def test_seed_changes_postings(self, tmp_path):
        a = generate_fixture(tmp_path / "a", seed=11, n_firms=4, n_examiners=6)
        b = generate_fixture(tmp_path / "b", seed=12, n_firms=4, n_examiners=6)
        assert (a.parent / "postings.jsonl").read_bytes() != \
            (b.parent / "postings.jsonl").read_bytes()


def _parse_stability(path: Path) -> dict[str, float]:
    values: dict[str, float] = {}
    kind = None
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("kind="):
            kind = line.split("=", 1)[1]
        elif line.startswith("stability=") and kind is not None:
            values[kind] = float(line.split("=", 1)[1])
    return values


class TestPipelineRun:
    def test_all_stages_leave_manifests(self, pipeline):
        for stage in cli.STAGES:
            path = pipeline.workdir / f"{stage}.manifest.json"
            assert path.is_file(), f"no manifest for {stage}"
            manifest = json.loads(path.read_text(encoding="utf-8"))
            assert manifest["stage"] == stage
            assert manifest["seed"] == 7

    def test_grid_thresholds_produce_no_warnings(self, pipeline):
        manifest = json.loads(
            (pipeline.workdir / "extract.manifest.json").read_text("utf-8")
        )
        assert manifest["warnings"] == []

    def test_panel_columns_match_contract(self, pipeline):
        header = (pipeline.workdir / "panel.csv").read_text(
            encoding="utf-8"
        ).splitlines()[0]
        assert tuple(header.split(",")) == PANEL_HEADER
        frame = read_panel(pipeline.workdir / "panel.csv")
        assert len(frame) > 0
        assert (frame["postings"] >= 1).all()

    def test_retrieval_metrics_file_parses(self, pipeline):
        report = MetricsReport.from_text(
            (pipeline.workdir / "metrics.txt").read_text(encoding="utf-8")
        )
        assert 0.0 <= report.recall_at_5 <= 1.0
        assert report.query_count > 0

    def test_stability_goldens(self, pipeline):
        values = _parse_stability(pipeline.workdir / "stability.txt")
        assert values["occupation-list"] == pytest.approx(0.95, abs=1e-12)
        assert values["task-sets"] == pytest.approx(0.25, abs=1e-12)

    def test_estimates_written_per_regression(self, pipeline):
        for name, (outcome, method, _) in pipeline.cfg.regressions.items():
            text = (pipeline.workdir / "estimates" / f"{name}.txt").read_text(
                encoding="utf-8"
            )
            fields = dict(
                line.split("=", 1) for line in text.splitlines() if "=" in line
            )
            assert fields["method"] == ("2sls" if method == "2sls" else "ols")
            assert fields["N"].isdigit()
            float(fields["coefficient"])
            float(fields["se"])
            assert len(fields["spec_hash"]) == 16
            if method == "2sls":
                assert float(fields["first_stage_f"]) > 0.0

    def test_rerun_is_a_noop(self, pipeline, capsys):
        before = {
            p.name: p.read_bytes() for p in pipeline.workdir.glob("*.manifest.json")
        }
        panel_before = (pipeline.workdir / "panel.csv").read_bytes()
        code = cli.main(["all", "--config", str(pipeline.config_path)])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert out.count("up to date, skipping") == len(cli.STAGES)
        assert (pipeline.workdir / "panel.csv").read_bytes() == panel_before
        after = {
            p.name: p.read_bytes() for p in pipeline.workdir.glob("*.manifest.json")
        }
        assert after == before
