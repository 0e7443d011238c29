"""Deterministic toy dataset generator for end-to-end runs and tests.

Writes a small but complete input bundle: two skill-taxonomy versions, two
occupation-taxonomy versions, a posting corpus whose sentences reuse the
synthetic pair templates, firm-year controls with AI application flows, and
examiner records wired so that examiner leniency genuinely moves the flows.
Everything is a pure function of the seed.
"""
from __future__ import annotations

import argparse
import configparser
import json
from pathlib import Path

import numpy as np

from .corpus import LEVELS, LEVEL_QUALIFIERS, _FRAGMENTS
from .econ import ExaminerRecord, write_examiner_records
from .taxonomy import Occupation, OccupationTaxonomy, Skill, SkillTaxonomy

SKILL_LABELS = (
    "python programming", "data visualization", "statistical modeling",
    "machine learning", "sql databases", "data pipelines",
    "spreadsheet analysis", "experiment design",
    "web development", "api design", "cloud infrastructure",
    "version control", "code review", "unit testing",
    "systems debugging", "mobile development",
    "project planning", "budget forecasting", "vendor negotiation",
    "inventory management", "supply logistics", "quality assurance",
    "process automation", "risk assessment",
    "market research", "content writing", "social media campaigns",
    "search optimization", "customer outreach", "sales presentations",
    "brand strategy", "pricing analysis",
    "talent recruiting", "payroll administration", "employee training",
    "performance reviews", "office scheduling", "travel coordination",
    "records management", "contract drafting",
    "financial reporting", "tax compliance", "audit preparation",
    "cash flow planning", "equity research", "credit analysis",
    "graphic design", "video editing", "translation services",
    "technical documentation",
)

NEW_SKILL_LABELS = (
    "prompt engineering", "model deployment",
    "neural network tuning", "conversational ai design",
)

OCCUPATION_TITLES = (
    "data analyst", "software engineer", "product manager",
    "marketing specialist", "hr coordinator", "financial analyst",
    "operations manager", "sales representative", "customer support agent",
    "graphic designer", "it administrator", "research scientist",
    "content strategist", "procurement officer", "quality engineer",
    "business consultant", "logistics planner", "payroll clerk",
    "web developer", "communications manager",
)

RETITLED = {"occ20": "communications lead"}  # the one 2022 rename

TITLE_VARIANTS = ("{t}", "senior {t}", "junior {t}", "{t} (remote)")

AMBIGUOUS_SHAPES = (
    "Familiar with {skill} {fragment}.",
    "Some knowledge of {skill} is expected.",
)

BOILERPLATE_LINES = (
    "Competitive salary and benefits are offered.",
    "Our team works from a central downtown office.",
    "Bachelor's degree in any field is sufficient.",
    "Flexible hours with paid annual leave.",
    "Applications are reviewed on a rolling basis.",
)


def _skill_id(i: int) -> str:
    return f"sk{i + 1:03d}"


def _occ_id(i: int) -> str:
    return f"occ{i + 1:02d}"


def build_skill_taxonomies() -> tuple[SkillTaxonomy, SkillTaxonomy]:
    base = {
        _skill_id(i): Skill(
            _skill_id(i), label, f"Applies {label} to everyday business problems."
        )
        for i, label in enumerate(SKILL_LABELS)
    }
    extra = {
        _skill_id(len(SKILL_LABELS) + j): Skill(
            _skill_id(len(SKILL_LABELS) + j),
            label,
            f"Applies {label} to everyday business problems.",
        )
        for j, label in enumerate(NEW_SKILL_LABELS)
    }
    return (
        SkillTaxonomy(version="2018", skills=base),
        SkillTaxonomy(version="2022", skills={**base, **extra}),
    )


def _task_sentence(label: str, level: str, fragment_idx: int) -> str:
    s = f"{LEVEL_QUALIFIERS[level]} {label} {_FRAGMENTS[fragment_idx % len(_FRAGMENTS)]}."
    return s[0].upper() + s[1:]


def core_skill_indices(occ_idx: int) -> list[int]:
    n = len(SKILL_LABELS)
    return [(occ_idx * 2) % n, (occ_idx * 2 + 1) % n,
            (occ_idx * 2 + 10) % n, (occ_idx * 2 + 25) % n]


def gained_skill_indices(occ_idx: int) -> list[int]:
    """2022 additions: even occupations gain one brand-new skill, some odd
    ones gain an existing skill absent from their 2018 task set."""
    if occ_idx % 2 == 0:
        return [len(SKILL_LABELS) + (occ_idx // 2) % len(NEW_SKILL_LABELS)]
    if occ_idx % 4 == 1:
        return [(occ_idx * 2 + 40) % len(SKILL_LABELS)]
    return []


def build_occupation_taxonomies() -> tuple[OccupationTaxonomy, OccupationTaxonomy]:
    occs_2018: dict[str, Occupation] = {}
    occs_2022: dict[str, Occupation] = {}
    for i, title in enumerate(OCCUPATION_TITLES):
        oid = _occ_id(i)
        tasks = tuple(
            _task_sentence(SKILL_LABELS[si], LEVELS[j % 3], i + j)
            for j, si in enumerate(core_skill_indices(i))
        )
        occs_2018[oid] = Occupation(oid, title, tasks)
        all_labels = SKILL_LABELS + NEW_SKILL_LABELS
        gained = tuple(
            _task_sentence(all_labels[si], LEVELS[(i + 1) % 3], i + 5 + j)
            for j, si in enumerate(gained_skill_indices(i))
        )
        occs_2022[oid] = Occupation(
            oid, RETITLED.get(oid, title), tasks + gained
        )
    return (
        OccupationTaxonomy(version="2018", occupations=occs_2018),
        OccupationTaxonomy(version="2022", occupations=occs_2022),
    )


def generate_fixture(
    out_dir: str | Path,
    seed: int = 7,
    n_firms: int = 200,
    years: tuple[int, int] = (2018, 2022),
    postings_per_cell: int = 2,
    n_examiners: int = 80,
) -> Path:
    """Write the full toy bundle into out_dir and return the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 0])

    skills_2018, skills_2022 = build_skill_taxonomies()
    occ_2018, occ_2022 = build_occupation_taxonomies()
    skills_2018.to_csv(out / "skills_2018.csv")
    skills_2022.to_csv(out / "skills_2022.csv")
    occ_2018.to_csv(out / "occupations_2018.csv", out / "tasks_2018.csv")
    occ_2022.to_csv(out / "occupations_2022.csv", out / "tasks_2022.csv")

    examiners = [f"ex{i + 1:02d}" for i in range(n_examiners)]
    leniency = {e: float(v) for e, v in
                zip(examiners, rng.uniform(0.35, 0.85, n_examiners))}
    firms = [f"f{i + 1:03d}" for i in range(n_firms)]
    year_list = list(range(years[0], years[1] + 1))

    records: list[ExaminerRecord] = []
    app_no = 0
    for e in examiners:
        for _ in range(30):
            records.append(
                ExaminerRecord(
                    e,
                    f"app{app_no:06d}",
                    firms[int(rng.integers(n_firms))],
                    int(rng.integers(2010, 2018)),
                    False,
                    bool(rng.random() < leniency[e]),
                )
            )
            app_no += 1

    all_labels = SKILL_LABELS + NEW_SKILL_LABELS
    control_rows: list[str] = []
    posting_lines: list[str] = []
    pid = 0
    for fi, firm in enumerate(firms):
        ai_level = fi % 4
        fl_prob = (0.05, 0.2, 0.4, 0.7)[ai_level]
        base_assets = 7.0 + fi / 100.0
        home_occs = [fi % 20, (fi // 2 + 7) % 20]
        for year in year_list:
            n_apps = 1 + ai_level + int(rng.random() < 0.5)
            granted = 0
            for _ in range(n_apps):
                e = examiners[int(rng.integers(n_examiners))]
                ok = bool(rng.random() < leniency[e])
                granted += int(ok)
                records.append(
                    ExaminerRecord(e, f"app{app_no:06d}", firm, year, True, ok)
                )
                app_no += 1
            ai_flow = 3.0 * granted + 0.5 * ai_level
            control_rows.append(
                f"{firm},{year},{base_assets + 0.1 * rng.standard_normal():.4f},"
                f"{0.1 + 0.05 * rng.standard_normal():.4f},"
                f"{abs(0.3 + 0.1 * rng.standard_normal()):.4f},"
                f"{abs(0.05 + 0.02 * rng.standard_normal()):.4f},"
                f"{ai_flow:.1f}"
            )

            for oi in home_occs:
                core = core_skill_indices(oi)
                gained = gained_skill_indices(oi)
                for _ in range(postings_per_cell):
                    sentences: list[str] = []
                    n_core = 2 + int(rng.integers(3))
                    for si in rng.choice(core, size=min(n_core, len(core)), replace=False):
                        level = LEVELS[int(rng.integers(3))]
                        sentences.append(
                            _task_sentence(all_labels[si], level, int(rng.integers(10)))
                        )
                    if rng.random() < 0.5:
                        off = (oi * 2 + 13 + int(rng.integers(5))) % len(SKILL_LABELS)
                        sentences.append(
                            _task_sentence(
                                SKILL_LABELS[off], LEVELS[int(rng.integers(3))],
                                int(rng.integers(10)),
                            )
                        )
                    if gained and rng.random() < fl_prob:
                        sentences.append(
                            _task_sentence(
                                all_labels[gained[0]], LEVELS[int(rng.integers(3))],
                                int(rng.integers(10)),
                            )
                        )
                    if rng.random() < 0.25:
                        shape = AMBIGUOUS_SHAPES[int(rng.integers(len(AMBIGUOUS_SHAPES)))]
                        si = core[int(rng.integers(len(core)))]
                        sentences.append(
                            shape.format(
                                skill=all_labels[si],
                                fragment=_FRAGMENTS[int(rng.integers(10))],
                            )
                        )
                    for _ in range(1 + int(rng.random() < 0.5)):
                        sentences.append(
                            BOILERPLATE_LINES[int(rng.integers(len(BOILERPLATE_LINES)))]
                        )
                    variant = TITLE_VARIANTS[int(rng.integers(len(TITLE_VARIANTS)))]
                    title = variant.format(t=OCCUPATION_TITLES[oi])
                    body = (
                        "- " + "\n- ".join(sentences)
                        if rng.random() < 0.2
                        else " ".join(sentences)
                    )
                    pid += 1
                    posting_lines.append(
                        json.dumps(
                            {
                                "posting_id": f"p{pid:06d}",
                                "firm_id": firm,
                                "year": year,
                                "title": title,
                                "body": body,
                            },
                            ensure_ascii=False,
                        )
                    )

    (out / "postings.jsonl").write_text(
        "\n".join(posting_lines) + "\n", encoding="utf-8"
    )
    (out / "controls.csv").write_text(
        "firm_id,year,log_assets,roa,leverage,rnd_intensity,ai_flow\n"
        + "\n".join(control_rows)
        + "\n",
        encoding="utf-8",
    )
    write_examiner_records(records, out / "examiner_records.csv")

    config = configparser.ConfigParser()
    config["run"] = {"seed": str(seed)}
    config["paths"] = {
        "workdir": str(out / "work"),
        "postings": str(out / "postings.jsonl"),
        "skills_2018": str(out / "skills_2018.csv"),
        "skills_2022": str(out / "skills_2022.csv"),
        "occupations_2018": str(out / "occupations_2018.csv"),
        "tasks_2018": str(out / "tasks_2018.csv"),
        "occupations_2022": str(out / "occupations_2022.csv"),
        "tasks_2022": str(out / "tasks_2022.csv"),
        "controls": str(out / "controls.csv"),
        "examiner_records": str(out / "examiner_records.csv"),
    }
    config["corpus"] = {"year_min": str(years[0]), "year_max": str(years[1])}
    config["train"] = {
        "per_level": "4",
        "epochs": "12",
        "batch_size": "32",
        "negatives": "5",
        "margin": "0.5",
        "learning_rate": "0.001",
        "boilerplate_count": "150",
        "prescreener_epochs": "300",
    }
    config["encoder"] = {
        "embed_dim": "64",
        "lstm_dim": "64",
        "attn_dim": "64",
        "out_dim": "128",
        "max_len": "64",
        "doc_max_len": "128",
    }
    config["mapping"] = {"threshold": "0.6"}
    config["extract"] = {"threshold": "0.6", "cap": "5"}
    config["panel"] = {"depreciation": "0.15", "intensity_mentions": "false"}
    config["estimate"] = {"leniency_min_year": "2010", "leniency_max_year": "2017"}
    config["regressions"] = {
        "aligned_ols": "aligned,ols,log1p",
        "aligned_2sls": "aligned,2sls,log1p",
        "nonaligned_ols": "nonaligned,ols,log1p",
        "nonaligned_2sls": "nonaligned,2sls,log1p",
    }
    config_path = out / "config.ini"
    with open(config_path, "w", encoding="utf-8") as fh:
        config.write(fh)
    return config_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="skillpanel.fixtures",
        description="Generate the deterministic toy input bundle.",
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--firms", type=int, default=200)
    args = parser.parse_args(argv)
    path = generate_fixture(args.out, seed=args.seed, n_firms=args.firms)
    print(f"wrote fixture bundle; config at {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
