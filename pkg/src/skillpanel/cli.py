"""Pipeline driver: staged commands from raw inputs to panel estimates.

Each stage reads its inputs, writes its artifacts into the configured work
directory, and records a manifest (input hashes, settings hash, seed,
outputs, warnings). A rerun whose manifest matches is a no-op, so `all` is
cheap to repeat and identical seeds reproduce identical artifacts.

Exit codes: 0 success, 2 configuration problems, 3 missing upstream
artifacts, 4 runtime failures.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    FirmYearControls,
    JobPosting,
    generate_boilerplate_sentences,
    generate_synthetic_pairs,
    load_controls,
    load_postings,
    read_pairs,
    write_pairs,
)
from .econ import (
    RegressionSpec,
    build_instrument,
    examiner_leniency,
    first_stage_firm_year,
    load_examiner_records,
    ols_fe,
    tsls,
)
from .encoder import (
    EncoderParams,
    Vocabulary,
    encode_texts,
    load_checkpoint,
    save_checkpoint,
)
from .extraction import (
    PostingSkills,
    ai_stock,
    aggregate_panel,
    classify_posting,
    extract_skills_bulk,
    read_panel,
    write_panel,
)
from .taxonomy import (
    OccupationTaxonomy,
    SkillTaxonomy,
    assign_occupations,
    build_baseline_sets,
    build_skill_index,
    build_title_index,
    forward_looking_sets,
    taxonomy_stability,
)
from .textproc import AmbiguityLexicon, scan_ambiguity
from .trainer import (
    PrescreenerConfig,
    TrainingConfig,
    evaluate_retrieval,
    load_prescreener,
    save_prescreener,
    skill_text,
    train_biencoder,
    train_prescreener,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4

THRESHOLD_GRID = (0.5, 0.6, 0.7, 0.8)
DEPRECIATION_GRID = (0.15, 0.2, 0.3)

STAGES = ("gen-data", "train", "map-taxonomy", "extract", "panel", "estimate", "stability")


class ConfigError(Exception):
    pass


class MissingArtifactError(Exception):
    pass


PATH_KEYS = (
    "workdir",
    "postings",
    "skills_2018",
    "skills_2022",
    "occupations_2018",
    "tasks_2018",
    "occupations_2022",
    "tasks_2022",
    "controls",
    "examiner_records",
)


@dataclass
class PipelineConfig:
    paths: dict[str, Path]
    seed: int
    year_window: tuple[int, int]
    per_level: int
    epochs: int
    batch_size: int
    negatives: int
    margin: float
    learning_rate: float
    boilerplate_count: int
    prescreener_epochs: int
    embed_dim: int
    lstm_dim: int
    attn_dim: int
    out_dim: int
    max_len: int
    doc_max_len: int
    map_threshold: float
    extract_threshold: float
    cap: int
    depreciation: float
    intensity_mentions: bool
    leniency_window: tuple[int, int]
    regressions: dict[str, tuple[str, str, str]]
    lexicon_path: Path | None = None
    source: Path | None = field(default=None, repr=False)

    @property
    def workdir(self) -> Path:
        return self.paths["workdir"]

    @classmethod
    def from_ini(
        cls,
        path: str | Path,
        seed_override: int | None = None,
        workdir_override: str | None = None,
    ) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc

        def need(section: str) -> configparser.SectionProxy:
            if section not in parser:
                raise ConfigError(f"missing [{section}] section in {path}")
            return parser[section]

        try:
            paths_raw = need("paths")
            paths = {}
            for key in PATH_KEYS:
                if key not in paths_raw:
                    raise ConfigError(f"[paths] is missing {key!r}")
                paths[key] = Path(paths_raw[key])
            corpus = need("corpus")
            train = need("train")
            enc_cfg = need("encoder")
            mapping = need("mapping")
            extract = need("extract")
            panel = need("panel")
            estimate = need("estimate")
            regress = need("regressions")

            regressions: dict[str, tuple[str, str, str]] = {}
            for name, value in regress.items():
                parts = [p.strip() for p in value.split(",")]
                if len(parts) == 2:
                    parts.append("log1p")
                if len(parts) != 3 or parts[1] not in ("ols", "2sls"):
                    raise ConfigError(
                        f"[regressions] {name} must be outcome,method[,transform]"
                    )
                regressions[name] = (parts[0], parts[1], parts[2])
            if not regressions:
                raise ConfigError("[regressions] must define at least one entry")

            seed = seed_override
            if seed is None:
                seed = parser.getint("run", "seed", fallback=0)
            cfg = cls(
                paths=paths,
                seed=seed,
                year_window=(corpus.getint("year_min"), corpus.getint("year_max")),
                per_level=train.getint("per_level", 4),
                epochs=train.getint("epochs", 25),
                batch_size=train.getint("batch_size", 32),
                negatives=train.getint("negatives", 5),
                margin=train.getfloat("margin", 0.5),
                learning_rate=train.getfloat("learning_rate", 1e-3),
                boilerplate_count=train.getint("boilerplate_count", 150),
                prescreener_epochs=train.getint("prescreener_epochs", 300),
                embed_dim=enc_cfg.getint("embed_dim", 64),
                lstm_dim=enc_cfg.getint("lstm_dim", 64),
                attn_dim=enc_cfg.getint("attn_dim", 64),
                out_dim=enc_cfg.getint("out_dim", 128),
                max_len=enc_cfg.getint("max_len", 64),
                doc_max_len=enc_cfg.getint("doc_max_len", 128),
                map_threshold=mapping.getfloat("threshold", 0.6),
                extract_threshold=extract.getfloat("threshold", 0.6),
                cap=extract.getint("cap", 5),
                depreciation=panel.getfloat("depreciation", 0.15),
                intensity_mentions=panel.getboolean("intensity_mentions", False),
                leniency_window=(
                    estimate.getint("leniency_min_year", 2010),
                    estimate.getint("leniency_max_year", 2017),
                ),
                regressions=regressions,
                lexicon_path=(
                    Path(panel["lexicon"]) if "lexicon" in panel else None
                ),
                source=path,
            )
        except ConfigError:
            raise
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value in {path}: {exc}") from exc
        if cfg.year_window[0] > cfg.year_window[1]:
            raise ConfigError("year_min must not exceed year_max")
        if not 0.0 < cfg.depreciation < 1.0:
            raise ConfigError("depreciation must be inside (0, 1)")
        if workdir_override:
            cfg.paths["workdir"] = Path(workdir_override)
        return cfg


# ---------------------------------------------------------------------------
# manifests


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths: dict[str, Path]) -> dict[str, str]:
    hashes = {}
    for name, p in sorted(paths.items()):
        if not Path(p).is_file():
            raise MissingArtifactError(f"required input {name} not found at {p}")
        hashes[name] = _sha256_file(Path(p))
    return hashes


def _settings_hash(settings: dict) -> str:
    return hashlib.sha256(
        json.dumps(settings, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


def _manifest_path(workdir: Path, stage: str) -> Path:
    return workdir / f"{stage}.manifest.json"


def _up_to_date(
    workdir: Path,
    stage: str,
    input_hashes: dict[str, str],
    settings: dict,
    seed: int,
    outputs: list[Path],
) -> bool:
    mpath = _manifest_path(workdir, stage)
    if not mpath.is_file():
        return False
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    return (
        manifest.get("inputs") == input_hashes
        and manifest.get("settings_hash") == _settings_hash(settings)
        and manifest.get("seed") == seed
        and all(Path(o).is_file() for o in outputs)
    )


def _write_manifest(
    workdir: Path,
    stage: str,
    input_hashes: dict[str, str],
    settings: dict,
    seed: int,
    outputs: list[Path],
    warnings: list[str],
) -> None:
    manifest = {
        "stage": stage,
        "package_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "inputs": input_hashes,
        "settings": settings,
        "settings_hash": _settings_hash(settings),
        "outputs": [str(o) for o in outputs],
        "warnings": warnings,
    }
    _manifest_path(workdir, stage).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for w in warnings:
        print(f"[{stage}] warning: {w}")


# ---------------------------------------------------------------------------
# posting-skills serialization

POSTING_SKILLS_HEADER = (
    "posting_id",
    "firm_id",
    "year",
    "occ_id",
    "skills",
    "aligned",
    "nonaligned",
    "mentions",
    "kept_indices",
    "kept_texts",
    "amb_freq",
    "amb_share",
)

_TEXT_SEP = "\x1f"


def _write_posting_skills(
    path: Path,
    rows: list[tuple[JobPosting, PostingSkills, int, float]],
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSTING_SKILLS_HEADER)
        for posting, ps, amb_freq, amb_share in rows:
            mentions = "|".join(
                f"{sid}:{','.join(str(i) for i in ps.sentence_matches[sid])}"
                for sid in sorted(ps.sentence_matches)
            )
            writer.writerow(
                [
                    posting.posting_id,
                    posting.firm_id,
                    posting.year,
                    ps.occ_id or "",
                    "|".join(sorted(ps.skills)),
                    "|".join(sorted(ps.aligned or ())),
                    "|".join(sorted(ps.nonaligned or ())),
                    mentions,
                    "|".join(str(i) for i, _ in ps.kept_sentences),
                    _TEXT_SEP.join(t for _, t in ps.kept_sentences),
                    amb_freq,
                    repr(amb_share),
                ]
            )


def _read_posting_skills(path: Path) -> list[tuple[JobPosting, PostingSkills]]:
    out: list[tuple[JobPosting, PostingSkills]] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != POSTING_SKILLS_HEADER:
            raise MissingArtifactError(
                f"{path} does not look like a posting-skills artifact"
            )
        for row in reader:
            indices = [int(i) for i in row["kept_indices"].split("|") if i != ""]
            texts = row["kept_texts"].split(_TEXT_SEP) if row["kept_texts"] else []
            mentions: dict[str, tuple[int, ...]] = {}
            if row["mentions"]:
                for part in row["mentions"].split("|"):
                    sid, _, idxs = part.partition(":")
                    mentions[sid] = tuple(int(i) for i in idxs.split(","))
            posting = JobPosting(
                posting_id=row["posting_id"],
                firm_id=row["firm_id"],
                year=int(row["year"]),
                title="(stored)",
                body="(stored)",
            )
            ps = PostingSkills(
                posting_id=row["posting_id"],
                skills=frozenset(s for s in row["skills"].split("|") if s),
                sentence_matches=mentions,
                kept_sentences=tuple(zip(indices, texts)),
                occ_id=row["occ_id"] or None,
                aligned=frozenset(s for s in row["aligned"].split("|") if s),
                nonaligned=frozenset(s for s in row["nonaligned"].split("|") if s),
            )
            out.append((posting, ps))
    return out


# ---------------------------------------------------------------------------
# stages


def _threshold_warnings(threshold: float, label: str) -> list[str]:
    if not any(abs(threshold - g) < 1e-12 for g in THRESHOLD_GRID):
        grid = ", ".join(str(g) for g in THRESHOLD_GRID)
        return [f"custom threshold {threshold} for {label} (grid: {grid})"]
    return []


def stage_gen_data(cfg: PipelineConfig) -> None:
    workdir = cfg.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    inputs = _hash_inputs({"skills_2022": cfg.paths["skills_2022"]})
    settings = {
        "per_level": cfg.per_level,
        "boilerplate_count": cfg.boilerplate_count,
    }
    outputs = [workdir / "pairs.csv", workdir / "boilerplate.txt"]
    if _up_to_date(workdir, "gen-data", inputs, settings, cfg.seed, outputs):
        print("[gen-data] up to date, skipping")
        return
    taxonomy = SkillTaxonomy.from_csv(cfg.paths["skills_2022"])
    pairs = generate_synthetic_pairs(taxonomy, cfg.per_level, cfg.seed)
    write_pairs(pairs, outputs[0])
    boilerplate = generate_boilerplate_sentences(cfg.boilerplate_count, cfg.seed)
    outputs[1].write_text("\n".join(boilerplate) + "\n", encoding="utf-8")
    n_train = sum(1 for p in pairs if p.split == "train")
    print(f"[gen-data] wrote {len(pairs)} pairs ({n_train} train) and "
          f"{len(boilerplate)} boilerplate sentences")
    _write_manifest(workdir, "gen-data", inputs, settings, cfg.seed, outputs, [])


def _vocab_texts(cfg: PipelineConfig, pairs, boilerplate) -> list[str]:
    taxonomy = SkillTaxonomy.from_csv(cfg.paths["skills_2022"])
    texts = [p.sentence for p in pairs]
    texts += [
        skill_text(s.label, s.description) for s in taxonomy.skills.values()
    ]
    texts += list(boilerplate)
    for key in ("2018", "2022"):
        occ = OccupationTaxonomy.from_csv(
            cfg.paths[f"occupations_{key}"], cfg.paths[f"tasks_{key}"]
        )
        for o in occ.occupations.values():
            texts.append(o.title)
            texts.extend(o.tasks)
    return texts


def stage_train(cfg: PipelineConfig) -> None:
    workdir = cfg.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    inputs = _hash_inputs(
        {
            "pairs": workdir / "pairs.csv",
            "boilerplate": workdir / "boilerplate.txt",
            "skills_2022": cfg.paths["skills_2022"],
            "occupations_2018": cfg.paths["occupations_2018"],
            "tasks_2018": cfg.paths["tasks_2018"],
            "occupations_2022": cfg.paths["occupations_2022"],
            "tasks_2022": cfg.paths["tasks_2022"],
        }
    )
    settings = {
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "negatives": cfg.negatives,
        "margin": cfg.margin,
        "learning_rate": cfg.learning_rate,
        "prescreener_epochs": cfg.prescreener_epochs,
        "dims": [cfg.embed_dim, cfg.lstm_dim, cfg.attn_dim, cfg.out_dim],
        "max_len": cfg.max_len,
    }
    outputs = [
        workdir / "checkpoint.npz",
        workdir / "prescreener.npz",
        workdir / "metrics.txt",
    ]
    if _up_to_date(workdir, "train", inputs, settings, cfg.seed, outputs):
        print("[train] up to date, skipping")
        return

    pairs = read_pairs(workdir / "pairs.csv")
    boilerplate = [
        line
        for line in (workdir / "boilerplate.txt")
        .read_text(encoding="utf-8")
        .splitlines()
        if line.strip()
    ]
    taxonomy = SkillTaxonomy.from_csv(cfg.paths["skills_2022"])
    vocab = Vocabulary.build(_vocab_texts(cfg, pairs, boilerplate))
    init = EncoderParams.initialize(
        vocab.size,
        embed_dim=cfg.embed_dim,
        lstm_dim=cfg.lstm_dim,
        attn_dim=cfg.attn_dim,
        out_dim=cfg.out_dim,
        seed=cfg.seed,
    )
    train_cfg = TrainingConfig(
        margin=cfg.margin,
        negatives=cfg.negatives,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        max_len=cfg.max_len,
        seed=cfg.seed,
    )
    params, trace = train_biencoder(pairs, taxonomy, vocab, train_cfg, init_params=init)
    index = build_skill_index(taxonomy, params, vocab, max_len=cfg.max_len)
    eval_pairs = [p for p in pairs if p.split == "eval"]
    metrics = evaluate_retrieval(eval_pairs, params, vocab, index, cfg.max_len)

    examples = [(p.sentence, 1) for p in pairs if p.split == "train"]
    examples += [(s, 0) for s in boilerplate]
    clf = train_prescreener(
        examples,
        params,
        vocab,
        PrescreenerConfig(epochs=cfg.prescreener_epochs, max_len=cfg.max_len),
    )

    save_checkpoint(outputs[0], params, vocab)
    save_prescreener(outputs[1], clf)
    outputs[2].write_text(metrics.to_text(), encoding="utf-8")
    final_loss = trace[-1] if trace else float("nan")
    print(
        f"[train] {len(trace)} epochs, final loss {final_loss:.4f}, "
        f"eval mrr {metrics.mrr:.3f}, recall@5 {metrics.recall_at_5:.3f}"
    )
    _write_manifest(workdir, "train", inputs, settings, cfg.seed, outputs, [])


def _baseline_payload(baseline) -> dict:
    return {
        "version": baseline.version,
        "threshold": baseline.threshold,
        "sets": {occ: sorted(s) for occ, s in sorted(baseline.sets.items())},
    }


def stage_map(cfg: PipelineConfig) -> None:
    workdir = cfg.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    inputs = _hash_inputs(
        {
            "checkpoint": workdir / "checkpoint.npz",
            "skills_2018": cfg.paths["skills_2018"],
            "skills_2022": cfg.paths["skills_2022"],
            "occupations_2018": cfg.paths["occupations_2018"],
            "tasks_2018": cfg.paths["tasks_2018"],
            "occupations_2022": cfg.paths["occupations_2022"],
            "tasks_2022": cfg.paths["tasks_2022"],
        }
    )
    settings = {"threshold": cfg.map_threshold, "max_len": cfg.max_len}
    outputs = [
        workdir / "baseline_2018.json",
        workdir / "baseline_2022.json",
        workdir / "forward_looking.json",
    ]
    if _up_to_date(workdir, "map-taxonomy", inputs, settings, cfg.seed, outputs):
        print("[map-taxonomy] up to date, skipping")
        return
    warnings = _threshold_warnings(cfg.map_threshold, "task mapping")

    params, vocab = load_checkpoint(workdir / "checkpoint.npz")
    baselines = {}
    for key in ("2018", "2022"):
        skills = SkillTaxonomy.from_csv(cfg.paths[f"skills_{key}"])
        occ = OccupationTaxonomy.from_csv(
            cfg.paths[f"occupations_{key}"], cfg.paths[f"tasks_{key}"]
        )
        index = build_skill_index(skills, params, vocab, max_len=cfg.max_len)
        baselines[key] = build_baseline_sets(
            occ, index, cfg.map_threshold, params, vocab, cfg.max_len
        )
        payload = _baseline_payload(baselines[key])
        (workdir / f"baseline_{key}.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    fl, errors = forward_looking_sets(baselines["2018"], baselines["2022"])
    payload = {
        "old_version": baselines["2018"].version,
        "new_version": baselines["2022"].version,
        "threshold": cfg.map_threshold,
        "sets": {occ: sorted(s) for occ, s in sorted(fl.items())},
        "errors": dict(sorted(errors.items())),
    }
    outputs[2].write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    n_fl = sum(len(s) for s in fl.values())
    print(f"[map-taxonomy] baseline sets for {len(fl)} occupations, "
          f"{n_fl} forward-looking links")
    if errors:
        warnings.append(f"{len(errors)} occupations missing from one version")
    _write_manifest(workdir, "map-taxonomy", inputs, settings, cfg.seed, outputs, warnings)


def stage_extract(cfg: PipelineConfig) -> None:
    workdir = cfg.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    inputs = _hash_inputs(
        {
            "checkpoint": workdir / "checkpoint.npz",
            "prescreener": workdir / "prescreener.npz",
            "baseline_2018": workdir / "baseline_2018.json",
            "postings": cfg.paths["postings"],
            "skills_2022": cfg.paths["skills_2022"],
            "occupations_2022": cfg.paths["occupations_2022"],
            "tasks_2022": cfg.paths["tasks_2022"],
        }
    )
    settings = {
        "threshold": cfg.extract_threshold,
        "cap": cfg.cap,
        "max_len": cfg.max_len,
        "doc_max_len": cfg.doc_max_len,
        "year_window": list(cfg.year_window),
    }
    outputs = [workdir / "posting_skills.csv", workdir / "doc_embeddings.npz"]
    if _up_to_date(workdir, "extract", inputs, settings, cfg.seed, outputs):
        print("[extract] up to date, skipping")
        return
    warnings = _threshold_warnings(cfg.extract_threshold, "extraction")

    postings, rejected = load_postings(cfg.paths["postings"], cfg.year_window)
    if rejected:
        warnings.append(f"rejected {rejected} posting records")
    if not postings:
        raise MissingArtifactError("no usable postings inside the year window")
    params, vocab = load_checkpoint(workdir / "checkpoint.npz")
    clf = load_prescreener(workdir / "prescreener.npz")
    skills = SkillTaxonomy.from_csv(cfg.paths["skills_2022"])
    index = build_skill_index(skills, params, vocab, max_len=cfg.max_len)
    occ = OccupationTaxonomy.from_csv(
        cfg.paths["occupations_2022"], cfg.paths["tasks_2022"]
    )
    title_index = build_title_index(occ, params, vocab, max_len=cfg.max_len)

    results = extract_skills_bulk(
        postings, clf, params, vocab, index,
        threshold=cfg.extract_threshold, cap=cfg.cap, max_len=cfg.max_len,
    )
    occs = assign_occupations(
        [p.title for p in postings], title_index, params, vocab, cfg.max_len
    )
    baseline_raw = json.loads((workdir / "baseline_2018.json").read_text("utf-8"))
    baseline = {o: frozenset(s) for o, s in baseline_raw["sets"].items()}

    lexicon = (
        AmbiguityLexicon.from_file(cfg.lexicon_path)
        if cfg.lexicon_path
        else AmbiguityLexicon.default()
    )
    rows: list[tuple[JobPosting, PostingSkills, int, float]] = []
    for posting, ps, occ_id in zip(postings, results, occs):
        classified = classify_posting(ps, occ_id, baseline)
        freq, share = scan_ambiguity([t for _, t in ps.kept_sentences], lexicon)
        rows.append((posting, classified, freq, share))
    _write_posting_skills(outputs[0], rows)

    doc_vectors = encode_texts(
        [f"{p.title}. {p.body}" for p in postings], params, vocab, cfg.doc_max_len
    )
    np.savez(outputs[1], **{p.posting_id: v for p, v in zip(postings, doc_vectors)})
    print(f"[extract] {len(postings)} postings, "
          f"{sum(len(r[1].skills) for r in rows)} distinct skill matches")
    _write_manifest(workdir, "extract", inputs, settings, cfg.seed, outputs, warnings)


def stage_panel(cfg: PipelineConfig) -> None:
    workdir = cfg.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    inputs = _hash_inputs(
        {
            "posting_skills": workdir / "posting_skills.csv",
            "doc_embeddings": workdir / "doc_embeddings.npz",
            "forward_looking": workdir / "forward_looking.json",
            "controls": cfg.paths["controls"],
        }
    )
    settings = {
        "depreciation": cfg.depreciation,
        "intensity_mentions": cfg.intensity_mentions,
    }
    outputs = [workdir / "panel.csv"]
    if _up_to_date(workdir, "panel", inputs, settings, cfg.seed, outputs):
        print("[panel] up to date, skipping")
        return
    warnings = []
    if not any(abs(cfg.depreciation - g) < 1e-12 for g in DEPRECIATION_GRID):
        grid = ", ".join(str(g) for g in DEPRECIATION_GRID)
        warnings.append(
            f"custom depreciation {cfg.depreciation} (grid: {grid})"
        )

    results = _read_posting_skills(workdir / "posting_skills.csv")
    control_list = load_controls(cfg.paths["controls"])
    controls = {(c.firm_id, c.year): c for c in control_list}
    flows: dict[str, dict[int, float]] = {}
    for c in control_list:
        flows.setdefault(c.firm_id, {})[c.year] = c.ai_flow
    stocks: dict[tuple[str, int], float] = {}
    for firm, flow_map in flows.items():
        for year, value in ai_stock(flow_map, cfg.depreciation).items():
            stocks[(firm, year)] = value

    fl_raw = json.loads((workdir / "forward_looking.json").read_text("utf-8"))
    fl_sets = {o: frozenset(s) for o, s in fl_raw["sets"].items()}
    with np.load(workdir / "doc_embeddings.npz", allow_pickle=False) as data:
        doc_embeddings = {k: data[k] for k in data.files}
    lexicon = (
        AmbiguityLexicon.from_file(cfg.lexicon_path)
        if cfg.lexicon_path
        else AmbiguityLexicon.default()
    )
    cells = aggregate_panel(
        results,
        fl_sets,
        stocks,
        doc_embeddings,
        controls,
        lexicon,
        intensity_mentions=cfg.intensity_mentions,
    )
    write_panel(cells, outputs[0])
    print(f"[panel] {len(cells)} firm-occupation-year cells")
    _write_manifest(workdir, "panel", inputs, settings, cfg.seed, outputs, warnings)


def _format_estimate(result, extra: dict[str, object]) -> str:
    lines = [
        f"method={result.method}",
        f"coefficient={result.coefficient!r}",
        f"se={result.std_error!r}",
        f"t={result.t_stats[result.spec.regressor]!r}",
        f"N={result.n_obs}",
        f"n_dropped={result.n_dropped}",
        f"r2_within={result.r2_within!r}",
        f"adj_r2={result.adj_r2!r}",
    ]
    if result.first_stage_f is not None:
        lines.append(f"first_stage_f={result.first_stage_f!r}")
        lines.append(f"weak_instrument={int(result.weak_instrument)}")
    for key, value in extra.items():
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    fe_dims = "|".join(f"{k}:{v}" for k, v in result.fe_levels.items())
    lines.append(f"fe_dims={fe_dims}")
    lines.append(f"cluster_dim={result.spec.cluster}:{result.cluster_count}")
    lines.append(f"spec_hash={result.spec.spec_hash()}")
    for name in result.coefficients:
        lines.append(f"coef_{name}={result.coefficients[name]!r}")
        lines.append(f"se_{name}={result.std_errors[name]!r}")
    return "\n".join(lines) + "\n"


def stage_estimate(cfg: PipelineConfig) -> None:
    workdir = cfg.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    inputs = _hash_inputs(
        {
            "panel": workdir / "panel.csv",
            "examiner_records": cfg.paths["examiner_records"],
        }
    )
    settings = {
        "regressions": {k: list(v) for k, v in sorted(cfg.regressions.items())},
        "leniency_window": list(cfg.leniency_window),
    }
    est_dir = workdir / "estimates"
    outputs = [est_dir / f"{name}.txt" for name in sorted(cfg.regressions)]
    if _up_to_date(workdir, "estimate", inputs, settings, cfg.seed, outputs):
        print("[estimate] up to date, skipping")
        return
    est_dir.mkdir(parents=True, exist_ok=True)
    warnings: list[str] = []

    panel = read_panel(workdir / "panel.csv")
    records = load_examiner_records(cfg.paths["examiner_records"])
    leniency = examiner_leniency(records, cfg.leniency_window)
    if not leniency:
        raise MissingArtifactError(
            "no examiner has scorable pre-period applications"
        )
    instrument, excluded = build_instrument(records, leniency)
    if excluded:
        warnings.append(
            f"excluded {excluded} applications whose examiner has no leniency estimate"
        )
    merged = panel.merge(instrument, on=["firm_id", "year"], how="left")

    for name in sorted(cfg.regressions):
        outcome, method, transform = cfg.regressions[name]
        spec = RegressionSpec(outcome=outcome, transform=transform)
        if method == "ols":
            result = ols_fe(merged, spec)
            extra: dict[str, object] = {}
        else:
            result = tsls(merged, spec)
            extra = {
                "first_stage_f_firm_year": first_stage_firm_year(merged, spec)
            }
        (est_dir / f"{name}.txt").write_text(
            _format_estimate(result, extra), encoding="utf-8"
        )
        print(
            f"[estimate] {name}: coef={result.coefficient:.6g} "
            f"se={result.std_error:.6g} N={result.n_obs}"
        )
    _write_manifest(workdir, "estimate", inputs, settings, cfg.seed, outputs, warnings)


def stage_stability(cfg: PipelineConfig) -> None:
    workdir = cfg.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    inputs = _hash_inputs(
        {
            "occupations_2018": cfg.paths["occupations_2018"],
            "tasks_2018": cfg.paths["tasks_2018"],
            "occupations_2022": cfg.paths["occupations_2022"],
            "tasks_2022": cfg.paths["tasks_2022"],
        }
    )
    settings: dict = {}
    outputs = [workdir / "stability.txt"]
    if _up_to_date(workdir, "stability", inputs, settings, cfg.seed, outputs):
        print("[stability] up to date, skipping")
        return
    occ_a = OccupationTaxonomy.from_csv(
        cfg.paths["occupations_2018"], cfg.paths["tasks_2018"]
    )
    occ_b = OccupationTaxonomy.from_csv(
        cfg.paths["occupations_2022"], cfg.paths["tasks_2022"]
    )
    lists = taxonomy_stability(occ_a, occ_b, kind="occupation-list")
    tasks = taxonomy_stability(occ_a, occ_b, kind="task-sets")
    outputs[0].write_text(lists.to_text() + "\n" + tasks.to_text(), encoding="utf-8")
    print(
        f"[stability] occupation-list {lists.stability:.3f}, "
        f"task-sets {tasks.stability:.3f}"
    )
    _write_manifest(workdir, "stability", inputs, settings, cfg.seed, outputs, [])


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train": stage_train,
    "map-taxonomy": stage_map,
    "extract": stage_extract,
    "panel": stage_panel,
    "estimate": stage_estimate,
    "stability": stage_stability,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="skillpanel",
        description="Run the skill-panel pipeline stages.",
    )
    parser.add_argument(
        "stage", choices=STAGES + ("all",), help="pipeline stage to run"
    )
    parser.add_argument("--config", required=True, help="INI configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", default=None, help="override the work directory")
    args = parser.parse_args(argv)

    try:
        cfg = PipelineConfig.from_ini(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    stages = STAGES if args.stage == "all" else (args.stage,)
    try:
        for stage in stages:
            STAGE_FUNCS[stage](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"runtime failure in stage {stage}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
