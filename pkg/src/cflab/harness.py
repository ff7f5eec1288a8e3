"""Experiment configuration, the end-to-end runner, and report rendering.

A run is described by one JSON config: the dataset, the protocols, the named
algorithms, and the metrics. The runner trains (and caches) any required
models, scores every protocol/metric combination, and writes deterministic
report artifacts: rerunning an unchanged config reproduces the report files
byte for byte. Volatile data (wall-clock timings) goes to a separate
`run_meta.json` so the reports stay comparable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bayesnet, cluster, memory
from .evaluation import (
    DEVIATION,
    METRICS,
    RANKED,
    ExperimentReport,
    RankedScoringConfig,
    run_experiment,
)
from .predictors import (
    BayesNetPredictor,
    ClusterPredictor,
    MemoryPredictor,
    PopularityPredictor,
)
from .votedata import (
    IMPLICIT_SCALE,
    Protocol,
    VoteDataError,
    VoteDatabase,
    VoteScale,
    generate_active_cases,
    load_msweb,
    load_votes_csv,
    restrict_to_top_items,
    save_split_manifest,
    split_users,
)

log = logging.getLogger(__name__)

POPULARITY = "popularity"
MEMORY = "memory"
CLUSTER = "cluster"
BAYESNET = "bayesnet"
ALGORITHM_KINDS = (POPULARITY, MEMORY, CLUSTER, BAYESNET)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)

    def canonical_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "params": self.params}, sort_keys=True
        )


@dataclass
class DatasetSpec:
    format: str  # "msweb" | "csv"
    train: Path
    test: Path | None
    scale: VoteScale
    top_items: int | None
    test_fraction: float | None
    split_seed: int
    min_votes: int
    # optional seeded subsample of training users, for learning-curve sweeps
    train_users: int | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    protocols: list[Protocol]
    algorithms: list[AlgorithmSpec]
    metrics: list[str]
    ranked: RankedScoringConfig
    confidence: float
    seed: int
    output_dir: Path


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"{where}.{key}: missing required key")
    return obj[key]


def parse_config(doc: dict, base_dir: Path) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a JSON object")

    ds = _require(doc, "dataset", "config")
    fmt = _require(ds, "format", "dataset")
    if fmt not in ("msweb", "csv"):
        raise ConfigError(f"dataset.format: unknown format {fmt!r}")
    train = base_dir / _require(ds, "train", "dataset")
    if not train.exists():
        raise ConfigError(f"dataset.train: file not found: {train}")
    test = ds.get("test")
    if test is not None:
        test = base_dir / test
        if not test.exists():
            raise ConfigError(f"dataset.test: file not found: {test}")
    if fmt == "msweb":
        scale = IMPLICIT_SCALE
    else:
        raw_scale = ds.get("scale")
        if raw_scale is None:
            raise ConfigError("dataset.scale: required for csv datasets")
        try:
            scale = VoteScale(
                min_vote=int(raw_scale.get("min_vote", 0)),
                max_vote=int(raw_scale.get("max_vote", 1)),
                neutral=float(raw_scale.get("neutral", 0.0)),
                implicit=bool(raw_scale.get("implicit", False)),
            )
        except (VoteDataError, TypeError, ValueError) as exc:
            raise ConfigError(f"dataset.scale: {exc}") from None
    test_fraction = ds.get("test_fraction")
    if test is None and test_fraction is None:
        raise ConfigError("dataset: need either a test file or a test_fraction split")
    dataset = DatasetSpec(
        format=fmt,
        train=train,
        test=test,
        scale=scale,
        top_items=ds.get("top_items"),
        test_fraction=test_fraction,
        split_seed=int(ds.get("split_seed", 0)),
        min_votes=int(ds.get("min_votes", 2)),
        train_users=ds.get("train_users"),
    )

    raw_protocols = _require(doc, "protocols", "config")
    if not raw_protocols:
        raise ConfigError("protocols: need at least one")
    protocols = []
    for i, p in enumerate(raw_protocols):
        try:
            protocols.append(Protocol.parse(p) if isinstance(p, str) else Protocol.given(int(p["given"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"protocols[{i}]: {exc}") from None

    raw_algorithms = _require(doc, "algorithms", "config")
    if not raw_algorithms:
        raise ConfigError("algorithms: need at least one")
    algorithms = []
    names = set()
    for i, a in enumerate(raw_algorithms):
        name = _require(a, "name", f"algorithms[{i}]")
        kind = _require(a, "kind", f"algorithms[{i}]")
        if kind not in ALGORITHM_KINDS:
            raise ConfigError(f"algorithms[{i}].kind: unknown kind {kind!r}")
        if name in names:
            raise ConfigError(f"algorithms[{i}].name: duplicate name {name!r}")
        names.add(name)
        params = a.get("config", {})
        if kind == MEMORY:
            try:
                memory.MemoryConfig.from_json(params)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"algorithms[{i}].config: {exc}") from None
        algorithms.append(AlgorithmSpec(name=name, kind=kind, params=params))

    metrics = doc.get("metrics", [RANKED])
    for m in metrics:
        if m not in METRICS:
            raise ConfigError(f"metrics: unknown metric {m!r}")
    for spec in algorithms:
        if DEVIATION in metrics and spec.kind == POPULARITY:
            raise ConfigError(
                f"metrics: {spec.name} cannot predict vote values; drop it or "
                "drop the deviation metric"
            )

    raw_ranked = doc.get("ranked", {})
    try:
        ranked = RankedScoringConfig(
            half_life=float(raw_ranked.get("half_life", 5.0)),
            neutral=float(raw_ranked.get("neutral", scale.neutral)),
        )
    except ValueError as exc:
        raise ConfigError(f"ranked: {exc}") from None

    # the only environment override besides CFLAB_JOBS: relocate the artifacts
    out_override = os.environ.get("CFLAB_OUTPUT_DIR")
    output_dir = Path(out_override) if out_override else base_dir / doc.get("output_dir", "out")
    return ExperimentConfig(
        dataset=dataset,
        protocols=protocols,
        algorithms=algorithms,
        metrics=list(metrics),
        ranked=ranked,
        confidence=float(doc.get("confidence", 0.90)),
        seed=int(doc.get("seed", 0)),
        output_dir=output_dir,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from None
    return parse_config(doc, path.parent)


def load_datasets(spec: DatasetSpec) -> tuple[VoteDatabase, VoteDatabase]:
    """Load (train, test); test users are filtered to the minimum vote count."""
    loader = load_msweb if spec.format == "msweb" else (
        lambda p: load_votes_csv(p, spec.scale)
    )
    train = loader(spec.train)
    if spec.test is not None:
        test = loader(spec.test)
    else:
        train, test = split_users(train, spec.test_fraction, spec.split_seed)
    if spec.train_users is not None and spec.train_users < len(train.users):
        perm = np.random.default_rng(spec.split_seed).permutation(len(train.users))
        keep = {train.users[i] for i in perm[: spec.train_users]}
        train = train.subset(users=[u for u in train.users if u in keep])
    if spec.min_votes > 1:
        keep = [u for u in test.users if len(test.votes[u]) >= spec.min_votes]
        test = test.subset(users=keep)
    return train, test


# --- model training and caching ---------------------------------------------


def _model_cache_key(train: VoteDatabase, spec: AlgorithmSpec, seed: int) -> str:
    h = hashlib.sha256()
    h.update(train.content_hash().encode())
    h.update(spec.canonical_json().encode())
    h.update(str(seed).encode())
    return h.hexdigest()[:24]


def train_model(train: VoteDatabase, spec: AlgorithmSpec, seed: int, cache_dir: Path):
    """Train (or load from cache) the model behind a cluster/bayesnet algorithm."""
    key = _model_cache_key(train, spec, seed)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{spec.kind}_{key}.json"
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        model = (
            cluster.ClusterModel.from_json(doc)
            if spec.kind == CLUSTER
            else bayesnet.BayesNetModel.from_json(doc)
        )
        log.info("loaded cached %s model %s", spec.kind, path.name)
        return model, path
    if spec.kind == CLUSTER:
        params = spec.params
        if "classes" in params:
            model, _ = cluster.em_fit(
                train,
                int(params["classes"]),
                seed=seed,
                prior_strength=float(params.get("prior_strength", 1.0)),
                max_iter=int(params.get("max_iter", 200)),
                compute_cs=False,
            )
        else:
            model, _ = cluster.select_cluster_model(
                train,
                int(params.get("max_classes", 25)),
                seed=seed,
                restarts=int(params.get("restarts", 3)),
                prior_strength=float(params.get("prior_strength", 1.0)),
                max_iter=int(params.get("max_iter", 200)),
            )
    elif spec.kind == BAYESNET:
        params = spec.params
        cfg = bayesnet.LearnConfig(
            structure_penalty=float(params.get("structure_penalty", 0.1)),
            equivalent_sample_size=float(params.get("ess", 10.0)),
            max_parents=params.get("max_parents"),
            seed=seed,
        )
        model = bayesnet.learn_network(train, cfg)
    else:
        raise ValueError(f"algorithm kind {spec.kind!r} has no trained model")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_json(), fh, sort_keys=True)
    return model, path


def build_predictor(
    spec: AlgorithmSpec,
    train: VoteDatabase,
    model_train: VoteDatabase,
    seed: int,
    cache_dir: Path,
):
    if spec.kind == POPULARITY:
        return PopularityPredictor(train, name=spec.name)
    if spec.kind == MEMORY:
        return MemoryPredictor(train, memory.MemoryConfig.from_json(spec.params), name=spec.name)
    model, _ = train_model(model_train, spec, seed, cache_dir)
    if spec.kind == CLUSTER:
        return ClusterPredictor(train, model, name=spec.name)
    return BayesNetPredictor(train, model, name=spec.name)


# --- the runner --------------------------------------------------------------


@dataclass
class RunResult:
    reports: dict[tuple[str, str], ExperimentReport]  # (metric, protocol label)
    report_paths: list[Path]
    summary_paths: list[Path]
    output_dir: Path


def run(config: ExperimentConfig, jobs: int | None = None) -> RunResult:
    t_start = time.perf_counter()
    if jobs is None and os.environ.get("CFLAB_JOBS"):
        jobs = int(os.environ["CFLAB_JOBS"])
    jobs = jobs or os.cpu_count() or 1
    out = config.output_dir
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(parents=True, exist_ok=True)
    cache_dir = out / "models"

    train, test = load_datasets(config.dataset)
    model_train = train
    if config.dataset.top_items:
        model_train = restrict_to_top_items(train, int(config.dataset.top_items))

    predictors = [
        build_predictor(spec, train, model_train, config.seed, cache_dir)
        for spec in config.algorithms
    ]

    reports: dict[tuple[str, str], ExperimentReport] = {}
    report_paths: list[Path] = []
    timings: dict[str, dict[str, float]] = {}
    for protocol in config.protocols:
        cases = generate_active_cases(test, protocol, config.seed)
        save_split_manifest(
            out / "splits" / f"{protocol.label}.json", cases, protocol, config.seed
        )
        for metric in config.metrics:
            report = run_experiment(
                train,
                cases,
                predictors,
                metric,
                ranked_cfg=config.ranked,
                confidence=config.confidence,
                seed=config.seed,
                protocol_label=protocol.label,
                jobs=jobs,
            )
            reports[(metric, protocol.label)] = report
            path = out / "reports" / f"{metric}_{protocol.label}.json"
            path.write_text(report.dumps(), encoding="utf-8")
            report_paths.append(path)
            timings[f"{metric}/{protocol.label}"] = report.timing

    summary_paths = []
    for metric in config.metrics:
        summary = summarize(
            [reports[(metric, p.label)] for p in config.protocols]
        )
        jpath = out / "reports" / f"summary_{metric}.json"
        jpath.write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        tpath = out / "reports" / f"summary_{metric}.txt"
        tpath.write_text(render_summary(summary, "text"), encoding="utf-8")
        summary_paths.extend([jpath, tpath])

    meta = {
        "wall_seconds": time.perf_counter() - t_start,
        "jobs": jobs,
        "timing": timings,
        "train_users": len(train.users),
        "train_items": len(train.items),
        "test_users": len(test.users),
    }
    (out / "run_meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return RunResult(reports, report_paths, summary_paths, out)


def train_models(config: ExperimentConfig, only: str | None = None) -> dict[str, Path]:
    """Train and cache the models required by the config's algorithms."""
    kind_filter = {"bc": CLUSTER, "bn": BAYESNET}.get(only) if only else None
    train, _ = load_datasets(config.dataset)
    if config.dataset.top_items:
        train = restrict_to_top_items(train, int(config.dataset.top_items))
    out = {}
    for spec in config.algorithms:
        if spec.kind not in (CLUSTER, BAYESNET):
            continue
        if kind_filter and spec.kind != kind_filter:
            continue
        _, path = train_model(train, spec, config.seed, config.output_dir / "models")
        out[spec.name] = path
    return out


# --- rendering ---------------------------------------------------------------


def summarize(reports: list[ExperimentReport]) -> dict:
    """Combine per-protocol reports of one metric into one renderable grid."""
    if not reports:
        raise ValueError("no reports to summarize")
    metric = reports[0].metric
    algorithms = reports[0].algorithms
    for r in reports:
        if r.metric != metric or r.algorithms != algorithms:
            raise ValueError("summaries need one metric and one algorithm set")
    return {
        "version": 1,
        "kind": "experiment_summary",
        "metric": metric,
        "algorithms": algorithms,
        "protocols": [r.protocol for r in reports],
        "aggregate": {r.protocol: r.aggregate for r in reports},
        "required_difference": {r.protocol: r.required_difference for r in reports},
        "case_counts": {r.protocol: r.case_count for r in reports},
    }


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    return f"{x:.2f}"


def render_summary(summary: dict, fmt: str) -> str:
    """Render a summary (or single report) grid: algorithm rows, protocol
    columns, required difference as the final row."""
    if summary.get("kind") == "experiment_report":
        report = ExperimentReport.from_json(summary)
        summary = summarize([report])
    if summary.get("kind") != "experiment_summary":
        raise ValueError("not a report or summary document")
    algorithms = summary["algorithms"]
    protocols = summary["protocols"]
    rows = []
    order = sorted(
        algorithms,
        key=lambda a: -summary["aggregate"][protocols[0]][a],
    )
    if summary["metric"] == DEVIATION:
        order = sorted(algorithms, key=lambda a: summary["aggregate"][protocols[0]][a])
    for a in order:
        rows.append([a] + [_fmt(summary["aggregate"][p][a]) for p in protocols])
    rows.append(["RD"] + [_fmt(summary["required_difference"][p]) for p in protocols])

    header = ["Algorithm"] + list(protocols)
    if fmt == "csv":
        lines = [",".join(header)] + [",".join(r) for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "md":
        lines = ["| " + " | ".join(header) + " |"]
        lines.append("|" + "|".join(["---"] * len(header)) + "|")
        lines.extend("| " + " | ".join(r) + " |" for r in rows)
        return "\n".join(lines) + "\n"
    if fmt == "text":
        widths = [
            max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))
        ]
        def line(row):
            return "  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()
        sep = "-" * (sum(widths) + 2 * (len(widths) - 1))
        out = [line(header), sep]
        out.extend(line(r) for r in rows[:-1])
        out.append(sep)
        out.append(line(rows[-1]))
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown format {fmt!r}")
