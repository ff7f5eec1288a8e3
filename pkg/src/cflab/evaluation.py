"""Scoring metrics, the blocked experiment runner, and significance statistics."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Protocol as TypingProtocol, Sequence

import numpy as np
from scipy import stats as sstats

from .votedata import ActiveCase, ItemId, VoteDatabase

log = logging.getLogger(__name__)

RANKED = "ranked"
DEVIATION = "deviation"
METRICS = (RANKED, DEVIATION)


@dataclass(frozen=True)
class RankedScoringConfig:
    """Half-life ranked utility parameters.

    `half_life` is the list position with a 50 percent chance of being
    viewed; `neutral` is the vote value worth nothing to the user.
    """

    half_life: float = 5.0
    neutral: float = 0.0

    def __post_init__(self) -> None:
        if self.half_life <= 1:
            raise ValueError("half_life must be > 1")


def _decay(rank: int, half_life: float) -> float:
    return 2.0 ** ((rank - 1) / (half_life - 1))


def ranked_utility(
    ranked: Sequence[ItemId], actual: Mapping[ItemId, float], cfg: RankedScoringConfig
) -> float:
    """Expected utility of a ranked list under exponentially decaying view odds.

    Each voted item at 1-based rank j contributes max(vote - neutral, 0)
    divided by 2^((j - 1) / (half_life - 1)); unvoted items contribute
    nothing, exactly as if they held the neutral vote.
    """
    total = 0.0
    for pos, item in enumerate(ranked, start=1):
        v = actual.get(item)
        if v is None:
            continue
        gain = max(v - cfg.neutral, 0.0)
        if gain > 0:
            total += gain / _decay(pos, cfg.half_life)
    return total


def max_ranked_utility(actual: Mapping[ItemId, float], cfg: RankedScoringConfig) -> float:
    """Utility of the ideal list: the user's voted items first, best vote first."""
    gains = sorted((max(v - cfg.neutral, 0.0) for v in actual.values()), reverse=True)
    return sum(g / _decay(pos, cfg.half_life) for pos, g in enumerate(gains, start=1) if g > 0)


def normalized_ranked_score(
    utilities: Sequence[float], maxima: Sequence[float]
) -> float:
    """100 * sum(utilities) / sum(maxima), skipping cases with no achievable utility."""
    if len(utilities) != len(maxima):
        raise ValueError("utilities and maxima must align")
    pairs = [(u, m) for u, m in zip(utilities, maxima) if m > 0]
    if not pairs:
        raise ValueError("every case has zero maximum utility")
    return 100.0 * sum(u for u, _ in pairs) / sum(m for _, m in pairs)


def absolute_deviation(
    predictions: Mapping[ItemId, float], actual: Mapping[ItemId, float]
) -> float:
    """Mean absolute error of predicted votes over the target items."""
    if not actual:
        raise ValueError("no target votes to score")
    try:
        return sum(abs(predictions[it] - v) for it, v in actual.items()) / len(actual)
    except KeyError as exc:
        raise ValueError(f"missing prediction for target item {exc.args[0]!r}") from None


def bonferroni_required_difference(
    scores: np.ndarray, confidence: float = 0.90
) -> float:
    """Minimum significant gap between two algorithm means.

    `scores` is cases (blocks) by algorithms. A two-way blocked ANOVA gives
    the residual mean square; the threshold is the two-sided Student-t
    quantile at the pairwise-corrected level times sqrt(2 * MSE / blocks).
    """
    x = np.asarray(scores, dtype=float)
    if x.ndim != 2:
        raise ValueError("scores must be a 2-d cases-by-algorithms array")
    b, m = x.shape
    if m < 2 or b < 2:
        raise ValueError("need at least 2 algorithms and 2 cases")
    if not (0.0 < confidence < 1.0):
        raise ValueError("confidence must be in (0, 1)")
    grand = x.mean()
    resid = x - x.mean(axis=1, keepdims=True) - x.mean(axis=0, keepdims=True) + grand
    df = (m - 1) * (b - 1)
    mse = float((resid**2).sum()) / df
    if mse <= 0.0:
        return 0.0
    n_pairs = m * (m - 1) / 2
    alpha_pair = (1.0 - confidence) / n_pairs
    t = float(sstats.t.ppf(1.0 - alpha_pair / 2.0, df))
    return t * float(np.sqrt(2.0 * mse / b))


class RankingPredictor(TypingProtocol):
    name: str

    def rank(self, case: ActiveCase) -> list[ItemId]: ...

    def predict(self, case: ActiveCase, item: ItemId) -> float: ...


@dataclass
class ExperimentReport:
    """Per-case scores for every algorithm on one protocol and metric.

    Every algorithm row covers exactly the same case set, so per-case scores
    form the blocks of the significance analysis. `scores` holds the raw
    per-case score (ranked utility or mean absolute deviation); for ranked
    scoring `rmax` holds each case's maximum achievable utility.
    """

    protocol: str
    metric: str
    algorithms: list[str]
    case_ids: list
    scores: dict[str, list[float]]
    aggregate: dict[str, float]
    required_difference: float | None
    rmax: list[float] | None
    excluded: dict[str, list]
    confidence: float
    seed: int | None
    half_life: float | None
    neutral: float | None
    timing: dict[str, float] = field(default_factory=dict)
    extras: dict[str, dict] = field(default_factory=dict)

    @property
    def case_count(self) -> int:
        return len(self.case_ids)

    def block_matrix(self) -> np.ndarray:
        """Cases-by-algorithms matrix used for the required-difference statistic.

        Ranked scores are put on the 0..100 scale per case (100 * utility /
        maximum) so the threshold is commensurate with the aggregate score.
        """
        cols = []
        for name in self.algorithms:
            col = np.asarray(self.scores[name], dtype=float)
            if self.metric == RANKED:
                col = 100.0 * col / np.asarray(self.rmax, dtype=float)
            cols.append(col)
        return np.column_stack(cols)

    def recompute_aggregate(self, name: str) -> float:
        col = self.scores[name]
        if self.metric == RANKED:
            return normalized_ranked_score(col, self.rmax)
        return float(np.mean(col))

    def to_json(self) -> dict:
        # timings are deliberately left out: report bytes must be identical
        # across reruns of the same configuration
        return {
            "version": 1,
            "kind": "experiment_report",
            "protocol": self.protocol,
            "metric": self.metric,
            "algorithms": list(self.algorithms),
            "case_count": self.case_count,
            "case_ids": list(self.case_ids),
            "scores": {k: list(map(float, v)) for k, v in self.scores.items()},
            "aggregate": {k: float(v) for k, v in self.aggregate.items()},
            "required_difference": self.required_difference,
            "rmax": None if self.rmax is None else list(map(float, self.rmax)),
            "excluded": self.excluded,
            "confidence": self.confidence,
            "seed": self.seed,
            "half_life": self.half_life,
            "neutral": self.neutral,
            "extras": self.extras,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, obj: Mapping) -> "ExperimentReport":
        return cls(
            protocol=obj["protocol"],
            metric=obj["metric"],
            algorithms=list(obj["algorithms"]),
            case_ids=list(obj["case_ids"]),
            scores={k: list(v) for k, v in obj["scores"].items()},
            aggregate=dict(obj["aggregate"]),
            required_difference=obj["required_difference"],
            rmax=None if obj.get("rmax") is None else list(obj["rmax"]),
            excluded={k: list(v) for k, v in obj.get("excluded", {}).items()},
            confidence=obj.get("confidence", 0.90),
            seed=obj.get("seed"),
            half_life=obj.get("half_life"),
            neutral=obj.get("neutral"),
            extras=dict(obj.get("extras", {})),
        )


def run_experiment(
    train: VoteDatabase,
    cases: Sequence[ActiveCase],
    algorithms: Sequence[RankingPredictor],
    metric: str,
    ranked_cfg: RankedScoringConfig | None = None,
    confidence: float = 0.90,
    seed: int | None = None,
    protocol_label: str = "custom",
    jobs: int = 1,
) -> ExperimentReport:
    """Score every algorithm on every case under a randomized block design.

    All algorithms see identical observed votes per case. A case where any
    algorithm fails, or (for ranked scoring) with zero maximum utility, is
    dropped for all algorithms so the blocks stay complete. `jobs` only
    controls threading of the per-case scoring; results are reduced in case
    order and do not depend on it.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if not algorithms:
        raise ValueError("need at least one algorithm")
    if not cases:
        raise ValueError("need at least one case")
    names = [a.name for a in algorithms]
    if len(set(names)) != len(names):
        raise ValueError("algorithm names must be unique")
    if ranked_cfg is None:
        ranked_cfg = RankedScoringConfig(half_life=5.0, neutral=float(train.scale.neutral))

    timing = {n: 0.0 for n in names}
    kept_ids: list = []
    kept_scores: dict[str, list[float]] = {n: [] for n in names}
    kept_rmax: list[float] = []
    excluded: dict[str, list] = {"zero_max_utility": [], "failed": []}
    stats_before = {
        a.name: dict(getattr(a, "stats", {}) or {}) for a in algorithms
    }

    def score_case(case: ActiveCase):
        times = {n: 0.0 for n in names}
        if metric == RANKED:
            rmax = max_ranked_utility(case.targets, ranked_cfg)
            if rmax <= 0:
                return ("zero_max", None, None, times)
            row = {}
            for alg in algorithms:
                t0 = time.perf_counter()
                try:
                    ranked = alg.rank(case)
                    row[alg.name] = ranked_utility(ranked, case.targets, ranked_cfg)
                except Exception:
                    log.exception("algorithm %s failed on case %r", alg.name, case.user)
                    return ("failed", None, None, times)
                finally:
                    times[alg.name] += time.perf_counter() - t0
            return ("ok", row, rmax, times)
        row = {}
        for alg in algorithms:
            t0 = time.perf_counter()
            try:
                preds = {it: alg.predict(case, it) for it in case.targets}
                row[alg.name] = absolute_deviation(preds, case.targets)
            except Exception:
                log.exception("algorithm %s failed on case %r", alg.name, case.user)
                return ("failed", None, None, times)
            finally:
                times[alg.name] += time.perf_counter() - t0
        return ("ok", row, None, times)

    if jobs and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score_case, cases))
    else:
        results = [score_case(c) for c in cases]

    for case, (status, row, rmax, times) in zip(cases, results):
        for n in names:
            timing[n] += times[n]
        if status == "zero_max":
            excluded["zero_max_utility"].append(case.user)
            continue
        if status == "failed":
            excluded["failed"].append(case.user)
            continue
        kept_ids.append(case.user)
        for n in names:
            kept_scores[n].append(row[n])
        if metric == RANKED:
            kept_rmax.append(rmax)

    if not kept_ids:
        raise ValueError("every case was excluded; nothing to score")

    if metric == RANKED:
        aggregate = {n: normalized_ranked_score(kept_scores[n], kept_rmax) for n in names}
    else:
        aggregate = {n: float(np.mean(kept_scores[n])) for n in names}

    report = ExperimentReport(
        protocol=protocol_label,
        metric=metric,
        algorithms=names,
        case_ids=kept_ids,
        scores=kept_scores,
        aggregate=aggregate,
        required_difference=None,
        rmax=kept_rmax if metric == RANKED else None,
        excluded=excluded,
        confidence=confidence,
        seed=seed,
        half_life=ranked_cfg.half_life if metric == RANKED else None,
        neutral=ranked_cfg.neutral if metric == RANKED else None,
        timing=timing,
    )
    for alg in algorithms:
        stats = getattr(alg, "stats", None)
        if stats:
            before = stats_before.get(alg.name, {})
            report.extras[alg.name] = {
                k: (v - before.get(k, 0) if isinstance(v, (int, float)) else v)
                for k, v in stats.items()
            }
    if len(names) >= 2 and len(kept_ids) >= 2:
        report.required_difference = float(
            bonferroni_required_difference(report.block_matrix(), confidence)
        )
    return report
