"""Multinomial mixture over completed vote vectors.

Each user is a full assignment of every item to a state (a vote value or the
explicit no-vote state); a hidden class variable renders items independent.
Parameters are fit with EM against a smoothed (MAP-style) objective, and the
number of classes is chosen by an approximate marginal likelihood.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln, logsumexp

from .votedata import ActiveCase, ItemId, VoteDatabase, VoteScale

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ClusterModel:
    """Class priors plus per-class, per-item state distributions.

    `cond` has shape (classes, items, states) with state 0 the no-vote state;
    every distribution is strictly positive thanks to the smoothing prior.
    """

    scale: VoteScale
    items: tuple[ItemId, ...]
    class_prior: np.ndarray
    cond: np.ndarray

    def __post_init__(self) -> None:
        self.class_prior = np.asarray(self.class_prior, dtype=float)
        self.cond = np.asarray(self.cond, dtype=float)
        c, t, s = self.cond.shape
        if self.class_prior.shape != (c,):
            raise ValueError("class prior length must match conditional tensor")
        if t != len(self.items) or s != self.scale.num_states:
            raise ValueError("conditional tensor shape mismatch")
        if abs(self.class_prior.sum() - 1.0) > 1e-10:
            raise ValueError("class prior must sum to 1")
        sums = self.cond.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-10:
            raise ValueError("every conditional must sum to 1")
        if (self.class_prior <= 0).any() or (self.cond <= 0).any():
            raise ValueError("all probabilities must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.class_prior)

    def _item_pos(self) -> dict[ItemId, int]:
        if not hasattr(self, "_pos"):
            self._pos = {it: j for j, it in enumerate(self.items)}
        return self._pos

    def log_posterior(self, observed: Mapping[ItemId, float]) -> np.ndarray:
        """Unnormalized log class posterior for a completed vote vector."""
        pos = self._item_pos()
        logc = np.log(self.cond)
        score = np.log(self.class_prior) + logc[:, :, 0].sum(axis=1)
        for it, v in observed.items():
            j = pos.get(it)
            if j is None:
                continue  # items outside the model carry no evidence
            s = self.scale.state_of(v)
            score = score + logc[:, j, s] - logc[:, j, 0]
        return score

    def posterior(self, observed: Mapping[ItemId, float]) -> np.ndarray:
        score = self.log_posterior(observed)
        score = score - score.max()
        p = np.exp(score)
        return p / p.sum()

    def to_json(self) -> dict:
        return {
            "version": 1,
            "kind": "cluster_model",
            "scale": self.scale.to_json(),
            "items": list(self.items),
            "class_prior": self.class_prior.tolist(),
            "cond": self.cond.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ClusterModel":
        return cls(
            scale=VoteScale.from_json(obj["scale"]),
            items=tuple(obj["items"]),
            class_prior=np.asarray(obj["class_prior"]),
            cond=np.asarray(obj["cond"]),
        )


@dataclass
class ClusterPrediction:
    expected_vote: float
    distribution: np.ndarray  # over all states, no-vote mass included


@dataclass
class FitReport:
    """Trace of one EM fit. The objective is the smoothed (MAP) one, so the
    trace is non-decreasing up to round-off."""

    objective_trace: list[float]
    iterations: int
    converged: bool
    cs_score: float = float("nan")
    objective: str = "map"

    @property
    def log_likelihood(self) -> list[float]:
        return self.objective_trace


class _Encoded:
    """Sparse one-hot encoding of the observed vote states.

    Columns are (item, vote state) pairs; the no-vote state is implicit and
    recovered from class totals.
    """

    def __init__(self, db: VoteDatabase) -> None:
        scale = db.scale
        idx = db.index
        self.n = len(db.users)
        self.t = len(db.items)
        self.s_votes = scale.num_states - 1
        rows, cols = [], []
        for i, u in enumerate(db.users):
            for it, v in db.votes[u].items():
                state = scale.state_of(v)  # >= 1 for recorded votes
                rows.append(i)
                cols.append(idx.item_pos[it] * self.s_votes + (state - 1))
        self.X = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)),
            shape=(self.n, self.t * self.s_votes),
        )

    def loglik_matrix(self, class_prior: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Per-user, per-class joint log probability of the completed record."""
        logc = np.log(cond)
        base = logc[:, :, 0].sum(axis=1)  # all items at no-vote
        delta = (logc[:, :, 1:] - logc[:, :, :1]).reshape(len(class_prior), -1)
        return np.log(class_prior)[None, :] + base[None, :] + self.X @ delta.T

    def counts(self, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expected class totals and (classes, items, states) state counts."""
        c = gamma.shape[1]
        totals = gamma.sum(axis=0)
        vote_counts = np.asarray(self.X.T @ gamma).T.reshape(c, self.t, self.s_votes)
        counts = np.empty((c, self.t, self.s_votes + 1))
        counts[:, :, 1:] = vote_counts
        counts[:, :, 0] = totals[:, None] - vote_counts.sum(axis=2)
        return totals, np.clip(counts, 0.0, None)


def expected_counts(
    db: VoteDatabase, gamma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Class totals and per-class item-state counts for given responsibilities."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim != 2 or gamma.shape[0] != len(db.users):
        raise ValueError("responsibilities must be users by classes")
    return _Encoded(db).counts(gamma)


def map_estimates(
    class_totals: np.ndarray,
    state_counts: np.ndarray,
    prior_strength: float = 1.0,
    n_users: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed frequency estimates from (expected) complete-data counts.

    Each distribution gets a symmetric pseudo-count of `prior_strength`
    split over its states, which keeps every probability positive.
    """
    c, _, s = state_counts.shape
    n = float(class_totals.sum()) if n_users is None else float(n_users)
    prior = (class_totals + prior_strength / c) / (n + prior_strength)
    cond = (state_counts + prior_strength / s) / (
        class_totals[:, None, None] + prior_strength
    )
    return prior, cond


def _log_prior_term(
    class_prior: np.ndarray, cond: np.ndarray, prior_strength: float
) -> float:
    c, _, s = cond.shape
    a_pi = prior_strength / c
    a_s = prior_strength / s
    return float(a_pi * np.log(class_prior).sum() + a_s * np.log(cond).sum())


def _init_params(
    db: VoteDatabase, c: int, rng: np.random.Generator,
    prior_strength: float, noise_scale: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Near-uniform class priors; conditionals are data marginals jittered by
    seeded Dirichlet noise so classes start distinguishable."""
    enc = _Encoded(db)
    totals, counts = enc.counts(np.ones((enc.n, 1)))
    _, marginal = map_estimates(totals, counts, prior_strength, n_users=enc.n)
    marg = marginal[0]  # (items, states)
    cond = np.empty((c, enc.t, marg.shape[1]))
    for ci in range(c):
        for j in range(enc.t):
            draw = rng.dirichlet(np.maximum(noise_scale * marg[j], 1e-6))
            cond[ci, j] = np.maximum(draw, 1e-12)
    cond /= cond.sum(axis=2, keepdims=True)
    prior = np.maximum(rng.dirichlet(np.full(c, 10.0)), 1e-12)
    prior /= prior.sum()
    return prior, cond


def em_fit(
    db: VoteDatabase,
    num_classes: int,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 200,
    prior_strength: float = 1.0,
    noise_scale: float = 10.0,
    compute_cs: bool = True,
) -> tuple[ClusterModel, FitReport]:
    """Fit the mixture by EM to a local maximum of the smoothed objective.

    Stops when the per-user objective improves by less than `tol` (relative),
    or after `max_iter` iterations. Deterministic for a fixed seed.
    """
    if num_classes < 1:
        raise ValueError("need at least one class")
    if not db.users:
        raise ValueError("empty database")
    if num_classes > len(db.users):
        log.warning(
            "%d classes for %d users; some classes may collapse",
            num_classes, len(db.users),
        )
    enc = _Encoded(db)
    n = enc.n

    if num_classes == 1:
        # no hidden variable: the smoothed frequencies are the exact optimum
        totals, counts = enc.counts(np.ones((n, 1)))
        prior, cond = map_estimates(totals, counts, prior_strength, n_users=n)
        model = ClusterModel(db.scale, db.items, prior, cond)
        ll = float(logsumexp(enc.loglik_matrix(prior, cond), axis=1).sum())
        obj = ll + _log_prior_term(prior, cond, prior_strength)
        report = FitReport([obj], iterations=1, converged=True)
        if compute_cs:
            report.cs_score = cheeseman_stutz_score(model, db, prior_strength)
        return model, report

    rng = np.random.default_rng(seed)
    prior, cond = _init_params(db, num_classes, rng, prior_strength, noise_scale)
    trace: list[float] = []
    converged = False
    L = enc.loglik_matrix(prior, cond)
    prev = -np.inf
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        norm = logsumexp(L, axis=1)
        gamma = np.exp(L - norm[:, None])
        totals, counts = enc.counts(gamma)
        prior, cond = map_estimates(totals, counts, prior_strength, n_users=n)
        L = enc.loglik_matrix(prior, cond)
        obj = float(logsumexp(L, axis=1).sum()) + _log_prior_term(prior, cond, prior_strength)
        trace.append(obj)
        per_user = obj / n
        if (per_user - prev) < tol * max(1.0, abs(per_user)):
            converged = True
            break
        prev = per_user
    model = ClusterModel(db.scale, db.items, prior, cond)
    report = FitReport(trace, iterations=iterations, converged=converged)
    if compute_cs:
        report.cs_score = cheeseman_stutz_score(model, db, prior_strength)
    return model, report


def cluster_posterior(model: ClusterModel, case: ActiveCase) -> np.ndarray:
    """Class posterior given the case's observed votes (all other items no-vote)."""
    return model.posterior(case.observed)


def cluster_predict(
    model: ClusterModel, case: ActiveCase, item: ItemId
) -> ClusterPrediction:
    """Posterior-mixed state distribution for one item plus its expected vote.

    The expected vote drops the no-vote state and renormalizes over the vote
    values; the returned distribution keeps the no-vote mass for ranking.
    """
    if item in case.observed:
        raise ValueError(f"item {item!r} is observed in this case")
    pos = model._item_pos()
    j = pos.get(item)
    if j is None:
        raise ValueError(f"item {item!r} not covered by this model")
    post = model.posterior(case.observed)
    dist = post @ model.cond[:, j, :]
    return ClusterPrediction(
        expected_vote=_expected_from_distribution(dist, model.scale),
        distribution=dist,
    )


def _expected_from_distribution(dist: np.ndarray, scale: VoteScale) -> float:
    votes = np.asarray(scale.vote_values, dtype=float)
    mass = dist[1:]
    total = mass.sum()
    return float((mass / total) @ votes)


def _dirichlet_marginal(counts: np.ndarray, alpha: float) -> np.ndarray:
    """Log of the closed-form multinomial marginal with a symmetric prior.

    Works on the last axis; counts may be fractional (expected data).
    """
    s = counts.shape[-1]
    total_alpha = alpha * s
    return (
        gammaln(total_alpha)
        - gammaln(total_alpha + counts.sum(axis=-1))
        + (gammaln(alpha + counts) - gammaln(alpha)).sum(axis=-1)
    )


def cheeseman_stutz_score(
    model: ClusterModel, db: VoteDatabase, prior_strength: float = 1.0
) -> float:
    """Approximate log marginal likelihood of the data under the model structure.

    Uses the expected complete data at the fitted parameters: the exact
    complete-data marginal, corrected by the gap between observed- and
    complete-data likelihood at those parameters. Class labels are
    interchangeable, so the marginal holds one identical mode per relabeling;
    the single-mode estimate is scaled up by C! to cover them all.
    """
    if tuple(model.items) != tuple(db.items):
        raise ValueError("model and database cover different items")
    enc = _Encoded(db)
    c = model.num_classes
    s = model.cond.shape[2]
    L = enc.loglik_matrix(model.class_prior, model.cond)
    norm = logsumexp(L, axis=1)
    observed_ll = float(norm.sum())
    gamma = np.exp(L - norm[:, None])
    totals, counts = enc.counts(gamma)

    complete_marginal = float(
        _dirichlet_marginal(totals[None, :], prior_strength / c)[0]
        + _dirichlet_marginal(counts, prior_strength / s).sum()
    )
    complete_ll = float(
        totals @ np.log(model.class_prior) + (counts * np.log(model.cond)).sum()
    )
    return complete_marginal - complete_ll + observed_ll + math.lgamma(c + 1)


def select_cluster_model(
    db: VoteDatabase,
    max_classes: int,
    seed: int = 0,
    restarts: int = 3,
    tol: float = 1e-6,
    max_iter: int = 200,
    prior_strength: float = 1.0,
    noise_scale: float = 10.0,
) -> tuple[ClusterModel, list[dict]]:
    """Fit 1..max_classes classes (several restarts each) and keep the best score.

    Returns the winning model plus the per-class-count score table. Ties go
    to the smaller model.
    """
    if max_classes < 1:
        raise ValueError("max_classes must be >= 1")
    table: list[dict] = []
    best_model = None
    best_score = -np.inf
    for c in range(1, max_classes + 1):
        best_fit = None
        for r in range(max(1, restarts)):
            sub_seed = int(np.random.SeedSequence([seed, c, r]).generate_state(1)[0])
            model, report = em_fit(
                db, c, seed=sub_seed,
                tol=tol, max_iter=max_iter, prior_strength=prior_strength,
                noise_scale=noise_scale, compute_cs=False,
            )
            obj = report.objective_trace[-1]
            if best_fit is None or obj > best_fit[2]:
                best_fit = (model, report, obj)
        model, report, obj = best_fit
        cs = cheeseman_stutz_score(model, db, prior_strength)
        report.cs_score = cs
        table.append({
            "classes": c,
            "cs_score": cs,
            "objective": obj,
            "converged": report.converged,
            "iterations": report.iterations,
        })
        if cs > best_score:
            best_score = cs
            best_model = model
    return best_model, table
