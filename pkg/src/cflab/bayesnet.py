"""Per-item decision-tree conditional models with greedy Bayesian structure search.

Every item gets a decision tree over the other items' states (a vote value or
the explicit no-vote state). Search starts from root-only trees and greedily
applies the single best-scoring leaf split anywhere in the model, subject to
the parent graph staying acyclic, until no split improves the score. The
score of a leaf is the closed-form marginal likelihood of its counts under
pseudo-counts derived from a uniform prior network, plus a per-free-parameter
structure penalty.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import gammaln

from .votedata import ActiveCase, ItemId, VoteDatabase, VoteScale

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LearnConfig:
    """Search settings.

    `structure_penalty` is the prior probability charged per free parameter
    (each extra leaf of an r-state target adds r - 1 of them);
    `equivalent_sample_size` sets the strength of the uniform prior network
    that the leaf pseudo-counts are drawn from.
    """

    structure_penalty: float = 0.1
    equivalent_sample_size: float = 10.0
    max_parents: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.structure_penalty < 1.0):
            raise ValueError("structure_penalty must be in (0, 1)")
        if self.equivalent_sample_size <= 0:
            raise ValueError("equivalent_sample_size must be > 0")
        if self.max_parents is not None and self.max_parents < 1:
            raise ValueError("max_parents must be >= 1 when set")


def leaf_family_score(
    counts, prior_counts, structure_penalty: float = 1.0
) -> float:
    """Log marginal likelihood of one leaf's counts plus its structure penalty.

    The marginal is the closed-form integral of the multinomial likelihood
    against the leaf's pseudo-count prior; the penalty charges
    ln(structure_penalty) per free parameter (states - 1).
    """
    n = np.asarray(counts, dtype=float)
    a = np.asarray(prior_counts, dtype=float)
    if n.shape != a.shape:
        raise ValueError("counts and prior counts must align")
    if (a <= 0).any():
        raise ValueError("prior counts must be positive")
    if (n < 0).any():
        raise ValueError("counts must be nonnegative")
    r = len(n)
    marginal = (
        gammaln(a.sum())
        - gammaln(a.sum() + n.sum())
        + (gammaln(a + n) - gammaln(a)).sum()
    )
    return float(marginal + (r - 1) * math.log(structure_penalty))


@dataclass(eq=False)
class Leaf:
    counts: np.ndarray
    alpha: np.ndarray
    order: int

    @property
    def distribution(self) -> np.ndarray:
        total = self.counts + self.alpha
        return total / total.sum()


@dataclass(eq=False)
class Split:
    var: ItemId
    children: list


@dataclass(eq=False)
class DecisionTreeCPD:
    """A decision tree over other items' states ending in target distributions."""

    target: ItemId
    root: object  # Leaf or Split

    def leaves(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                yield node
            else:
                stack.extend(reversed(node.children))

    def split_vars(self) -> set[ItemId]:
        out: set[ItemId] = set()
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Split):
                out.add(node.var)
                stack.extend(node.children)
        return out

    def lookup_with_path(
        self, state_fn: Callable[[ItemId], int]
    ) -> tuple[Leaf, list[ItemId]]:
        node = self.root
        path: list[ItemId] = []
        while isinstance(node, Split):
            path.append(node.var)
            node = node.children[state_fn(node.var)]
        return node, path


class EvidenceError(ValueError):
    """Evidence omitted a state assignment needed to route a tree."""


@dataclass(eq=False)
class BayesNetModel:
    scale: VoteScale
    items: tuple[ItemId, ...]
    cpds: dict[ItemId, DecisionTreeCPD]

    def __post_init__(self) -> None:
        if set(self.cpds) != set(self.items):
            raise ValueError("every item needs exactly one tree")
        graph = self.parent_graph()
        if _has_cycle(graph):
            raise ValueError("parent graph must be acyclic")

    def parent_graph(self) -> dict[ItemId, set[ItemId]]:
        """Edges parent -> children implied by the split variables."""
        edges: dict[ItemId, set[ItemId]] = {it: set() for it in self.items}
        for it, cpd in self.cpds.items():
            for parent in cpd.split_vars():
                edges[parent].add(it)
        return edges

    def parents(self, item: ItemId) -> set[ItemId]:
        return self.cpds[item].split_vars()

    def structure_stats(self) -> dict:
        """Learned-structure summary: parent and leaf counts per item."""
        parent_counts = [len(self.parents(it)) for it in self.items]
        leaf_counts = [sum(1 for _ in self.cpds[it].leaves()) for it in self.items]
        return {
            "items": len(self.items),
            "mean_parents": float(np.mean(parent_counts)),
            "max_parents": int(max(parent_counts)),
            "mean_leaves": float(np.mean(leaf_counts)),
            "max_leaves": int(max(leaf_counts)),
        }

    def to_json(self) -> dict:
        return {
            "version": 1,
            "kind": "bayesnet_model",
            "scale": self.scale.to_json(),
            "items": list(self.items),
            "trees": {str(i): _node_to_json(self.cpds[it].root) for i, it in enumerate(self.items)},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "BayesNetModel":
        items = tuple(obj["items"])
        cpds = {}
        for i, it in enumerate(items):
            cpds[it] = DecisionTreeCPD(target=it, root=_node_from_json(obj["trees"][str(i)], items))
        return cls(scale=VoteScale.from_json(obj["scale"]), items=items, cpds=cpds)


def _node_to_json(node) -> dict:
    if isinstance(node, Leaf):
        return {
            "counts": node.counts.tolist(),
            "alpha": node.alpha.tolist(),
            "order": node.order,
        }
    return {
        "split": node.var,
        "children": [_node_to_json(c) for c in node.children],
    }


def _node_from_json(obj: Mapping, items: tuple):
    if "split" in obj:
        var = obj["split"]
        # JSON stringifies non-string keys elsewhere, but split vars are stored
        # as values so their type survives the round trip
        return Split(var=var, children=[_node_from_json(c, items) for c in obj["children"]])
    return Leaf(
        counts=np.asarray(obj["counts"], dtype=float),
        alpha=np.asarray(obj["alpha"], dtype=float),
        order=int(obj["order"]),
    )


def _has_cycle(edges: dict) -> bool:
    color: dict = {}

    def visit(u) -> bool:
        color[u] = 1
        for v in edges.get(u, ()):  # gray node reached again: cycle
            c = color.get(v, 0)
            if c == 1:
                return True
            if c == 0 and visit(v):
                return True
        color[u] = 2
        return False

    return any(color.get(u, 0) == 0 and visit(u) for u in edges)


# --- learning ---------------------------------------------------------------


class _LiveLeaf:
    """Mutable leaf bookkeeping during search."""

    __slots__ = ("target", "node", "parent", "slot", "users", "path", "score", "alive")

    def __init__(self, target: int, node: Leaf, parent, slot, users, path, score):
        self.target = target
        self.node = node
        self.parent = parent  # owning Split, or None for the tree root
        self.slot = slot
        self.users = users
        self.path = path  # frozenset of split-variable indices above this leaf
        self.score = score
        self.alive = True


def _pair_counts(states: np.ndarray, users: np.ndarray, t: int, r: int) -> np.ndarray:
    """Contingency tables of every candidate variable against the target.

    Returns (items, r, r): counts[s, a, b] is the number of `users` whose
    item s is in state a while the target item t is in state b.
    """
    sub = states[users]
    codes = sub.astype(np.int64) * r + sub[:, t][:, None]
    offs = np.arange(sub.shape[1], dtype=np.int64) * (r * r)
    flat = (codes + offs[None, :]).ravel()
    return np.bincount(flat, minlength=sub.shape[1] * r * r).reshape(sub.shape[1], r, r)


def _family_scores(tables: np.ndarray, alpha_child: float, penalty: float) -> np.ndarray:
    """Score of splitting a leaf on each candidate variable, vectorized.

    `tables` is (items, r_parent, r_target); each row of a table is one child
    leaf's counts under pseudo-counts alpha_child per state.
    """
    r = tables.shape[2]
    total_a = alpha_child * r
    child = (
        gammaln(total_a)
        - gammaln(total_a + tables.sum(axis=2))
        + (gammaln(alpha_child + tables) - gammaln(alpha_child)).sum(axis=2)
        + (r - 1) * math.log(penalty)
    )
    return child.sum(axis=1)


def learn_network(db: VoteDatabase, cfg: LearnConfig) -> BayesNetModel:
    """Greedy global search over leaf splits, best improvement first.

    Deterministic: ties between equal score gains break on (target item id,
    leaf creation order, split variable id). Acyclicity of the parent graph
    and monotonicity of the total score are asserted after every accepted
    split.
    """
    if not db.users:
        raise ValueError("empty database")
    idx = db.index
    scale = db.scale
    n, t = len(db.users), len(db.items)
    r = scale.num_states
    penalty = cfg.structure_penalty
    ess = cfg.equivalent_sample_size

    states = np.zeros((n, t), dtype=np.uint8)
    for i, u in enumerate(db.users):
        for it, v in db.votes[u].items():
            states[i, idx.item_pos[it]] = scale.state_of(v)

    id_rank = idx.item_sort_rank
    edges: dict[int, set[int]] = {j: set() for j in range(t)}
    parents: dict[int, set[int]] = {j: set() for j in range(t)}
    roots: list[object] = []
    leaf_orders = [0] * t
    total_score = 0.0
    heap: list = []
    seq = 0

    def reachable_from(start: int) -> set[int]:
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in edges[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return seen

    def invalid_vars(target: int, path: frozenset) -> set[int]:
        bad = set(path)
        bad.add(target)
        bad |= reachable_from(target)  # an edge from any of these would close a cycle
        if cfg.max_parents is not None and len(parents[target]) >= cfg.max_parents:
            bad |= set(range(t)) - parents[target]
        return bad

    def best_candidate(leaf: _LiveLeaf):
        tables = _pair_counts(states, leaf.users, leaf.target, r)
        deltas = _family_scores(tables, float(leaf.node.alpha[0]) / r, penalty) - leaf.score
        for s in invalid_vars(leaf.target, leaf.path):
            deltas[s] = -np.inf
        if not np.isfinite(deltas).any():
            return None
        order = np.lexsort((id_rank, -deltas))
        s = int(order[0])
        if deltas[s] <= 0.0:
            return None
        return float(deltas[s]), s, tables[s]

    def push_candidate(leaf: _LiveLeaf):
        nonlocal seq
        cand = best_candidate(leaf)
        if cand is None:
            return
        delta, svar, _ = cand
        seq += 1
        heapq.heappush(
            heap,
            (-delta, int(id_rank[leaf.target]), leaf.node.order, int(id_rank[svar]), seq, leaf, svar),
        )

    all_users = np.arange(n)
    for j in range(t):
        counts = np.bincount(states[:, j], minlength=r).astype(float)
        alpha = np.full(r, ess / r)
        node = Leaf(counts=counts, alpha=alpha, order=0)
        leaf_orders[j] = 1
        roots.append(node)
        live = _LiveLeaf(
            target=j, node=node, parent=None, slot=None, users=all_users,
            path=frozenset(), score=leaf_family_score(counts, alpha, penalty),
        )
        total_score += live.score
        push_candidate(live)

    while heap:
        neg_delta, _, _, _, _, leaf, svar = heapq.heappop(heap)
        if not leaf.alive:
            continue
        if svar in invalid_vars(leaf.target, leaf.path):
            push_candidate(leaf)  # constraints tightened since scoring; rescore
            continue
        delta = -neg_delta
        j = leaf.target
        sub_states = states[leaf.users, svar]
        split = Split(var=idx.item_ids[svar], children=[])
        child_alpha = leaf.node.alpha / r
        new_live = []
        for state in range(r):
            users_a = leaf.users[sub_states == state]
            counts_a = np.bincount(states[users_a, j], minlength=r).astype(float)
            child = Leaf(counts=counts_a, alpha=child_alpha.copy(), order=leaf_orders[j])
            leaf_orders[j] += 1
            split.children.append(child)
            new_live.append(
                _LiveLeaf(
                    target=j, node=child, parent=split, slot=state, users=users_a,
                    path=leaf.path | {svar},
                    score=leaf_family_score(counts_a, child_alpha, penalty),
                )
            )
        if leaf.parent is None:
            roots[j] = split
        else:
            leaf.parent.children[leaf.slot] = split
        leaf.alive = False
        edges[svar].add(j)
        parents[j].add(svar)
        new_total = total_score + delta
        gain = sum(nl.score for nl in new_live) - leaf.score
        assert abs(gain - delta) < 1e-6, "accepted split must match its scored gain"
        assert new_total >= total_score, "total score must not decrease"
        assert not _has_cycle(edges), "parent graph must stay acyclic"
        total_score = new_total
        for nl in new_live:
            push_candidate(nl)

    cpds = {
        idx.item_ids[j]: DecisionTreeCPD(target=idx.item_ids[j], root=roots[j])
        for j in range(t)
    }
    return BayesNetModel(scale=scale, items=db.items, cpds=cpds)


# --- prediction --------------------------------------------------------------


def tree_lookup(
    model: BayesNetModel, item: ItemId, evidence: Mapping[ItemId, float | None]
) -> np.ndarray:
    """Route the evidence down the item's tree and return the leaf distribution.

    Evidence must assign a state (a vote value, or None for no-vote) to every
    split variable encountered; omitting one is a contract violation.
    """
    cpd = model.cpds.get(item)
    if cpd is None:
        raise ValueError(f"item {item!r} not covered by this model")
    missing = [v for v in cpd.split_vars() if v not in evidence]
    if missing:
        raise EvidenceError(f"evidence missing split variable(s) {missing!r}")
    leaf, _ = cpd.lookup_with_path(lambda var: model.scale.state_of(evidence[var]))
    return leaf.distribution


def _case_lookup(
    model: BayesNetModel, case: ActiveCase, item: ItemId
) -> tuple[np.ndarray, bool]:
    """Leaf distribution for a case (unobserved items enter as no-vote) plus
    whether any observed vote actually steered the path."""
    cpd = model.cpds[item]
    observed = case.observed

    def state_fn(var: ItemId) -> int:
        v = observed.get(var)
        return model.scale.state_of(v) if v is not None else 0

    leaf, path = cpd.lookup_with_path(state_fn)
    influenced = any(var in observed for var in path)
    return leaf.distribution, influenced


def bn_expected_vote(model: BayesNetModel, case: ActiveCase, item: ItemId) -> float:
    """Expected vote after clamping the no-vote mass to zero and renormalizing."""
    if item in case.observed:
        raise ValueError(f"item {item!r} is observed in this case")
    dist, _ = _case_lookup(model, case, item)
    votes = np.asarray(model.scale.vote_values, dtype=float)
    mass = dist[1:]
    return float((mass / mass.sum()) @ votes)


def rank_score(dist: np.ndarray, scale: VoteScale) -> float:
    """Ranking score of one item's state distribution.

    Implicit scales rank by the probability of the single vote state;
    otherwise by expected vote weighted by the probability of voting at all.
    """
    if scale.implicit:
        return float(dist[1])
    votes = np.asarray(scale.vote_values, dtype=float)
    mass = dist[1:]
    p_vote = float(mass.sum())
    return float((mass / p_vote) @ votes) * p_vote


def bn_rank(
    model: BayesNetModel, case: ActiveCase, stats: dict | None = None
) -> list[ItemId]:
    """Unobserved model items ranked by their lookup score, ties to lower id."""
    scored = []
    for it in model.items:
        if it in case.observed:
            continue
        dist, influenced = _case_lookup(model, case, it)
        if stats is not None:
            stats["lookups"] = stats.get("lookups", 0) + 1
            if influenced:
                stats["influenced"] = stats.get("influenced", 0) + 1
        scored.append((-rank_score(dist, model.scale), it))
    scored.sort()
    return [it for _, it in scored]
