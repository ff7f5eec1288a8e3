import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cflab.memory import (
    DefaultVoting,
    MemoryConfig,
    MemoryScorer,
    case_amplify,
    correlation_weight,
    inverse_user_frequency,
    popularity_rank,
    predict_vote,
    rank_items,
    vector_similarity_weight,
)
from cflab.votedata import IMPLICIT_SCALE

from conftest import case_for, make_db, random_explicit_db, random_implicit_db
from reference import brute_predict

CORR = MemoryConfig(weight_kind="correlation")
VSIM = MemoryConfig(weight_kind="vector_similarity")


class TestCorrelationWeight:
    def test_cross_terms_cancel(self):
        # intersection means 3 and 8/3 make the deviations orthogonal
        db = make_db([("i", "j1", 2), ("i", "j2", 2), ("i", "j3", 4)])
        case = case_for("a", {"j1": 1, "j2": 5, "j3": 3})
        assert correlation_weight(case, "i", db, CORR) == pytest.approx(0.0, abs=1e-12)

    def test_identical_vectors_give_one(self):
        db = make_db([("i", "j1", 1), ("i", "j2", 5), ("i", "j3", 3)])
        case = case_for("a", {"j1": 1, "j2": 5, "j3": 3})
        assert correlation_weight(case, "i", db, CORR) == pytest.approx(1.0)

    def test_constant_neighbor_gets_zero(self):
        db = make_db([("i", "j1", 2), ("i", "j2", 2), ("i", "j3", 2)])
        case = case_for("a", {"j1": 1, "j2": 5, "j3": 3})
        assert correlation_weight(case, "i", db, CORR) == 0.0

    def test_insufficient_overlap_is_no_match(self):
        db = make_db([("i", "j1", 2), ("i", "j9", 4)])
        case = case_for("a", {"j1": 1, "j2": 5})
        assert correlation_weight(case, "i", db, CORR) is None

    def test_default_voting_needs_single_match(self):
        cfg = MemoryConfig(weight_kind="correlation", default_voting=DefaultVoting(d=0.0, k=0))
        db = make_db(
            [("i", "x", 1), ("i", "y", 1), ("z", "w", 1), ("z", "x", 1)],
            scale=IMPLICIT_SCALE,
        )
        # "q" is not a database item; the comparison runs over db items only
        case = case_for("a", {"x": 1.0, "q": 1.0})
        w = correlation_weight(case, "i", db, cfg)
        assert w is not None

    def test_symmetry_on_random_databases(self):
        rng = np.random.default_rng(7)
        for trial in range(20):
            db = random_explicit_db(rng, n_users=6, n_items=6, density=0.7)
            users = list(db.users)
            for a in users:
                for b in users:
                    if a == b:
                        continue
                    ca = case_for(a, db.votes[a])
                    cb = case_for(b, db.votes[b])
                    w_ab = correlation_weight(ca, b, db, CORR)
                    w_ba = correlation_weight(cb, a, db, CORR)
                    if w_ab is None:
                        assert w_ba is None
                    else:
                        assert w_ab == pytest.approx(w_ba, abs=1e-12)

    def test_weight_bounded_by_one(self):
        rng = np.random.default_rng(11)
        for trial in range(30):
            db = random_explicit_db(rng, n_users=8, n_items=6, density=0.8)
            a, b = db.users[0], db.users[1]
            case = case_for(a, db.votes[a])
            w = correlation_weight(case, b, db, CORR)
            if w is not None:
                assert -1.0 <= w <= 1.0

    def test_binary_data_needs_default_voting(self):
        # all implicit votes are identical, so plain correlation has no variance,
        # but completing the vectors with zeros makes overlapping pairs comparable
        rng = np.random.default_rng(3)
        db = random_implicit_db(rng, n_users=8, n_items=8, density=0.5)
        dv = MemoryConfig(weight_kind="correlation", default_voting=DefaultVoting(d=0.0, k=0))
        a = db.users[0]
        case = case_for(a, db.votes[a])
        for b in db.users[1:]:
            plain = correlation_weight(case, b, db, CORR)
            assert plain is None or plain == 0.0
            set_a, set_b = set(db.votes[a]), set(db.votes[b])
            if set_a & set_b:
                extended = correlation_weight(case, b, db, dv)
                assert extended is not None
                if not (set_a <= set_b or set_b <= set_a):
                    # both users then vary over the union, so the weight is live
                    assert extended != 0.0


class TestVectorSimilarity:
    def test_identical_implicit_vectors(self):
        db = make_db([("i", "x", 1), ("i", "y", 1)], scale=IMPLICIT_SCALE)
        case = case_for("a", {"x": 1.0, "y": 1.0})
        assert vector_similarity_weight(case, "i", db, VSIM) == pytest.approx(1.0)

    def test_half_overlap_gives_half(self):
        db = make_db(
            [("i", "y", 1), ("i", "z", 1), ("other", "x", 1)], scale=IMPLICIT_SCALE
        )
        case = case_for("a", {"x": 1.0, "y": 1.0})
        assert vector_similarity_weight(case, "i", db, VSIM) == pytest.approx(0.5)

    def test_disjoint_sets_give_zero(self):
        db = make_db([("i", "p", 1), ("i", "q", 1)], scale=IMPLICIT_SCALE)
        case = case_for("a", {"x": 1.0, "y": 1.0})
        assert vector_similarity_weight(case, "i", db, VSIM) == 0.0

    def test_all_factors_zero_gives_zero(self):
        # both users voted the universally-voted item only: its factor is 0
        db = make_db([("i", "x", 1), ("z", "x", 1)], scale=IMPLICIT_SCALE)
        cfg = MemoryConfig(weight_kind="vector_similarity", inverse_user_frequency=True)
        case = case_for("i", {"x": 1.0})
        assert vector_similarity_weight(case, "z", db, cfg) == 0.0

    def test_bounds_on_random_databases(self):
        rng = np.random.default_rng(23)
        for trial in range(30):
            db = random_implicit_db(rng, n_users=8, n_items=7)
            a, b = db.users[0], db.users[1]
            case = case_for(a, db.votes[a])
            w = vector_similarity_weight(case, b, db, VSIM)
            assert 0.0 <= w <= 1.0

    def test_frequency_scaling_leaves_cosine_unchanged(self):
        # scaling every factor by a positive constant cancels in the norms
        rng = np.random.default_rng(5)
        db = random_explicit_db(rng, n_users=6, n_items=6, density=0.9)
        a, b = db.users[0], db.users[1]
        case = case_for(a, db.votes[a])
        base = vector_similarity_weight(case, b, db, VSIM)
        f = {it: 3.7 for it in db.items}
        pairs = [(db.votes[a].get(it, 0.0) * f[it], db.votes[b].get(it, 0.0) * f[it]) for it in db.items]
        na = math.sqrt(sum(x * x for x, _ in pairs))
        nb = math.sqrt(sum(y * y for _, y in pairs))
        scaled = sum(x * y for x, y in pairs) / (na * nb)
        assert scaled == pytest.approx(base, abs=1e-12)


class TestInverseUserFrequency:
    def test_universal_item_scores_zero(self):
        db = make_db([("u", "a", 1), ("u", "b", 1), ("v", "a", 1)], scale=IMPLICIT_SCALE)
        assert inverse_user_frequency(db, "a") == pytest.approx(0.0)

    def test_log_ratio(self):
        rows = [(f"u{i}", "common", 1) for i in range(100)]
        rows += [(f"u{i}", "rare", 1) for i in range(10)]
        db = make_db(rows, scale=IMPLICIT_SCALE)
        assert inverse_user_frequency(db, "rare") == pytest.approx(math.log(10), abs=1e-9)

    def test_unvoted_item_is_domain_error(self):
        db = make_db([("u", "a", 1)], scale=IMPLICIT_SCALE, items=["a", "ghost"])
        with pytest.raises(ValueError):
            inverse_user_frequency(db, "ghost")


class TestCaseAmplify:
    def test_fixed_point(self):
        assert case_amplify(1.0, 2.5) == 1.0

    def test_positive_power(self):
        assert case_amplify(0.5, 2.5) == pytest.approx(0.1767767, abs=1e-7)

    def test_odd_symmetry(self):
        assert case_amplify(-0.5, 2.5) == pytest.approx(-0.1767767, abs=1e-7)

    @settings(max_examples=100, deadline=None)
    @given(
        w=st.floats(min_value=-1, max_value=1),
        p=st.floats(min_value=0.1, max_value=6.0),
    )
    def test_preserves_sign_and_bound(self, w, p):
        out = case_amplify(w, p)
        assert abs(out) <= 1.0 + 1e-12
        if w != 0:
            assert math.copysign(1, out) == math.copysign(1, w) or out == 0.0

    def test_preserves_ordering_of_magnitudes(self):
        rng = np.random.default_rng(0)
        w = rng.uniform(-1, 1, size=50)
        for p in (0.5, 1.0, 2.5, 4.0):
            amped = np.array([case_amplify(x, p) for x in w])
            assert (np.argsort(np.abs(w), kind="stable") == np.argsort(np.abs(amped), kind="stable")).all()


class TestPredictVote:
    def test_single_neighbor(self):
        db = make_db([("i", "j", 5), ("i", "a", 4), ("i", "b", 3)])
        # neighbor mean is 4; the active case correlates perfectly on (a, b)
        case = case_for("act", {"a": 5.0, "b": 4.0})
        w = correlation_weight(case, "i", db, CORR)
        assert w == pytest.approx(1.0)
        base = case.observed_mean
        out = predict_vote(case, "j", db, CORR)
        assert out.informed
        assert out.value == pytest.approx(min(5.0, base + (5.0 - 4.0)))

    def test_opposing_deviations_cancel(self):
        # two equally weighted neighbors deviate +1 and -1 on the target
        db = make_db(
            [
                ("n1", "a", 1), ("n1", "b", 5), ("n1", "j", 4),  # mean 10/3
                ("n2", "a", 1), ("n2", "b", 5), ("n2", "j", 2),  # mean 8/3
            ]
        )
        case = case_for("act", {"a": 1.0, "b": 5.0})
        w1 = correlation_weight(case, "n1", db, CORR)
        w2 = correlation_weight(case, "n2", db, CORR)
        assert w1 == pytest.approx(w2)
        dev1 = 4.0 - mean(db, "n1")
        dev2 = 2.0 - mean(db, "n2")
        expected = case.observed_mean + (w1 * dev1 + w2 * dev2) / (abs(w1) + abs(w2))
        out = predict_vote(case, "j", db, CORR)
        assert out.value == pytest.approx(expected, abs=1e-12)

    def test_uninformed_fallback(self):
        db = make_db([("i", "a", 2), ("i", "b", 4)])
        case = case_for("act", {"a": 2.0, "b": 4.0})
        out = predict_vote(case, "nowhere", db, CORR)
        assert not out.informed
        assert out.value == pytest.approx(3.0)

    def test_clamped_to_scale(self):
        db = make_db([("i", "a", 5), ("i", "b", 0), ("i", "j", 5)])
        case = case_for("act", {"a": 5.0, "b": 0.0})
        out = predict_vote(case, "j", db, CORR)
        assert 0.0 <= out.value <= 5.0


def mean(db, user):
    votes = db.votes[user]
    return sum(votes.values()) / len(votes)


class TestRankItems:
    def test_sorted_by_prediction(self, tiny_explicit_db):
        case = case_for("act", {"a": 1.0, "b": 5.0})
        ranked = rank_items(case, tiny_explicit_db, CORR)
        assert set(ranked) == {"c", "d"}

    def test_observed_items_excluded(self, tiny_explicit_db):
        case = case_for("act", {"a": 1.0, "b": 5.0})
        ranked = rank_items(case, tiny_explicit_db, CORR)
        assert "a" not in ranked and "b" not in ranked

    def test_ties_break_by_item_id(self):
        db = make_db([("u", "i9", 3), ("u", "i2", 3), ("u", "a", 1), ("x", "a", 2), ("x", "i2", 3)])
        case = case_for("act", {"a": 1.0})
        ranked = rank_items(case, db, CORR)
        # no informative neighbors: everything ties at the base, id order wins
        assert ranked == sorted(ranked)


class TestPopularityRank:
    def test_count_order(self):
        rows = [(f"u{i}", "i1", 1) for i in range(10)] + [("u0", "i2", 1), ("u1", "i2", 1), ("u2", "i2", 1)]
        db = make_db(rows, scale=IMPLICIT_SCALE)
        case = case_for("act", {"zz": 1.0})
        assert popularity_rank(db, case) == ["i1", "i2"]

    def test_observed_excluded_even_if_popular(self):
        rows = [(f"u{i}", "i1", 1) for i in range(10)] + [("u0", "i2", 1)]
        db = make_db(rows, scale=IMPLICIT_SCALE)
        case = case_for("act", {"i1": 1.0})
        assert popularity_rank(db, case) == ["i2"]

    def test_equal_counts_id_order(self):
        db = make_db([("u", "b", 1), ("u", "a", 1)], scale=IMPLICIT_SCALE)
        case = case_for("act", {"zz": 1.0})
        assert popularity_rank(db, case) == ["a", "b"]


def _configs_for(scale_implicit: bool):
    """Weight/extension combinations exercised against the brute-force oracle."""
    out = []
    for iuf in (False, True):
        for amp in (None, 2.5):
            out.append(MemoryConfig("correlation", None, iuf, amp))
            d = 0.0 if scale_implicit else 3.0
            out.append(MemoryConfig("correlation", DefaultVoting(d=d, k=7), iuf, amp))
            if scale_implicit:
                out.append(MemoryConfig("vector_similarity", DefaultVoting(d=0.0, k=0), iuf, amp))
            else:
                out.append(MemoryConfig("vector_similarity", None, iuf, amp))
    return out


class TestVectorizedAgainstBruteForce:
    def test_explicit_databases(self):
        rng = np.random.default_rng(101)
        for trial in range(25):
            db = random_explicit_db(rng, n_users=7, n_items=6, density=0.6)
            user = db.users[0]
            votes = dict(db.votes[user])
            observed = dict(list(votes.items())[: max(1, len(votes) - 1)])
            case = case_for("outside", observed)
            for cfg in _configs_for(False):
                scorer = MemoryScorer(db, cfg)
                values, informed = scorer.predict_all(case)
                for j, item in enumerate(db.items):
                    ref_val, ref_inf = brute_predict(case, item, db, cfg)
                    assert values[j] == pytest.approx(ref_val, abs=1e-9), (cfg, item)
                    assert bool(informed[j]) == ref_inf

    def test_implicit_databases(self):
        rng = np.random.default_rng(202)
        for trial in range(25):
            db = random_implicit_db(rng, n_users=7, n_items=6, density=0.5)
            user = db.users[0]
            case = case_for("outside", dict(db.votes[user]))
            for cfg in _configs_for(True):
                scorer = MemoryScorer(db, cfg)
                values, informed = scorer.predict_all(case)
                for j, item in enumerate(db.items):
                    ref_val, ref_inf = brute_predict(case, item, db, cfg)
                    assert values[j] == pytest.approx(ref_val, abs=1e-9), (cfg, item)
                    assert bool(informed[j]) == ref_inf

    def test_scalar_weights_match_vectorized(self):
        rng = np.random.default_rng(303)
        for trial in range(10):
            db = random_explicit_db(rng, n_users=6, n_items=6, density=0.7)
            case = case_for("outside", dict(db.votes[db.users[0]]))
            for cfg in _configs_for(False):
                scorer = MemoryScorer(db, cfg)
                w = scorer.weights(case)
                for i, u in enumerate(db.users):
                    if cfg.weight_kind == "correlation":
                        ref = correlation_weight(case, u, db, cfg)
                    else:
                        ref = vector_similarity_weight(case, u, db, cfg)
                    ref = 0.0 if ref is None else ref
                    if cfg.case_amplification is not None:
                        ref = case_amplify(ref, cfg.case_amplification)
                    assert w[i] == pytest.approx(ref, abs=1e-9)


class TestNeighborWeights:
    def test_kappa_normalizes_absolute_weights(self):
        rng = np.random.default_rng(9)
        db = random_explicit_db(rng, n_users=8, n_items=6, density=0.7)
        scorer = MemoryScorer(db, CORR)
        case = case_for("probe", dict(db.votes[db.users[0]]))
        nw = scorer.neighbor_weights(case)
        if nw.entries:
            total = sum(abs(w) for _, w in nw.entries)
            assert nw.kappa * total == pytest.approx(1.0, abs=1e-9)
            assert all(w != 0 for _, w in nw.entries)

    def test_empty_entries_allowed(self):
        db = make_db([("i", "a", 3), ("i", "b", 3)])
        scorer = MemoryScorer(db, CORR)
        nw = scorer.neighbor_weights(case_for("probe", {"zz": 1.0}))
        assert nw.entries == ()


class TestConfigValidation:
    def test_vsim_default_voting_requires_implicit_zero(self):
        db = make_db([("u", "a", 3), ("u", "b", 2)])
        cfg = MemoryConfig("vector_similarity", DefaultVoting(d=3.0, k=0))
        case = case_for("x", {"a": 1.0})
        with pytest.raises(ValueError):
            MemoryScorer(db, cfg)

    def test_amplification_power_positive(self):
        with pytest.raises(ValueError):
            MemoryConfig(case_amplification=0.0)

    def test_json_round_trip(self):
        cfg = MemoryConfig("correlation", DefaultVoting(d=0.0, k=10000), True, 2.5)
        again = MemoryConfig.from_json(cfg.to_json())
        assert again == cfg
