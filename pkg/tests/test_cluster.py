import math

import numpy as np
import pytest

from cflab.cluster import (
    ClusterModel,
    cheeseman_stutz_score,
    cluster_posterior,
    cluster_predict,
    em_fit,
    expected_counts,
    map_estimates,
    select_cluster_model,
)
from cflab.votedata import IMPLICIT_SCALE, VoteDatabase, VoteScale

from conftest import SCALE_0_5, case_for, make_db, random_implicit_db
from reference import exact_mixture_log_marginal


def two_block_db(rng, n_per=40, items_per=4, p_own=0.92, p_other=0.02):
    """Two user populations voting on disjoint item blocks."""
    items = [f"a{j}" for j in range(items_per)] + [f"b{j}" for j in range(items_per)]
    rows = []
    for i in range(2 * n_per):
        own = items[:items_per] if i < n_per else items[items_per:]
        other = items[items_per:] if i < n_per else items[:items_per]
        got = [it for it in own if rng.random() < p_own]
        got += [it for it in other if rng.random() < p_other]
        if not got:
            got = [own[0]]
        rows += [(f"u{i}", it, 1.0) for it in got]
    return VoteDatabase.from_votes(rows, IMPLICIT_SCALE, items=items)


def one_class_db(rng, n=120, t=8):
    items = [f"i{j}" for j in range(t)]
    p = rng.uniform(0.2, 0.7, size=t)
    rows = []
    for i in range(n):
        got = [items[j] for j in range(t) if rng.random() < p[j]]
        if not got:
            got = [items[0]]
        rows += [(f"u{i}", it, 1.0) for it in got]
    return VoteDatabase.from_votes(rows, IMPLICIT_SCALE, items=items)


def three_class_db(rng, n_per=60, t=9):
    items = [f"i{j}" for j in range(t)]
    rows = []
    for c in range(3):
        block = items[c * 3:(c + 1) * 3]
        for i in range(n_per):
            u = f"u{c}_{i}"
            got = [it for it in block if rng.random() < 0.85]
            got += [it for it in items if it not in block and rng.random() < 0.05]
            if not got:
                got = [block[0]]
            rows += [(u, it, 1.0) for it in got]
    return VoteDatabase.from_votes(rows, IMPLICIT_SCALE, items=items)


def two_item_two_class_db(rng, n=8):
    """Eight users, two explicit items, two clear taste groups."""
    rows = []
    for i in range(n):
        hi, lo = ("A", "B") if i < n // 2 else ("B", "A")
        rows.append((f"u{i}", hi, float(np.clip(5 - rng.integers(0, 2), 0, 5))))
        rows.append((f"u{i}", lo, float(rng.integers(0, 2))))
    return VoteDatabase.from_votes(rows, SCALE_0_5, items=["A", "B"])


def hand_smoothed_frequencies(db, assignment, num_classes, strength=1.0):
    """Closed-form smoothed estimates computed with plain loops."""
    scale = db.scale
    s = scale.num_states
    n = len(db.users)
    class_counts = [0.0] * num_classes
    state_counts = [
        [[0.0] * s for _ in db.items] for _ in range(num_classes)
    ]
    for u, c in zip(db.users, assignment):
        class_counts[c] += 1
        for j, it in enumerate(db.items):
            v = db.votes[u].get(it)
            state_counts[c][j][scale.state_of(v) if v is not None else 0] += 1
    prior = [(class_counts[c] + strength / num_classes) / (n + strength) for c in range(num_classes)]
    cond = [
        [
            [(state_counts[c][j][k] + strength / s) / (class_counts[c] + strength) for k in range(s)]
            for j in range(len(db.items))
        ]
        for c in range(num_classes)
    ]
    return np.array(prior), np.array(cond)


class TestEmFit:
    def test_single_class_is_smoothed_marginals(self):
        db = random_implicit_db(np.random.default_rng(0), n_users=12, n_items=5)
        model, report = em_fit(db, 1, seed=0)
        assert report.iterations == 1 and report.converged
        prior, cond = hand_smoothed_frequencies(db, [0] * len(db.users), 1)
        assert model.class_prior == pytest.approx(prior)
        np.testing.assert_allclose(model.cond, cond, atol=1e-12)

    def test_two_population_recovery(self):
        rng = np.random.default_rng(1003)
        db = two_block_db(rng)
        model, _ = em_fit(db, 2, seed=3, compute_cs=False)
        posts = np.array([model.posterior(db.votes[u]) for u in db.users])
        assert (posts.max(axis=1) >= 0.99).all()
        # the two blocks land in opposite classes
        first, second = posts[: len(db.users) // 2], posts[len(db.users) // 2:]
        assert first.argmax(axis=1).max() == first.argmax(axis=1).min()
        assert second.argmax(axis=1).max() == second.argmax(axis=1).min()
        assert first[0].argmax() != second[0].argmax()

    def test_empty_database_is_error(self):
        db = VoteDatabase((), ("a",), {}, IMPLICIT_SCALE)
        with pytest.raises(ValueError):
            em_fit(db, 2)

    def test_more_classes_than_users_warns_but_fits(self, caplog):
        db = make_db([("u", "a", 1), ("v", "a", 1), ("v", "b", 1)], scale=IMPLICIT_SCALE)
        with caplog.at_level("WARNING"):
            model, _ = em_fit(db, 5, seed=0, compute_cs=False)
        assert model.num_classes == 5
        assert any("classes" in r.message for r in caplog.records)

    def test_objective_trace_monotone(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            db = random_implicit_db(rng, n_users=15, n_items=6)
            _, report = em_fit(db, 3, seed=trial, compute_cs=False)
            diffs = np.diff(report.objective_trace)
            assert (diffs >= -1e-9).all()

    def test_complete_data_m_step_matches_closed_form(self):
        db = random_implicit_db(np.random.default_rng(9), n_users=10, n_items=5)
        assignment = [i % 2 for i in range(len(db.users))]
        gamma = np.zeros((len(db.users), 2))
        for i, c in enumerate(assignment):
            gamma[i, c] = 1.0
        totals, counts = expected_counts(db, gamma)
        prior, cond = map_estimates(totals, counts, prior_strength=1.0)
        exp_prior, exp_cond = hand_smoothed_frequencies(db, assignment, 2)
        np.testing.assert_array_equal(prior, exp_prior)
        np.testing.assert_allclose(cond, exp_cond, atol=0)


def hand_model_two_classes():
    """Prior (0.5, 0.5); one implicit item with vote odds 0.9 vs 0.1."""
    eps = 1e-9
    cond = np.array([
        [[0.1, 0.9]],
        [[0.9, 0.1]],
    ])
    return ClusterModel(IMPLICIT_SCALE, ("x",), np.array([0.5, 0.5]), cond)


class TestPosterior:
    def test_single_class(self):
        db = random_implicit_db(np.random.default_rng(1), n_users=6, n_items=4)
        model, _ = em_fit(db, 1)
        case = case_for("t", {db.items[0]: 1.0})
        assert cluster_posterior(model, case) == pytest.approx([1.0])

    def test_symmetric_evidence_is_uninformative(self):
        # the classes mirror each other, so voting on both items is a wash
        cond = np.array([
            [[0.3, 0.7], [0.7, 0.3]],
            [[0.7, 0.3], [0.3, 0.7]],
        ])
        model = ClusterModel(IMPLICIT_SCALE, ("p", "q"), np.array([0.5, 0.5]), cond)
        case = case_for("t", {"p": 1.0, "q": 1.0})
        assert cluster_posterior(model, case) == pytest.approx([0.5, 0.5])

    def test_hand_bayes_rule(self):
        model = hand_model_two_classes()
        case = case_for("t", {"x": 1.0})
        assert cluster_posterior(model, case) == pytest.approx([0.9, 0.1], abs=1e-12)

    def test_posterior_sums_to_one(self):
        rng = np.random.default_rng(5)
        db = random_implicit_db(rng, n_users=20, n_items=6)
        model, _ = em_fit(db, 4, seed=2, compute_cs=False)
        for u in db.users[:5]:
            post = model.posterior(db.votes[u])
            assert post.sum() == pytest.approx(1.0, abs=1e-10)
            assert (post > 0).all()


class TestClusterPredict:
    def test_point_mass_class(self):
        eps = 1e-9
        dist = np.full(7, eps)
        dist[5] = 1.0 - 6 * eps  # state 5 is vote 4 on a 0..5 scale
        model = ClusterModel(SCALE_0_5, ("t",), np.array([1.0]), dist[None, None, :])
        out = cluster_predict(model, case_for("u", {"other": 1.0}), "t")
        assert out.expected_vote == pytest.approx(4.0, abs=1e-6)

    def test_uniform_votes_give_midpoint(self):
        dist = np.array([0.4] + [0.1] * 6)
        model = ClusterModel(SCALE_0_5, ("t",), np.array([1.0]), dist[None, None, :])
        out = cluster_predict(model, case_for("u", {"other": 1.0}), "t")
        assert out.expected_vote == pytest.approx(2.5)
        assert out.distribution == pytest.approx(dist)

    def test_hand_mixture(self):
        eps = 1e-9
        scale = VoteScale(0, 5, 3.0, False)
        # evidence item "e": observing vote 0 favors class 1 at odds 0.9 : 0.1
        e_c1 = np.array([0.05, 0.9, 0.01, 0.01, 0.01, 0.01, 0.01])
        e_c2 = np.array([0.05, 0.1, 0.17, 0.17, 0.17, 0.17, 0.17])
        # target item "t": class 1 votes 1, class 2 votes 5; identical no-vote
        # mass so the unobserved target itself stays uninformative
        t_c1 = np.full(7, eps); t_c1[2] = 1 - 6 * eps
        t_c2 = np.full(7, eps); t_c2[6] = 1 - 6 * eps
        cond = np.stack([np.stack([e_c1, t_c1]), np.stack([e_c2, t_c2])])
        model = ClusterModel(scale, ("e", "t"), np.array([0.5, 0.5]), cond)
        case = case_for("u", {"e": 0.0})
        post = cluster_posterior(model, case)
        assert post == pytest.approx([0.9, 0.1], abs=1e-6)
        out = cluster_predict(model, case, "t")
        assert out.expected_vote == pytest.approx(1.4, abs=1e-6)

    def test_expected_vote_within_scale(self):
        rng = np.random.default_rng(31)
        db = random_implicit_db(rng, n_users=15, n_items=6)
        model, _ = em_fit(db, 3, seed=1, compute_cs=False)
        case = case_for("u", {db.items[0]: 1.0})
        for it in db.items[1:]:
            out = cluster_predict(model, case, it)
            assert 0.0 <= out.expected_vote <= 1.0

    def test_observed_item_rejected(self):
        model = hand_model_two_classes()
        with pytest.raises(ValueError):
            cluster_predict(model, case_for("u", {"x": 1.0}), "x")

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(12)
        db = random_implicit_db(rng, n_users=15, n_items=6)
        model, _ = em_fit(db, 3, seed=5, compute_cs=False)
        perm = [2, 0, 1]
        permuted = ClusterModel(
            model.scale, model.items,
            model.class_prior[perm], model.cond[perm],
        )
        case = case_for("u", {db.items[0]: 1.0, db.items[2]: 1.0})
        for it in (db.items[1], db.items[3]):
            a = cluster_predict(model, case, it)
            b = cluster_predict(permuted, case, it)
            assert a.expected_vote == pytest.approx(b.expected_vote, abs=1e-12)
            assert a.distribution == pytest.approx(b.distribution, abs=1e-12)


class TestCheesemanStutz:
    def test_single_class_equals_exact_marginal(self):
        db = random_implicit_db(np.random.default_rng(3), n_users=7, n_items=2)
        model, report = em_fit(db, 1)
        exact = exact_mixture_log_marginal(db, 1)
        assert report.cs_score == pytest.approx(exact, abs=1e-9)

    def test_score_is_negative(self):
        rng = np.random.default_rng(8)
        db = random_implicit_db(rng, n_users=12, n_items=5)
        for c in (1, 2, 3):
            model, report = em_fit(db, c, seed=c)
            assert report.cs_score < 0

    def test_matches_enumeration_within_five_percent(self):
        # eight users, two items, two latent taste groups on the 0..5 scale
        for seed in range(4):
            rng = np.random.default_rng(900 + seed)
            db = two_item_two_class_db(rng)
            best = max(
                em_fit(db, 2, seed=seed * 13 + r)[1].cs_score for r in range(3)
            )
            exact = exact_mixture_log_marginal(db, 2)
            assert abs(best - exact) <= 0.05 * abs(exact)

    def test_item_mismatch_is_error(self):
        db = random_implicit_db(np.random.default_rng(1), n_users=6, n_items=4)
        other = random_implicit_db(np.random.default_rng(2), n_users=6, n_items=3)
        model, _ = em_fit(db, 1)
        with pytest.raises(ValueError):
            cheeseman_stutz_score(model, other)


class TestSelectClusterModel:
    def test_one_class_data_selects_one(self):
        wins = 0
        for seed in range(20):
            db = one_class_db(np.random.default_rng(2000 + seed))
            model, table = select_cluster_model(db, 4, seed=seed, restarts=2)
            wins += model.num_classes == 1
        assert wins >= 16

    def test_three_class_data_selects_three(self):
        wins = 0
        for seed in range(20):
            db = three_class_db(np.random.default_rng(3000 + seed))
            model, table = select_cluster_model(db, 5, seed=seed, restarts=2)
            wins += model.num_classes == 3
        assert wins >= 16

    def test_cmax_one_returns_single_class(self):
        db = one_class_db(np.random.default_rng(0), n=30)
        model, table = select_cluster_model(db, 1, seed=0)
        assert model.num_classes == 1
        assert len(table) == 1

    def test_table_covers_all_counts(self):
        db = one_class_db(np.random.default_rng(5), n=40, t=5)
        _, table = select_cluster_model(db, 3, seed=1, restarts=1)
        assert [row["classes"] for row in table] == [1, 2, 3]
        assert all(math.isfinite(row["cs_score"]) for row in table)


class TestSerialization:
    def test_round_trip_exact(self):
        db = random_implicit_db(np.random.default_rng(4), n_users=10, n_items=5)
        model, _ = em_fit(db, 2, seed=0, compute_cs=False)
        import json

        doc = json.loads(json.dumps(model.to_json()))
        again = ClusterModel.from_json(doc)
        np.testing.assert_array_equal(again.class_prior, model.class_prior)
        np.testing.assert_array_equal(again.cond, model.cond)
        assert again.items == model.items

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            ClusterModel(IMPLICIT_SCALE, ("x",), np.array([0.6, 0.6]),
                         np.full((2, 1, 2), 0.5))
        with pytest.raises(ValueError):
            ClusterModel(IMPLICIT_SCALE, ("x",), np.array([1.0]),
                         np.array([[[1.0, 0.0]]]))
