import numpy as np
import pytest

from cflab.bayesnet import LearnConfig, learn_network
from cflab.cluster import em_fit
from cflab.memory import MemoryConfig, MemoryScorer
from cflab.predictors import (
    BayesNetPredictor,
    ClusterPredictor,
    MemoryPredictor,
    PopularityPredictor,
)
from cflab.votedata import restrict_to_top_items

from conftest import case_for, random_explicit_db, random_implicit_db


@pytest.fixture
def implicit_db():
    return random_implicit_db(np.random.default_rng(42), n_users=30, n_items=8, density=0.5)


class TestPopularityPredictor:
    def test_ranks_and_refuses_votes(self, implicit_db):
        pred = PopularityPredictor(implicit_db)
        case = case_for("t", {implicit_db.items[0]: 1.0})
        ranked = pred.rank(case)
        assert implicit_db.items[0] not in ranked
        assert not pred.supports_deviation
        with pytest.raises(NotImplementedError):
            pred.predict(case, implicit_db.items[1])


class TestMemoryPredictor:
    def test_matches_scorer(self, implicit_db):
        cfg = MemoryConfig("vector_similarity")
        pred = MemoryPredictor(implicit_db, cfg, name="VSIM")
        scorer = MemoryScorer(implicit_db, cfg)
        case = case_for("t", dict(implicit_db.votes[implicit_db.users[0]]))
        assert pred.rank(case) == scorer.rank(case)
        item = implicit_db.items[-1]
        if item not in case.observed:
            assert pred.predict(case, item) == scorer.predict(case, item).value


class TestModelFallbacks:
    def test_cluster_ranks_unmodeled_items(self, implicit_db):
        trimmed = restrict_to_top_items(implicit_db, 4)
        model, _ = em_fit(trimmed, 2, seed=0, compute_cs=False)
        pred = ClusterPredictor(implicit_db, model, name="BC")
        case = case_for("t", {implicit_db.items[0]: 1.0})
        ranked = pred.rank(case)
        assert set(ranked) == set(implicit_db.items) - {implicit_db.items[0]}
        outside = next(it for it in implicit_db.items if it not in model.items)
        assert 0.0 <= pred.predict(case, outside) <= 1.0

    def test_bayesnet_ranks_unmodeled_items(self, implicit_db):
        trimmed = restrict_to_top_items(implicit_db, 4)
        model = learn_network(trimmed, LearnConfig())
        pred = BayesNetPredictor(implicit_db, model, name="BN")
        case = case_for("t", {implicit_db.items[0]: 1.0})
        ranked = pred.rank(case)
        assert set(ranked) == set(implicit_db.items) - {implicit_db.items[0]}
        assert pred.stats.get("lookups", 0) > 0

    def test_deviation_predictions_in_scale(self):
        db = random_explicit_db(np.random.default_rng(3), n_users=20, n_items=6, density=0.7)
        model, _ = em_fit(db, 2, seed=1, compute_cs=False)
        pred = ClusterPredictor(db, model, name="BC")
        case = case_for("t", {db.items[0]: 4.0})
        for it in db.items[1:]:
            assert 0.0 <= pred.predict(case, it) <= 5.0
