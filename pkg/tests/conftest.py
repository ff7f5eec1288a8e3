import numpy as np
import pytest

from cflab.votedata import IMPLICIT_SCALE, ActiveCase, VoteDatabase, VoteScale

SCALE_0_5 = VoteScale(0, 5, 3.0, False)


def make_db(rows, scale=SCALE_0_5, items=None):
    return VoteDatabase.from_votes(rows, scale, items=items)


def random_explicit_db(rng, n_users=10, n_items=8, density=0.5, scale=SCALE_0_5):
    """Random explicit-vote database; every user gets at least two votes."""
    rows = []
    for i in range(n_users):
        voted = rng.random(n_items) < density
        idxs = np.nonzero(voted)[0]
        if len(idxs) < 2:
            idxs = rng.choice(n_items, size=2, replace=False)
        for j in idxs:
            v = int(rng.integers(scale.min_vote, scale.max_vote + 1))
            rows.append((f"u{i}", f"i{j}", v))
    return make_db(rows, scale, items=[f"i{j}" for j in range(n_items)])


def random_implicit_db(rng, n_users=10, n_items=8, density=0.4):
    rows = []
    for i in range(n_users):
        voted = rng.random(n_items) < density
        idxs = np.nonzero(voted)[0]
        if len(idxs) < 1:
            idxs = [int(rng.integers(n_items))]
        for j in idxs:
            rows.append((f"u{i}", f"i{j}", 1.0))
    return make_db(rows, IMPLICIT_SCALE, items=[f"i{j}" for j in range(n_items)])


def case_for(user, observed, targets=None):
    return ActiveCase(user=user, observed=observed, targets=targets or {})


@pytest.fixture
def tiny_explicit_db():
    return make_db(
        [
            ("u1", "a", 1), ("u1", "b", 5), ("u1", "c", 3),
            ("u2", "a", 2), ("u2", "b", 2), ("u2", "c", 4),
            ("u3", "a", 4), ("u3", "b", 4), ("u3", "c", 4), ("u3", "d", 1),
        ]
    )
