"""Shared builders for randomized test instances."""

import numpy as np

from ape import FewShotTask, l2_normalize_rows


def unit_rows(rng, n, d):
    return l2_normalize_rows(rng.standard_normal((n, d)))


def one_hot_labels(c, k):
    return np.kron(np.eye(c), np.ones((k, 1)))


def random_task(rng, c=3, k=2, d=8, n_test=5, with_labels=True):
    """A valid random task: unit feature rows, class-major one-hot labels."""
    return FewShotTask(
        text_features=unit_rows(rng, c, d),
        support_features=unit_rows(rng, c * k, d),
        support_labels=one_hot_labels(c, k),
        test_features=unit_rows(rng, n_test, d),
        test_labels=rng.integers(0, c, n_test) if with_labels else None,
        c=c,
        k=k,
        d=d,
    )
