"""Training-free inference over a few-shot task.

The classifier combines three pairwise relations between the test
features, the class text prototypes and the cached support features:

* test-to-text cosine logits (the zero-shot prediction),
* test-to-support affinities through a sharpened exponential kernel,
* support-to-text scores that weight each cache entry by how well the
  prototypes classify it.

A plain key-value cache baseline (affinities times one-hot labels on the
full feature space) is included for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit, refine

__all__ = [
    "EngineConfig",
    "FewShotTask",
    "zero_shot_logits",
    "cache_affinity",
    "cache_scores",
    "ape_logits",
    "tip_adapter_logits",
    "predict",
    "accuracy",
]


@dataclass
class EngineConfig:
    """Scalar knobs of the classifier.

    ``q`` is informational (the mask carries the operative channel set);
    0 means "all channels".  ``kl_sign`` selects whether high-divergence
    cache entries are up-weighted (+1) or down-weighted (-1).
    """

    lam: float = 0.7
    q: int = 0
    alpha: float = 1.0
    beta: float = 5.5
    gamma: float = 0.2
    kl_sign: int = 1
    kl_temperature: float = 1.0
    renormalize: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.q < 0:
            raise ValueError(f"q must be >= 0, got {self.q}")
        for name in ("alpha", "beta", "gamma"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if self.kl_sign not in (1, -1):
            raise ValueError(f"kl_sign must be +1 or -1, got {self.kl_sign}")
        if not self.kl_temperature > 0:
            raise ValueError(f"kl_temperature must be > 0, got {self.kl_temperature}")


@dataclass(eq=False)
class FewShotTask:
    """A bundled C-way-K-shot dataset of precomputed embeddings.

    Support rows are grouped class-major: row c*K + j is the j-th shot of
    class c, and the one-hot label matrix must match that grouping.  All
    feature rows are unit-norm.
    """

    text_features: np.ndarray      # C x D
    support_features: np.ndarray   # C*K x D
    support_labels: np.ndarray     # C*K x C one-hot
    test_features: np.ndarray      # N x D
    test_labels: np.ndarray | None  # N class ids, optional
    c: int
    k: int
    d: int

    def __post_init__(self):
        self.text_features = numkit.as_matrix(self.text_features, "text_features")
        self.support_features = numkit.as_matrix(self.support_features, "support_features")
        self.support_labels = numkit.as_matrix(self.support_labels, "support_labels")
        self.test_features = numkit.as_matrix(self.test_features, "test_features")
        if self.text_features.shape != (self.c, self.d):
            raise ValueError(
                f"text_features must be {self.c}x{self.d}, got {self.text_features.shape}"
            )
        if self.support_features.shape != (self.c * self.k, self.d):
            raise ValueError(
                f"support_features must be {self.c * self.k}x{self.d}, "
                f"got {self.support_features.shape}"
            )
        if self.support_labels.shape != (self.c * self.k, self.c):
            raise ValueError(
                f"support_labels must be {self.c * self.k}x{self.c}, "
                f"got {self.support_labels.shape}"
            )
        expected = np.kron(np.eye(self.c), np.ones((self.k, 1)))
        if not np.array_equal(self.support_labels, expected):
            raise ValueError(
                "support_labels must be one-hot and grouped class-major "
                "(row c*K+j carries a 1 at column c)"
            )
        if self.test_features.shape[1] != self.d:
            raise ValueError(
                f"test_features must have {self.d} columns, got {self.test_features.shape[1]}"
            )
        for name in ("text_features", "support_features", "test_features"):
            m = getattr(self, name)
            norms = np.sqrt((m * m).sum(axis=1))
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError(f"{name} rows must be unit-norm within 1e-6")
        if self.test_labels is not None:
            labels = np.asarray(self.test_labels, dtype=np.int64)
            if labels.shape != (self.test_features.shape[0],):
                raise ValueError("test_labels length must match test_features rows")
            if labels.min() < 0 or labels.max() >= self.c:
                raise ValueError("test_labels contain out-of-range class ids")
            self.test_labels = labels

    @property
    def n_test(self) -> int:
        return int(self.test_features.shape[0])

    def support_class_ids(self) -> np.ndarray:
        """Class id of each support row, in class-major order."""
        return np.repeat(np.arange(self.c), self.k)


def zero_shot_logits(f_batch, w) -> np.ndarray:
    """Cosine logits between test rows and class prototypes: f @ w.T.

    For unit rows every entry lies in [-1, 1].

    Raises:
        ValueError: on feature-dimension mismatch.
    """
    f_batch = numkit.as_matrix(f_batch, "f_batch")
    w = numkit.as_matrix(w, "w")
    if f_batch.shape[1] != w.shape[1]:
        raise ValueError(
            f"feature dims differ: {f_batch.shape[1]} vs {w.shape[1]}"
        )
    return f_batch @ w.T


def cache_affinity(f_refined, f_support_refined, beta: float) -> np.ndarray:
    """Query-key affinities exp(-beta * (1 - f @ F.T)).

    With unit rows the cosine gap 1 - f @ F.T is a distance in [0, 2], so
    every affinity lies in (0, 1].  beta controls the sharpness; beta = 0
    degenerates to all-ones.
    """
    f_refined = numkit.as_matrix(f_refined, "f_refined")
    f_support_refined = numkit.as_matrix(f_support_refined, "f_support_refined")
    if f_refined.shape[1] != f_support_refined.shape[1]:
        raise ValueError(
            f"refined dims differ: {f_refined.shape[1]} vs {f_support_refined.shape[1]}"
        )
    if not np.isfinite(beta) or beta < 0:
        raise ValueError(f"beta must be finite and >= 0, got {beta}")
    return np.exp(-beta * (1.0 - f_refined @ f_support_refined.T))


def cache_scores(
    f_support_refined,
    w_refined,
    labels,
    gamma: float,
    kl_sign: int = 1,
    kl_temperature: float = 1.0,
) -> np.ndarray:
    """Per-entry reliability weights for the cache.

    Each support row is classified against the refined prototypes; the
    softmax prediction's divergence from the row's one-hot label measures
    how well the embedding represents its class.  The weight is
    exp(kl_sign * gamma * divergence), so gamma = 0 yields exactly 1 for
    every entry and a perfectly predicted entry scores 1 for any gamma.

    Raises:
        ValueError: if ``labels`` is not one-hot.
    """
    f_support_refined = numkit.as_matrix(f_support_refined, "f_support_refined")
    w_refined = numkit.as_matrix(w_refined, "w_refined")
    labels = numkit.as_matrix(labels, "labels")
    if kl_sign not in (1, -1):
        raise ValueError(f"kl_sign must be +1 or -1, got {kl_sign}")
    if not np.isfinite(gamma) or gamma < 0:
        raise ValueError(f"gamma must be finite and >= 0, got {gamma}")
    n, c = labels.shape
    if f_support_refined.shape[0] != n or w_refined.shape[0] != c:
        raise ValueError("labels shape inconsistent with features")
    if not (np.isin(labels, (0.0, 1.0)).all() and (labels.sum(axis=1) == 1.0).all()):
        raise ValueError("labels must be one-hot rows")
    class_ids = labels.argmax(axis=1)
    probs = numkit.softmax_rows(f_support_refined @ w_refined.T, kl_temperature)
    p_true = np.clip(probs[np.arange(n), class_ids], numkit.PROB_FLOOR, 1.0)
    return np.exp(kl_sign * gamma * -np.log(p_true))


def ape_logits(task: FewShotTask, mask: refine.ChannelMask, cfg: EngineConfig) -> np.ndarray:
    """Combined logits: zero-shot term plus the score-weighted refined cache.

    The zero-shot term uses the full feature space; the cache term runs on
    the mask's channels (re-normalized when ``cfg.renormalize``) and routes
    each support entry's affinity, scaled by its reliability score, into
    its own class column.
    """
    cfg.validate()
    if mask.d_total != task.d:
        raise ValueError(f"mask covers {mask.d_total} channels, task has {task.d}")
    zs = zero_shot_logits(task.test_features, task.text_features)
    w_ref = refine.apply_mask(task.text_features, mask, cfg.renormalize)
    s_ref = refine.apply_mask(task.support_features, mask, cfg.renormalize)
    f_ref = refine.apply_mask(task.test_features, mask, cfg.renormalize)
    aff = cache_affinity(f_ref, s_ref, cfg.beta)
    scores = cache_scores(
        s_ref, w_ref, task.support_labels, cfg.gamma, cfg.kl_sign, cfg.kl_temperature
    )
    return zs + cfg.alpha * ((aff * scores) @ task.support_labels)


def tip_adapter_logits(task: FewShotTask, alpha: float, beta: float) -> np.ndarray:
    """Key-value cache baseline on the full feature space.

    logits = f @ W.T + alpha * exp(-beta * (1 - f @ F.T)) @ L, i.e. the
    combined classifier with every channel kept and unit cache scores.
    """
    zs = zero_shot_logits(task.test_features, task.text_features)
    aff = cache_affinity(task.test_features, task.support_features, beta)
    return zs + alpha * (aff @ task.support_labels)


def predict(logits) -> np.ndarray:
    """Predicted class ids (row-wise argmax; ties go to the lower id)."""
    return np.asarray(logits).argmax(axis=1)


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches ``labels``."""
    labels = np.asarray(labels)
    return float((predict(logits) == labels).mean())
