"""Channel refinement over class prototypes.

Feature channels are scored by two criteria computed on the per-class
prototype matrix: the average inter-class channel product (channels that
make classes look alike) and the inter-class variance (channels that
actually move between classes).  Blending the two and keeping the
channels with the smallest blended score yields a mask that drops the
least discriminative dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit

__all__ = [
    "CriterionVector",
    "ChannelMask",
    "inter_class_similarity",
    "inter_class_variance",
    "blend_criteria",
    "select_channels",
    "apply_mask",
    "take_channels",
    "full_mask",
    "save_mask",
    "load_mask",
]

MASK_HEADER = "APE-MASK v1"


@dataclass(frozen=True, eq=False)
class CriterionVector:
    """Per-channel scores of one kind: 'similarity', 'variance' or 'blended'."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ("similarity", "variance", "blended"):
            raise ValueError(f"unknown criterion kind {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.isfinite(v).all():
            raise ValueError("criterion values must be a finite 1-D vector")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class ChannelMask:
    """A set of Q kept channel indices plus the scores that produced it.

    ``selected`` is stored in ascending index order so masked matrices keep
    the relative column order of the input.  The selected channels always
    carry scores less than or equal to every unselected channel's score.
    """

    selected: np.ndarray
    d_total: int
    scores: np.ndarray

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        if sel.ndim != 1 or len(sel) == 0:
            raise ValueError("selected must be a nonempty 1-D index vector")
        if len(np.unique(sel)) != len(sel):
            raise ValueError("selected indices must be distinct")
        if sel.min() < 0 or sel.max() >= self.d_total:
            raise ValueError("selected indices out of range")
        if scores.shape != (self.d_total,) or not np.isfinite(scores).all():
            raise ValueError(f"scores must be a finite vector of length {self.d_total}")
        unsel = np.setdiff1d(np.arange(self.d_total), sel)
        if len(unsel) and scores[sel].max() > scores[unsel].min():
            raise ValueError("selected channels must carry the smallest scores")
        object.__setattr__(self, "selected", np.sort(sel))
        object.__setattr__(self, "scores", scores)

    @property
    def q(self) -> int:
        return int(len(self.selected))


def inter_class_similarity(w) -> CriterionVector:
    """Average inter-class channel product over unit-norm prototypes.

    For channel k the score is (1/C^2) * sum over ordered pairs of distinct
    classes (i, j) of w[i, k] * w[j, k].  Because the prototype rows are
    L2-normalized, summing these scores over any channel subset equals the
    average pairwise cosine similarity restricted to that subset, so the
    criterion decomposes exactly per channel.

    Raises:
        ValueError: if fewer than two classes, or rows are not unit-norm
            within 1e-6.
    """
    w = numkit.as_matrix(w, "w")
    c = w.shape[0]
    if c < 2:
        raise ValueError("inter-class similarity needs at least 2 classes")
    norms = np.sqrt((w * w).sum(axis=1))
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError("prototype rows must be L2-normalized (within 1e-6)")
    colsum = w.sum(axis=0)
    values = (colsum * colsum - (w * w).sum(axis=0)) / (c * c)
    return CriterionVector("similarity", values)


def inter_class_variance(w) -> CriterionVector:
    """Per-channel population variance of the prototype values across classes."""
    w = numkit.as_matrix(w, "w")
    if w.shape[0] < 2:
        raise ValueError("inter-class variance needs at least 2 classes")
    return CriterionVector("variance", np.var(w, axis=0))


def blend_criteria(s: CriterionVector, v: CriterionVector, lam: float) -> CriterionVector:
    """Blend similarity and variance into one score: lam * S - (1 - lam) * V.

    Low blended scores mark the channels worth keeping: small inter-class
    similarity and large inter-class variance.
    """
    if s.kind != "similarity":
        raise ValueError(f"first criterion must be 'similarity', got {s.kind!r}")
    if v.kind != "variance":
        raise ValueError(f"second criterion must be 'variance', got {v.kind!r}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if s.values.shape != v.values.shape:
        raise ValueError("criterion vectors must have equal length")
    return CriterionVector("blended", lam * s.values - (1.0 - lam) * v.values)


def select_channels(s: CriterionVector, v: CriterionVector, lam: float, q: int) -> ChannelMask:
    """Keep the q channels with the smallest blended score.

    Ties break toward the lower channel index, so the result is
    deterministic and the selection for q is a subset of the selection
    for q + 1.

    Raises:
        ValueError: if q is not in [1, D].
    """
    j = blend_criteria(s, v, lam)
    d = len(j.values)
    if not 1 <= q <= d:
        raise ValueError(f"q must lie in [1, {d}], got {q}")
    order = np.argsort(j.values, kind="stable")
    return ChannelMask(selected=np.sort(order[:q]), d_total=d, scores=j.values)


def take_channels(m, indices, renormalize: bool) -> np.ndarray:
    """Keep the given columns of ``m``, optionally re-normalizing each row.

    Zero rows survive renormalization unchanged (with a warning), matching
    :func:`ape.numkit.l2_normalize_rows`.
    """
    m = numkit.as_matrix(m, "m")
    out = np.ascontiguousarray(m[:, np.asarray(indices, dtype=np.int64)])
    if renormalize:
        out = numkit.l2_normalize_rows(out)
    return out


def apply_mask(m, mask: ChannelMask, renormalize: bool = True) -> np.ndarray:
    """Project ``m`` onto the mask's selected channels.

    Raises:
        ValueError: if ``m`` does not have ``mask.d_total`` columns.
    """
    m = numkit.as_matrix(m, "m")
    if m.shape[1] != mask.d_total:
        raise ValueError(
            f"matrix has {m.shape[1]} columns, mask expects {mask.d_total}"
        )
    return take_channels(m, mask.selected, renormalize)


def full_mask(d: int) -> ChannelMask:
    """Mask keeping all ``d`` channels (zero scores)."""
    return ChannelMask(selected=np.arange(d), d_total=d, scores=np.zeros(d))


def save_mask(path, mask: ChannelMask, lam: float) -> None:
    """Write a mask as text: a header line, then one line per channel.

    Format: ``APE-MASK v1 D=<d> Q=<q> lambda=<lam>`` followed by D lines
    ``index score selected(0|1)``.
    """
    flags = np.zeros(mask.d_total, dtype=np.int64)
    flags[mask.selected] = 1
    lines = [f"{MASK_HEADER} D={mask.d_total} Q={mask.q} lambda={float(lam)!r}"]
    for i in range(mask.d_total):
        lines.append(f"{i} {float(mask.scores[i])!r} {flags[i]}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mask(path) -> tuple[ChannelMask, float]:
    """Read a mask file written by :func:`save_mask`.

    Returns:
        The mask and the lambda recorded in the header.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith(MASK_HEADER):
        raise ValueError(f"not a mask file: {path}")
    fields = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    d, q, lam = int(fields["D"]), int(fields["Q"]), float(fields["lambda"])
    if len(lines) - 1 != d:
        raise ValueError(f"mask file declares D={d} but has {len(lines) - 1} rows")
    scores = np.empty(d)
    flags = np.empty(d, dtype=np.int64)
    for ln in lines[1:]:
        idx_s, score_s, flag_s = ln.split()
        scores[int(idx_s)] = float(score_s)
        flags[int(idx_s)] = int(flag_s)
    selected = np.flatnonzero(flags)
    if len(selected) != q:
        raise ValueError(f"mask file declares Q={q} but flags {len(selected)} channels")
    return ChannelMask(selected=selected, d_total=d, scores=scores), lam
