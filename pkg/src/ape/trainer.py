"""Lightweight residual training on top of the training-free classifier.

Only two tensors learn: a per-class residual over the refined channels
(added both to the text prototypes, zero-padded back to full width, and to
the cached support features, repeated across each class's shots) and the
per-entry cache scores.  Everything else -- prototypes, cache features,
labels, channel mask -- stays frozen.  Gradients are derived analytically
and the update rule is AdamW with decoupled weight decay under a cosine
learning-rate schedule.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import numkit, refine
from .engine import EngineConfig, FewShotTask, accuracy, cache_affinity, cache_scores

__all__ = [
    "OptimConfig",
    "TrainState",
    "param_count",
    "init_state",
    "forward",
    "backward",
    "cross_entropy",
    "adamw_step",
    "cosine_lr",
    "train",
    "frozen_checksum",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"APE-CKPT v1\n"


@dataclass
class OptimConfig:
    """AdamW and schedule settings.  ``total_steps`` 0 means derive from
    epochs * ceil(support / batch_size)."""

    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 256
    total_steps: int = 0
    seed: int = 0

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("weight_decay must be >= 0 and eps > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(eq=False)
class TrainState:
    """Learnable tensors, their optimizer moments, and the frozen context."""

    # learnable
    res: np.ndarray        # C x Q class residuals
    scores: np.ndarray     # C*K cache scores
    # AdamW moments
    m_res: np.ndarray
    v_res: np.ndarray
    m_scores: np.ndarray
    v_scores: np.ndarray
    step: int
    # frozen context
    mask_idx: np.ndarray           # Q selected channel indices
    w: np.ndarray                  # C x D text prototypes
    w_refined: np.ndarray          # C x Q
    f_support_refined: np.ndarray  # C*K x Q
    labels: np.ndarray             # C*K x C one-hot
    c: int
    k: int
    q: int
    d_total: int

    def param_count(self) -> int:
        return param_count(self.c, self.q, self.k)


def param_count(c: int, q: int, k: int) -> int:
    """Number of learnable scalars: C*Q residuals plus C*K cache scores."""
    if c < 1 or q < 1 or k < 1:
        raise ValueError("counts must be positive")
    return c * q + c * k


def init_state(task: FewShotTask, mask: refine.ChannelMask, cfg: EngineConfig) -> TrainState:
    """Fresh state: zero residuals and cache scores from the frozen model.

    A forward pass of the fresh state reproduces the training-free logits
    bitwise.
    """
    cfg.validate()
    if mask.d_total != task.d:
        raise ValueError(f"mask covers {mask.d_total} channels, task has {task.d}")
    w_ref = refine.apply_mask(task.text_features, mask, cfg.renormalize)
    s_ref = refine.apply_mask(task.support_features, mask, cfg.renormalize)
    scores = cache_scores(
        s_ref, w_ref, task.support_labels, cfg.gamma, cfg.kl_sign, cfg.kl_temperature
    )
    q = mask.q
    return TrainState(
        res=np.zeros((task.c, q)),
        scores=scores,
        m_res=np.zeros((task.c, q)),
        v_res=np.zeros((task.c, q)),
        m_scores=np.zeros(task.c * task.k),
        v_scores=np.zeros(task.c * task.k),
        step=0,
        mask_idx=np.asarray(mask.selected, dtype=np.int64).copy(),
        w=task.text_features.copy(),
        w_refined=w_ref,
        f_support_refined=s_ref,
        labels=task.support_labels.copy(),
        c=task.c,
        k=task.k,
        q=q,
        d_total=task.d,
    )


def _pad_residual(state: TrainState) -> np.ndarray:
    """Zero-pad the C x Q residual to C x D, placing columns at the mask indices."""
    padded = np.zeros((state.c, state.d_total))
    padded[:, state.mask_idx] = state.res
    return padded


def _expand_residual(state: TrainState) -> np.ndarray:
    """Repeat each class residual K times to align with the cache rows."""
    return np.repeat(state.res, state.k, axis=0)


def forward(state: TrainState, f_batch, cfg: EngineConfig) -> np.ndarray:
    """Logits of the residual-augmented classifier for a batch of full-width rows.

    The residual shifts the text prototypes (padded to full width) and the
    cached support features (expanded across shots); the cache scores
    multiply each entry's affinity before one-hot routing.
    """
    f_batch = numkit.as_matrix(f_batch, "f_batch")
    if f_batch.shape[1] != state.d_total:
        raise ValueError(
            f"f_batch has {f_batch.shape[1]} columns, state expects {state.d_total}"
        )
    w_eff = state.w + _pad_residual(state)
    zs = f_batch @ w_eff.T
    f_ref = refine.take_channels(f_batch, state.mask_idx, cfg.renormalize)
    keys = state.f_support_refined + _expand_residual(state)
    aff = cache_affinity(f_ref, keys, cfg.beta)
    return zs + cfg.alpha * ((aff * state.scores) @ state.labels)


def cross_entropy(logits, label_ids) -> float:
    """Mean softmax cross-entropy of logits against integer class ids."""
    z = numkit.as_matrix(logits, "logits")
    y = np.asarray(label_ids, dtype=np.int64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float((log_norm - z[np.arange(len(y)), y]).mean())


def _grad_parts(state: TrainState, f_batch, label_ids, cfg: EngineConfig):
    """Gradient pieces of the mean cross-entropy w.r.t. the learnables.

    Returns (d_res_text, d_res_cache, d_scores): the residual gradient
    splits into the text-prototype path and the cache-key path; both use
    the same upstream softmax gradient, so their sum is the full residual
    gradient.
    """
    f_batch = numkit.as_matrix(f_batch, "f_batch")
    y = np.asarray(label_ids, dtype=np.int64)
    b = f_batch.shape[0]

    w_eff = state.w + _pad_residual(state)
    zs = f_batch @ w_eff.T
    f_ref = refine.take_channels(f_batch, state.mask_idx, cfg.renormalize)
    keys = state.f_support_refined + _expand_residual(state)
    aff = cache_affinity(f_ref, keys, cfg.beta)
    logits = zs + cfg.alpha * ((aff * state.scores) @ state.labels)

    g = numkit.softmax_rows(logits)
    g[np.arange(b), y] -= 1.0
    g /= b

    # Text path: residual columns live at the mask indices of W.
    d_res_text = g.T @ f_batch[:, state.mask_idx]

    # Cache path: route the class gradient back to each entry, through the
    # exponential affinity to the keys, then collapse shots per class.
    g_entry = g @ state.labels.T                       # B x C*K
    d_scores = cfg.alpha * (g_entry * aff).sum(axis=0)
    d_keys = (cfg.alpha * cfg.beta * g_entry * state.scores * aff).T @ f_ref
    d_res_cache = d_keys.reshape(state.c, state.k, state.q).sum(axis=1)

    return d_res_text, d_res_cache, d_scores


def backward(state: TrainState, f_batch, label_ids, cfg: EngineConfig):
    """Analytic gradients of the mean cross-entropy loss.

    Returns:
        (d_res, d_scores) with shapes (C, Q) and (C*K,).  Matches central
        finite differences of :func:`forward` + :func:`cross_entropy`.
    """
    d_res_text, d_res_cache, d_scores = _grad_parts(state, f_batch, label_ids, cfg)
    return d_res_text + d_res_cache, d_scores


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine-annealed learning rate from base_lr (step 0) to 0 (final step)."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be > 0, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(state: TrainState, grads, lr_t: float, optim: OptimConfig) -> TrainState:
    """One AdamW update of both learnable tensors, in place.

    Weight decay is decoupled: parameters shrink by lr_t * wd * param
    independently of the adaptive step, which uses bias-corrected moments.
    """
    d_res, d_scores = grads
    if d_res.shape != state.res.shape or d_scores.shape != state.scores.shape:
        raise ValueError("gradient shapes do not match the state")
    t = state.step + 1
    bc1 = 1.0 - optim.beta1 ** t
    bc2 = 1.0 - optim.beta2 ** t
    for p, g, m, v in (
        (state.res, d_res, state.m_res, state.v_res),
        (state.scores, d_scores, state.m_scores, state.v_scores),
    ):
        if optim.weight_decay:
            p -= lr_t * optim.weight_decay * p
        m *= optim.beta1
        m += (1.0 - optim.beta1) * g
        v *= optim.beta2
        v += (1.0 - optim.beta2) * g * g
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + optim.eps)
    state.step = t
    return state


def frozen_checksum(state: TrainState) -> str:
    """Digest over every frozen tensor; must not change across training."""
    h = hashlib.sha256()
    for arr in (state.mask_idx, state.w, state.w_refined, state.f_support_refined, state.labels):
        h.update(arr.tobytes())
    h.update(struct.pack("<QQQQ", state.c, state.k, state.q, state.d_total))
    return h.hexdigest()


def train(
    task: FewShotTask,
    mask: refine.ChannelMask,
    cfg: EngineConfig,
    optim: OptimConfig,
) -> tuple[TrainState, list[dict]]:
    """Run the full training loop over the support set.

    Batches are sampled without replacement from a seeded shuffle each
    epoch (last short batch kept).  The history holds one row per epoch
    plus the pre-training row 0, each with the mean batch loss and
    support/test accuracy.  Frozen tensors are checksum-verified per epoch.

    Raises:
        ValueError: if the task has no support samples.
    """
    optim.validate()
    if task.k < 1 or task.support_features.shape[0] == 0:
        raise ValueError("training requires at least one support sample per class")
    state = init_state(task, mask, cfg)
    baseline = frozen_checksum(state)

    n = task.c * task.k
    y_support = task.support_class_ids()
    steps_per_epoch = math.ceil(n / optim.batch_size)
    total_steps = optim.total_steps if optim.total_steps > 0 else optim.epochs * steps_per_epoch
    rng = np.random.default_rng(optim.seed)

    def eval_row(epoch: int, loss: float) -> dict:
        support_acc = accuracy(forward(state, task.support_features, cfg), y_support)
        test_acc = (
            accuracy(forward(state, task.test_features, cfg), task.test_labels)
            if task.test_labels is not None
            else None
        )
        return {"epoch": epoch, "loss": loss, "support_acc": support_acc, "test_acc": test_acc}

    history = [eval_row(0, cross_entropy(forward(state, task.support_features, cfg), y_support))]

    for epoch in range(optim.epochs):
        perm = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * optim.batch_size : (b + 1) * optim.batch_size]
            fb = task.support_features[idx]
            yb = y_support[idx]
            losses.append(cross_entropy(forward(state, fb, cfg), yb))
            grads = backward(state, fb, yb, cfg)
            lr_t = cosine_lr(state.step, total_steps, optim.lr)
            adamw_step(state, grads, lr_t, optim)
        if frozen_checksum(state) != baseline:
            raise RuntimeError("frozen tensors changed during training")
        history.append(eval_row(epoch + 1, float(np.mean(losses))))

    return state, history


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(path, state: TrainState) -> None:
    """Serialize the learnable tensors and optimizer state.

    Layout after the magic line: u64 C, K, Q; Q u64 mask indices; then
    float64 little-endian row-major res, scores, m_res, v_res, m_scores,
    v_scores; then u64 step.
    """
    parts = [CKPT_MAGIC, struct.pack("<QQQ", state.c, state.k, state.q)]
    parts.append(state.mask_idx.astype("<u8").tobytes())
    for arr in (state.res, state.scores, state.m_res, state.v_res, state.m_scores, state.v_scores):
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    parts.append(struct.pack("<Q", state.step))
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path, task: FewShotTask, cfg: EngineConfig) -> TrainState:
    """Bind a checkpoint to a task sharing its class layout.

    The frozen context is rebuilt from ``task`` (the checkpoint stores
    only the learnables), so the task must match the checkpoint's class
    count and shot count, and every mask index must fit its width.

    Raises:
        ValueError: on class/shot/width mismatch or a malformed file.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"not a checkpoint file: {path}")
    off = len(CKPT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"checkpoint truncated: {path}")
        out = blob[off : off + n]
        off += n
        return out

    c, k, q = struct.unpack("<QQQ", take(24))
    if c != task.c:
        raise ValueError(f"checkpoint has {c} classes, task has {task.c}")
    if k != task.k:
        raise ValueError(f"checkpoint has {k} shots per class, task has {task.k}")
    raw_idx = np.frombuffer(take(8 * q), dtype="<u8")
    # range-check on the unsigned view so corrupt indices cannot wrap negative
    if q > task.d or (len(raw_idx) and raw_idx.max() >= task.d):
        raise ValueError(f"checkpoint mask does not fit a {task.d}-channel task")
    if len(np.unique(raw_idx)) != q:
        raise ValueError("checkpoint mask indices are not distinct")
    mask_idx = raw_idx.astype(np.int64)

    def take_f64(shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    res = take_f64((c, q))
    scores = take_f64(c * k)
    m_res = take_f64((c, q))
    v_res = take_f64((c, q))
    m_scores = take_f64(c * k)
    v_scores = take_f64(c * k)
    (step,) = struct.unpack("<Q", take(8))
    if off != len(blob):
        raise ValueError(f"checkpoint has trailing bytes: {path}")

    return TrainState(
        res=res,
        scores=scores,
        m_res=m_res,
        v_res=v_res,
        m_scores=m_scores,
        v_scores=v_scores,
        step=int(step),
        mask_idx=mask_idx,
        w=task.text_features.copy(),
        w_refined=refine.take_channels(task.text_features, mask_idx, cfg.renormalize),
        f_support_refined=refine.take_channels(task.support_features, mask_idx, cfg.renormalize),
        labels=task.support_labels.copy(),
        c=task.c,
        k=task.k,
        q=int(q),
        d_total=task.d,
    )
