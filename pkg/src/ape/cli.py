"""Command-line surface: refine, infer, train, search, synth, eval.

Every command is deterministic given ``--seed`` (falling back to the
APE_SEED environment variable, then 0) and writes reports that echo the
full effective configuration.  Exit codes: 0 success, 1 runtime error,
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataio, refine, trainer
from .engine import (
    EngineConfig,
    FewShotTask,
    accuracy,
    ape_logits,
    tip_adapter_logits,
    zero_shot_logits,
)

__all__ = ["EvalReport", "MethodResult", "grid_search", "main", "main_entry"]

REPORT_HEADER = "APE-REPORT v1"


class UsageError(Exception):
    """Semantic misuse of a command; maps to exit code 2."""


@dataclass
class MethodResult:
    name: str
    params: int
    accuracy: float | None  # fraction in [0, 1], None when no labels


@dataclass
class EvalReport:
    """Per-method accuracy and parameter counts plus the run's config echo."""

    methods: list[MethodResult]
    config: dict
    wall_time_s: float
    history: list[dict] | None = None

    def render(self) -> str:
        lines = [REPORT_HEADER, ""]
        lines.append(f"{'method':<14} {'params':>10} {'accuracy%':>10}")
        for m in self.methods:
            acc = f"{100.0 * m.accuracy:10.2f}" if m.accuracy is not None else f"{'-':>10}"
            lines.append(f"{m.name:<14} {m.params:>10} {acc}")
        if self.history:
            lines.append("")
            lines.append(f"{'epoch':>5} {'loss':>12} {'support%':>9} {'test%':>9}")
            for row in self.history:
                test = f"{100.0 * row['test_acc']:9.2f}" if row["test_acc"] is not None else f"{'-':>9}"
                lines.append(
                    f"{row['epoch']:>5} {row['loss']:>12.6f} {100.0 * row['support_acc']:>9.2f} {test}"
                )
        lines.append("")
        for m in self.methods:
            if m.accuracy is not None:
                lines.append(f"accuracy.{m.name} = {100.0 * m.accuracy!r}")
            lines.append(f"params.{m.name} = {m.params}")
        for key in sorted(self.config):
            lines.append(f"config.{key} = {self.config[key]}")
        lines.append(f"wall_time_s = {self.wall_time_s:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.render(), encoding="utf-8")


def _default_seed() -> int:
    return int(os.environ.get("APE_SEED", "0"))


def _engine_config(args, q: int = 0, lam: float = 0.7) -> EngineConfig:
    cfg = EngineConfig(
        lam=lam,
        q=q,
        alpha=args.alpha,
        beta=args.beta,
        gamma=args.gamma,
        kl_sign=args.kl_sign,
        kl_temperature=args.kl_temperature,
        renormalize=not args.no_renormalize,
    )
    cfg.validate()
    return cfg


def _config_echo(cfg: EngineConfig, seed: int, **extra) -> dict:
    echo = dataclasses.asdict(cfg)
    echo["lambda"] = echo.pop("lam")
    echo["seed"] = seed
    echo.update(extra)
    return echo


def parse_grid(spec: str) -> np.ndarray:
    """Parse ``a0:a1:steps`` into a linspace; a bare number is a 1-point grid."""
    parts = spec.split(":")
    if len(parts) == 1:
        return np.array([float(parts[0])])
    if len(parts) != 3:
        raise UsageError(f"grid must look like a0:a1:steps, got {spec!r}")
    lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    if steps < 1:
        raise UsageError(f"grid {spec!r} is empty")
    return np.linspace(lo, hi, steps)


def _holdout_split(task: FewShotTask) -> FewShotTask:
    """Rebuild the task with the last shot of every class held out as the
    test split (the default validation fold for the grid search)."""
    if task.k < 2:
        raise UsageError("validation holdout needs K >= 2 (or pass --val-task)")
    keep = np.array([c * task.k + j for c in range(task.c) for j in range(task.k - 1)])
    held = np.array([c * task.k + (task.k - 1) for c in range(task.c)])
    return FewShotTask(
        text_features=task.text_features,
        support_features=task.support_features[keep],
        support_labels=np.kron(np.eye(task.c), np.ones((task.k - 1, 1))),
        test_features=task.support_features[held],
        test_labels=np.arange(task.c),
        c=task.c,
        k=task.k - 1,
        d=task.d,
    )


def grid_search(
    task: FewShotTask,
    mask: refine.ChannelMask,
    base_cfg: EngineConfig,
    alphas,
    betas,
    gammas=None,
    val_task: FewShotTask | None = None,
) -> tuple[EngineConfig, float]:
    """Exhaustive grid over alpha/beta (and optionally gamma).

    Candidates are scored on the validation split: ``val_task``'s test set
    when given, otherwise one held-out shot per class.  Ties break toward
    the smaller alpha, then beta, then gamma.

    Raises:
        UsageError: if any grid is empty.
    """
    alphas = np.sort(np.asarray(alphas, dtype=np.float64))
    betas = np.sort(np.asarray(betas, dtype=np.float64))
    gammas = np.sort(np.asarray(gammas, dtype=np.float64)) if gammas is not None else np.array([base_cfg.gamma])
    if alphas.size == 0 or betas.size == 0 or gammas.size == 0:
        raise UsageError("grid must contain at least one point")

    if val_task is not None:
        if val_task.test_labels is None:
            raise UsageError("--val-task manifest must provide test_labels")
        if val_task.c != task.c or val_task.d != task.d:
            raise UsageError(
                "--val-task must share the task's class count and feature width"
            )
        probe = FewShotTask(
            text_features=task.text_features,
            support_features=task.support_features,
            support_labels=task.support_labels,
            test_features=val_task.test_features,
            test_labels=val_task.test_labels,
            c=task.c,
            k=task.k,
            d=task.d,
        )
    else:
        probe = _holdout_split(task)

    best_cfg, best_acc = None, -1.0
    for alpha in alphas:
        for beta in betas:
            for gamma in gammas:
                cfg = replace(base_cfg, alpha=float(alpha), beta=float(beta), gamma=float(gamma))
                acc = accuracy(ape_logits(probe, mask, cfg), probe.test_labels)
                if acc > best_acc:
                    best_cfg, best_acc = cfg, acc
    return best_cfg, best_acc


def cmd_refine(args) -> int:
    task = dataio.load_task(args.task)
    if not 1 <= args.q <= task.d:
        raise UsageError(f"--q must lie in [1, {task.d}], got {args.q}")
    sim = refine.inter_class_similarity(task.text_features)
    var = refine.inter_class_variance(task.text_features)
    mask = refine.select_channels(sim, var, args.lam, args.q)
    refine.save_mask(args.out, mask, args.lam)
    order = np.argsort(mask.scores, kind="stable")
    print(f"selected {mask.q}/{task.d} channels (lambda={args.lam}) -> {args.out}")
    print("lowest-score channels (kept first):")
    for i in order[:10]:
        print(f"  {i:>5}  {mask.scores[i]: .6e}")
    print("highest-score channels (dropped first):")
    for i in order[::-1][:10]:
        print(f"  {i:>5}  {mask.scores[i]: .6e}")
    return 0


def _infer_methods(task: FewShotTask, mask: refine.ChannelMask, cfg: EngineConfig):
    zs = zero_shot_logits(task.test_features, task.text_features)
    tip = tip_adapter_logits(task, cfg.alpha, cfg.beta)
    ape = ape_logits(task, mask, cfg)
    return zs, tip, ape


def cmd_infer(args) -> int:
    started = time.perf_counter()
    task = dataio.load_task(args.task)
    mask, mask_lam = refine.load_mask(args.mask)
    cfg = _engine_config(args, q=mask.q, lam=mask_lam)
    zs, tip, ape = _infer_methods(task, mask, cfg)
    if task.test_labels is None:
        logits_path = f"{args.report}.logits.apef"
        dataio.write_matrix(logits_path, ape)
        methods = [
            MethodResult("zero_shot", 0, None),
            MethodResult("tip_adapter", 0, None),
            MethodResult("ape", 0, None),
        ]
        print(f"task has no test labels; wrote logits to {logits_path}")
    else:
        methods = [
            MethodResult("zero_shot", 0, accuracy(zs, task.test_labels)),
            MethodResult("tip_adapter", 0, accuracy(tip, task.test_labels)),
            MethodResult("ape", 0, accuracy(ape, task.test_labels)),
        ]
    report = EvalReport(
        methods=methods,
        config=_config_echo(cfg, args.seed, task=args.task, mask=args.mask),
        wall_time_s=time.perf_counter() - started,
    )
    report.write(args.report)
    print(report.render(), end="")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    task = dataio.load_task(args.task)
    mask, mask_lam = refine.load_mask(args.mask)
    cfg = _engine_config(args, q=mask.q, lam=mask_lam)
    optim = trainer.OptimConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    state, history = trainer.train(task, mask, cfg, optim)
    trainer.save_checkpoint(args.out, state)

    methods = []
    if task.test_labels is not None:
        zs, _, ape = _infer_methods(task, mask, cfg)
        ape_t = trainer.forward(state, task.test_features, cfg)
        methods = [
            MethodResult("zero_shot", 0, accuracy(zs, task.test_labels)),
            MethodResult("ape", 0, accuracy(ape, task.test_labels)),
            MethodResult("ape_t", state.param_count(), accuracy(ape_t, task.test_labels)),
        ]
    report = EvalReport(
        methods=methods,
        config=_config_echo(
            cfg,
            args.seed,
            task=args.task,
            mask=args.mask,
            lr=optim.lr,
            weight_decay=optim.weight_decay,
            epochs=optim.epochs,
            batch_size=optim.batch_size,
        ),
        wall_time_s=time.perf_counter() - started,
        history=history,
    )
    report.write(args.report)
    print(report.render(), end="")
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_search(args) -> int:
    task = dataio.load_task(args.task)
    mask, mask_lam = refine.load_mask(args.mask)
    cfg = _engine_config(args, q=mask.q, lam=mask_lam)
    val_task = dataio.load_task(args.val_task) if args.val_task else None
    gammas = parse_grid(args.gamma_grid) if args.gamma_grid else None
    best, best_acc = grid_search(
        task,
        mask,
        cfg,
        parse_grid(args.alpha_grid),
        parse_grid(args.beta_grid),
        gammas,
        val_task,
    )
    print(f"best.alpha = {best.alpha!r}")
    print(f"best.beta = {best.beta!r}")
    print(f"best.gamma = {best.gamma!r}")
    print(f"best.val_accuracy = {100.0 * best_acc!r}")
    if args.report:
        lines = [
            REPORT_HEADER,
            "",
            f"best.alpha = {best.alpha!r}",
            f"best.beta = {best.beta!r}",
            f"best.gamma = {best.gamma!r}",
            f"best.val_accuracy = {100.0 * best_acc!r}",
        ]
        for key, value in sorted(_config_echo(cfg, args.seed, task=args.task, mask=args.mask).items()):
            lines.append(f"config.{key} = {value}")
        Path(args.report).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_synth(args) -> int:
    task = dataio.gen_synthetic(args.c, args.k, args.d, args.n_test, args.sigma, args.seed)
    manifest = dataio.save_task(task, args.out)
    print(f"manifest -> {manifest}")
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    task = dataio.load_task(args.task)
    cfg = _engine_config(args)
    try:
        state = trainer.load_checkpoint(args.ckpt, task, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if task.test_labels is None:
        raise UsageError("eval task must provide test_labels")
    logits = trainer.forward(state, task.test_features, cfg)
    report = EvalReport(
        methods=[MethodResult("ape_t", state.param_count(), accuracy(logits, task.test_labels))],
        config=_config_echo(cfg, args.seed, task=args.task, ckpt=args.ckpt),
        wall_time_s=time.perf_counter() - started,
    )
    report.write(args.report)
    print(report.render(), end="")
    return 0


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=1.0, help="cache term weight")
    p.add_argument("--beta", type=float, default=5.5, help="affinity sharpness")
    p.add_argument("--gamma", type=float, default=0.2, help="cache score smoothness")
    p.add_argument("--kl-sign", type=int, choices=(1, -1), default=1, dest="kl_sign")
    p.add_argument("--kl-temperature", type=float, default=1.0, dest="kl_temperature")
    p.add_argument("--no-renormalize", action="store_true",
                   help="skip re-normalizing rows after channel masking")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ape",
        description="Few-shot classification over precomputed embedding matrices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", help="score channels and write a mask file")
    p.add_argument("--task", required=True)
    p.add_argument("--lambda", type=float, default=0.7, dest="lam",
                   help="similarity/variance blend in [0, 1]")
    p.add_argument("--q", type=int, required=True,
                   help="number of channels to keep (500-900 is typical for "
                        "1024-channel encoders)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("infer", help="training-free evaluation of a task")
    p.add_argument("--task", required=True)
    p.add_argument("--mask", required=True)
    _add_engine_flags(p)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="train category residuals and cache scores")
    p.add_argument("--task", required=True)
    p.add_argument("--mask", required=True)
    _add_engine_flags(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01, dest="weight_decay")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=256, dest="batch_size")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="grid-search alpha/beta (and gamma)")
    p.add_argument("--task", required=True)
    p.add_argument("--mask", required=True)
    _add_engine_flags(p)
    p.add_argument("--alpha-grid", required=True, dest="alpha_grid", help="a0:a1:steps")
    p.add_argument("--beta-grid", required=True, dest="beta_grid", help="b0:b1:steps")
    p.add_argument("--gamma-grid", dest="gamma_grid", help="g0:g1:steps")
    p.add_argument("--val-task", dest="val_task",
                   help="manifest whose test split scores the grid "
                        "(default: hold out one shot per class)")
    p.add_argument("--report")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("synth", help="generate a synthetic task")
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True, dest="n_test",
                   help="test samples per class")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    _add_engine_flags(p)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    for sp in sub.choices.values():
        sp.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: APE_SEED env var, then 0)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
