"""First-order MAML meta-training at desk scale.

Each iteration samples a meta-batch of base-domain episodes, runs a few
inner SGD steps on every support set (the tasks are evaluated together,
one group per task), takes the query-loss gradient at the adapted weights,
and moves the initialisation with Adam along their mean. Gradients through
the inner loop are not propagated (first-order MAML).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .adapt import Adam
from .modelio import Checkpoint, ModelSpec, ParamSet, init_params
from .tasks import DomainParams, Episode, episode_seed, sample_episode, stream
from .tensor import NumericError, group_accuracy, group_forward_loss, group_grads


class MetaTrainDivergence(NumericError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"meta-training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class MetaTrainConfig:
    inner_lr: float = 0.1
    inner_steps: int = 5
    outer_lr: float = 0.003
    meta_batch: int = 4
    iterations: int = 2000
    eval_every: int = 200
    val_episodes: int = 100
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 10
    seed: int = 0

    def validate(self) -> "MetaTrainConfig":
        positive = ("inner_lr", "inner_steps", "outer_lr", "meta_batch", "eval_every",
                    "val_episodes", "k_shot", "q_per_class")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if 0 < self.iterations < self.eval_every:
            raise ValueError("iterations must be at least eval_every")
        if self.n_way < 2:
            raise ValueError("n_way must be at least 2")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HistoryEntry:
    iteration: int
    checkpoint: Checkpoint
    val_accuracy: float
    train_accuracy: float          # mean post-adaptation query accuracy since the previous entry


def _stack_episodes(episodes: Sequence[Episode]):
    sx = np.stack([e.support_x for e in episodes])
    sy = np.stack([e.support_y for e in episodes])
    qx = np.stack([e.query_x for e in episodes])
    qy = np.stack([e.query_y for e in episodes])
    return sx, sy, qx, qy


def inner_adapt(spec: ModelSpec, params: ParamSet, sx, sy, lr: float, steps: int) -> list[np.ndarray]:
    """Plain SGD on each group's support CE, starting every group from ``params``."""
    G = sx.shape[0]
    stacked = [np.repeat(t[None], G, axis=0) for t in params.tensors]
    for _ in range(steps):
        _, tape = group_forward_loss(spec, stacked, sx, sy, input_grad=False)
        stacked = [t - lr * g for t, g in zip(stacked, group_grads(tape))]
    return stacked


def evaluate(spec: ModelSpec, params: ParamSet, episodes: Sequence[Episode], lr: float,
             steps: int, chunk: int = 25) -> float:
    """Mean query accuracy after ``steps`` inner SGD steps, over ``episodes``."""
    accs = []
    for i in range(0, len(episodes), chunk):
        sx, sy, qx, qy = _stack_episodes(episodes[i:i + chunk])
        adapted = inner_adapt(spec, params, sx, sy, lr, steps)
        accs.append(group_accuracy(spec, adapted, qx, qy))
    return float(np.mean(np.concatenate(accs)))


def validation_episodes(domain: DomainParams, cfg: MetaTrainConfig) -> list[Episode]:
    return [sample_episode(domain, cfg.n_way, cfg.k_shot, cfg.q_per_class,
                           episode_seed(cfg.seed, "meta-val", i)) for i in range(cfg.val_episodes)]


def maml_train(spec: ModelSpec, domain: DomainParams, cfg: MetaTrainConfig,
               on_iteration: Callable[[int, float, float], None] | None = None,
               init: ParamSet | None = None) -> list[HistoryEntry]:
    """Meta-train from a seeded random init; one history entry at 0 and every ``eval_every``.

    ``on_iteration(iteration, meta_loss, meta_accuracy)`` is called after each
    outer step with the meta-batch's post-adaptation query loss and accuracy.
    """
    cfg.validate()
    if spec.n_outputs != cfg.n_way:
        raise ValueError(f"spec has {spec.n_outputs} outputs but n_way={cfg.n_way}")
    params = init if init is not None else init_params(spec, stream(cfg.seed, "meta-init"))
    params.check(spec)
    val = validation_episodes(domain, cfg)
    opt = Adam()
    lr = np.asarray(cfg.outer_lr)

    def entry(it: int, train_acc: float) -> HistoryEntry:
        try:
            acc = evaluate(spec, params, val, cfg.inner_lr, cfg.inner_steps)
        except NumericError as exc:
            raise MetaTrainDivergence(it, str(exc)) from exc
        meta = {"iteration": it, "val_accuracy": acc, "train_accuracy": train_acc,
                "seed": cfg.seed, "metatrain": cfg.to_dict(), "domain": domain.to_dict()}
        return HistoryEntry(it, Checkpoint(spec, params.copy(), meta), acc, train_acc)

    history = [entry(0, math.nan)]
    recent: list[float] = []
    for it in range(1, cfg.iterations + 1):
        episodes = [sample_episode(domain, cfg.n_way, cfg.k_shot, cfg.q_per_class,
                                   episode_seed(cfg.seed, "meta-train", (it - 1) * cfg.meta_batch + b))
                    for b in range(cfg.meta_batch)]
        sx, sy, qx, qy = _stack_episodes(episodes)
        try:
            adapted = inner_adapt(spec, params, sx, sy, cfg.inner_lr, cfg.inner_steps)
            losses, tape = group_forward_loss(spec, adapted, qx, qy, input_grad=False)
        except NumericError as exc:
            raise MetaTrainDivergence(it, str(exc)) from exc
        # Fixed task order: sum along the group axis then divide.
        meta_grad = [g.sum(axis=0) / cfg.meta_batch for g in group_grads(tape)]
        if not all(np.all(np.isfinite(g)) for g in meta_grad):
            raise MetaTrainDivergence(it, "non-finite meta-gradient")
        params = params.replace(opt.step(params.tensors, meta_grad, [lr] * len(meta_grad)))
        acc = float(np.mean(group_accuracy(spec, adapted, qx, qy)))
        recent.append(acc)
        if on_iteration is not None:
            on_iteration(it, float(losses.mean()), acc)
        if it % cfg.eval_every == 0:
            history.append(entry(it, float(np.mean(recent))))
            recent = []
    return history


def select_checkpoint(history: Sequence[HistoryEntry], policy: str = "best_validation") -> HistoryEntry:
    """``best_validation``: highest val accuracy, earliest on ties. ``last``: final entry."""
    if not history:
        raise ValueError("empty history")
    if policy == "last":
        return history[-1]
    if policy != "best_validation":
        raise ValueError(f"unknown policy {policy!r}")
    best = 0
    for i, h in enumerate(history):
        if h.val_accuracy > history[best].val_accuracy:
            best = i
    return history[best]
