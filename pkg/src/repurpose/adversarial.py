"""FGSM, uncertainty-scaled FGSM and the adversarial cross-entropy.

Input gradients are gradients of the batch-mean loss with respect to the
batch (batch norm couples the examples). The 1/N factor is common to every
member and every component, so it changes neither signs nor min-max
normalised spreads.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .modelio import ModelSpec, ParamSet
from .tensor import forward_loss, grad_input, group_forward_loss, group_grad_input
from .uncertainty import Ensemble, member_std

log = logging.getLogger(__name__)

PROVENANCES = ("enaug", "ufgsm", "i_ufgsm", "fgsm")


def fgsm(spec: ModelSpec, params: ParamSet, x, y, epsilon: float, clip: bool = False) -> np.ndarray:
    """``x + epsilon * sign(grad_x loss)``."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    _, tape = forward_loss(spec, params, x, y)
    xa = np.asarray(x, dtype=np.float64) + epsilon * np.sign(grad_input(tape))
    return np.clip(xa, 0.0, 1.0) if clip else xa


def min_max_norm(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rescale each example (leading axis) to [0, 1] over all its components.

    Returns the normalised array and a boolean mask of degenerate examples
    (max == min), whose normalised value is defined as 1 everywhere.
    """
    flat = u.reshape(u.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    degenerate = span[:, 0] == 0
    out = np.ones_like(flat)
    ok = ~degenerate
    out[ok] = (flat[ok] - lo[ok]) / span[ok]
    return out.reshape(u.shape), degenerate


def scale_from_grads(member_grads: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Per-component perturbation scale from (M, N, ...) member input gradients."""
    u, degenerate = min_max_norm(member_std(member_grads))
    if inverse:
        u = np.where(degenerate.reshape((-1,) + (1,) * (u.ndim - 1)), 1.0, 1.0 - u)
    if degenerate.any():
        log.debug("min-max normalisation degenerate for %d example(s); using plain FGSM",
                  int(degenerate.sum()))
    return u


def ufgsm_from_grads(x, member_grads, theta0_grad, epsilon: float, inverse: bool = False,
                     clip: bool = False) -> np.ndarray:
    u = scale_from_grads(member_grads, inverse)
    xa = np.asarray(x, dtype=np.float64) + epsilon * u * np.sign(theta0_grad)
    return np.clip(xa, 0.0, 1.0) if clip else xa


def ufgsm(spec: ModelSpec, theta0: ParamSet, ens: Ensemble, x, y, epsilon: float,
          inverse: bool = False, clip: bool = False) -> np.ndarray:
    """FGSM at ``theta0`` scaled by the normalised spread of the members' input gradients."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    _, tape = group_forward_loss(spec, ens.stacked(), x, y)
    member_grads = group_grad_input(tape)
    _, tape0 = forward_loss(spec, theta0, x, y)
    return ufgsm_from_grads(x, member_grads, grad_input(tape0), epsilon, inverse, clip)


def at_loss(spec: ModelSpec, params: ParamSet, support, epsilon: float) -> float:
    """Mean cross-entropy on FGSM versions of ``support`` generated at ``params``."""
    x, y = support
    return forward_loss(spec, params, fgsm(spec, params, x, y, epsilon), y, input_grad=False)[0]


@dataclass
class AugSet:
    """Accumulated adversarial inputs with their provenance."""

    xs: list[np.ndarray] = field(default_factory=list)
    ys: list[np.ndarray] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)
    members: list[int | None] = field(default_factory=list)

    def add(self, x: np.ndarray, y: np.ndarray, provenance: str, round_: int,
            member: int | None = None) -> None:
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        x = np.asarray(x, dtype=np.float64)
        self.xs.append(x)
        self.ys.append(np.asarray(y, dtype=np.int64))
        self.provenance += [provenance] * len(x)
        self.rounds += [round_] * len(x)
        self.members += [member] * len(x)

    def __len__(self) -> int:
        return len(self.provenance)

    def counts(self) -> dict[str, int]:
        c = Counter(self.provenance)
        return {p: c.get(p, 0) for p in PROVENANCES}

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.xs), np.concatenate(self.ys)
