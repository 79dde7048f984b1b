"""Deep ensembles on the support set and uncertainty-based layer stepsizes.

The ensemble is a set of multiplicative perturbations of the checkpoint,
each trained on the support set with cross-entropy plus FGSM adversarial
cross-entropy. The spread of the members' parameters is then turned into
one stepsize per layer: layers whose parameters disagree more get smaller
steps, and the stepsizes are rescaled so that their layer mean is the base
stepsize.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .modelio import ModelSpec, ParamSet
from .tasks import stream
from .tensor import NumericError, group_forward_loss, group_grad_input, group_grads


@dataclass
class Ensemble:
    members: list[ParamSet]

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def template(self) -> ParamSet:
        return self.members[0]

    def stacked(self) -> list[np.ndarray]:
        return ParamSet.stack(self.members)

    @classmethod
    def from_stacked(cls, template: ParamSet, stacked: Sequence[np.ndarray]) -> "Ensemble":
        return cls(template.unstack(stacked))


@dataclass(frozen=True)
class StepsizeMap:
    """One nonnegative stepsize per parameter tensor, aligned with ParamSet order."""

    names: tuple[str, ...]
    layer_index: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if any(v < 0 for v in self.values):
            raise ValueError("stepsizes must be nonnegative")

    @classmethod
    def uniform(cls, params: ParamSet, alpha: float) -> "StepsizeMap":
        return cls(tuple(params.names), tuple(params.layer_indices), (float(alpha),) * len(params))

    @classmethod
    def from_layers(cls, params: ParamSet, per_layer: Sequence[float]) -> "StepsizeMap":
        order = sorted(set(params.layer_indices))
        lookup = {li: float(v) for li, v in zip(order, per_layer)}
        return cls(tuple(params.names), tuple(params.layer_indices),
                   tuple(lookup[li] for li in params.layer_indices))

    def per_layer(self) -> list[float]:
        seen: dict[int, float] = {}
        for li, v in zip(self.layer_index, self.values):
            seen.setdefault(li, v)
        return [seen[li] for li in sorted(seen)]

    def masked(self, mask: Sequence[bool]) -> "StepsizeMap":
        """Zero the stepsize wherever ``mask`` is true (e.g. BN entries)."""
        return StepsizeMap(self.names, self.layer_index,
                           tuple(0.0 if m else v for v, m in zip(self.values, mask)))

    def as_array(self) -> np.ndarray:
        return np.array(self.values)

    def to_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values))


def perturb_init(theta0: ParamSet, M: int, sigma: float, seed: int) -> Ensemble:
    """Members ``theta0 * (1 + N(0, sigma^2))``, one independent noise draw per component."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if M < 2:
        raise ValueError("an ensemble needs at least two members")
    members = []
    for m in range(M):
        rng = stream(seed, "ensemble-init", m)
        members.append(theta0.replace(
            t * (1.0 + sigma * rng.standard_normal(t.shape)) for t in theta0.tensors))
    return Ensemble(members)


def _sign_step(x, gx, epsilon, clip):
    xa = x + epsilon * np.sign(gx)
    return np.clip(xa, 0.0, 1.0) if clip else xa


def train_round(spec: ModelSpec, stacked: list[np.ndarray], x, y, step: np.ndarray,
                epsilon: float, clip: bool = False, first=None):
    """One CE + AT step for every group of ``stacked``.

    ``step`` is a (G, n_tensors) array of stepsizes. ``first`` may carry the
    (grads, input grads) of a cross-entropy pass at the current parameters.
    Returns (new stacked params, FGSM inputs, CE losses).
    """
    if first is None:
        losses, tape = group_forward_loss(spec, stacked, x, y)
        first = (group_grads(tape), group_grad_input(tape), losses)
    g_ce, gx, losses = first
    xadv = _sign_step(np.broadcast_to(x, gx.shape), gx, epsilon, clip)
    _, tape_at = group_forward_loss(spec, stacked, xadv, y, input_grad=False)
    g_at = group_grads(tape_at)
    new = []
    for i, (t, a, b) in enumerate(zip(stacked, g_ce, g_at)):
        s = step[:, i].reshape((-1,) + (1,) * (t.ndim - 1))
        new.append(t - s * (a + b))
    return new, xadv, losses


def ensemble_step(ens: Ensemble, spec: ModelSpec, support, stepsizes: StepsizeMap,
                  epsilon: float, clip: bool = False) -> tuple[Ensemble, list[np.ndarray]]:
    """One SGD step per member on CE + AT; also returns each member's FGSM support inputs."""
    x, y = support
    step = np.tile(stepsizes.as_array(), (ens.M, 1))
    try:
        new, xadv, _ = train_round(spec, ens.stacked(), x, y, step, epsilon, clip)
    except NumericError as exc:
        for m, member in enumerate(ens.members):
            try:
                group_forward_loss(spec, ParamSet.stack([member]), x, y, input_grad=False)
            except NumericError:
                raise NumericError(f"ensemble member {m}: {exc}") from exc
        raise
    return Ensemble.from_stacked(ens.template, new), list(xadv)


def member_std(stacked: np.ndarray) -> np.ndarray:
    """Population std over the leading (member) axis.

    Deviations are taken from the first member first; the std is unchanged
    mathematically, and identical members give exactly zero.
    """
    return np.std(stacked - stacked[:1], axis=0)


def param_std(ens: Ensemble) -> list[np.ndarray]:
    """Component-wise population standard deviation across members (divides by M)."""
    return [member_std(t) for t in ens.stacked()]


def usa_from_std(alpha: float, u: Sequence[np.ndarray], layer_index: Sequence[int],
                 inverse: bool = False) -> np.ndarray:
    """Per-layer stepsizes (in sorted layer order) from per-tensor spreads ``u``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    layers = sorted(set(layer_index))
    hi = max(float(t.max()) for t in u)
    lo = min(float(t.min()) for t in u)
    if hi == 0.0:
        return np.full(len(layers), float(alpha))
    sums = dict.fromkeys(layers, 0.0)
    counts = dict.fromkeys(layers, 0)
    for t, li in zip(u, layer_index):
        c = t if inverse else hi - t + lo
        sums[li] += float(c.sum())
        counts[li] += t.size
    mu = np.array([sums[li] / counts[li] for li in layers])
    return alpha * mu / mu.mean()


def usa(alpha: float, ens: Ensemble, inverse: bool = False) -> StepsizeMap:
    """Layer-wise stepsizes anti-monotone in parameter spread (``inverse``: monotone)."""
    t = ens.template
    per_layer = usa_from_std(alpha, param_std(ens), t.layer_indices, inverse)
    return StepsizeMap.from_layers(t, per_layer)


def aug_count(T: int, M: int, n_support: int, enaug: bool, ufgsm: bool) -> int:
    """Size of the augmented set after ``T`` ensemble rounds."""
    return T * M * n_support * int(enaug) + T * n_support * int(ufgsm)
