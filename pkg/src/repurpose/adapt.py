"""Test-time adaptation of a checkpoint on one episode's support set.

Two phases:

1. Ensemble phase (only when something consumes it). ``M`` perturbed copies
   of the checkpoint take ``T`` CE + AT steps. After every round the
   members' parameter spread gives new layer stepsizes, which drive the next
   round, and adversarial inputs are collected: each member's FGSM inputs
   (EnAug) and uncertainty-scaled FGSM inputs at the checkpoint (UFGSM).
2. Final loop. ``T`` steps from the checkpoint on support CE, optionally
   plus AT on the support set and CE on the collected set, with either the
   base stepsize or the ensemble-derived layer stepsizes.

With ``lambda_at = lambda_aug = 0`` and ``lambda_alpha = 1`` this is the
plain fine-tuning (MAML meta-test) loop.

All work is vectorised over a grid of base stepsizes (:func:`adapt_grid`);
:func:`adapt` is the one-stepsize case. Different stepsizes never interact.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .adversarial import AugSet, scale_from_grads
from .modelio import Checkpoint, ModelSpec, ParamSet
from .tasks import Episode
from .tensor import (NumericError, group_accuracy, group_forward_loss, group_grad_input,
                     group_grads, group_value_and_grad)
from .uncertainty import StepsizeMap, member_std, perturb_init, train_round, usa_from_std

# BN stays frozen in the ensemble phase too whenever freeze_bn is set.
FREEZE_BN_IN_ENSEMBLE = True


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.01
    sigma: float = 0.05
    epsilon: float = 0.05
    M: int = 5
    T: int = 10
    lambda_alpha: int = 1
    lambda_at: int = 0
    lambda_aug: int = 0
    enaug: bool = False
    ufgsm: bool = False
    inverse_usa: bool = False
    inverse_ufgsm: bool = False
    fgsm_aug: bool = False          # plain FGSM at the checkpoint in place of UFGSM
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_bn: bool = False
    clip_inputs: bool = False
    seed: int = 0

    @property
    def needs_ensemble(self) -> bool:
        return self.lambda_alpha == 0 or (self.lambda_aug == 1 and (self.enaug or self.ufgsm))

    @property
    def aug_kinds(self) -> tuple[str, ...]:
        kinds = []
        if self.lambda_aug and self.enaug:
            kinds.append("enaug")
        if self.lambda_aug and self.ufgsm:
            kinds.append("fgsm" if self.fgsm_aug else "i_ufgsm" if self.inverse_ufgsm else "ufgsm")
        return tuple(kinds)

    def validate(self) -> "AdaptConfig":
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.T < 0:
            raise ConfigError("T must be nonnegative")
        if self.sigma < 0 or self.epsilon < 0:
            raise ConfigError("sigma and epsilon must be nonnegative")
        for name in ("lambda_alpha", "lambda_at", "lambda_aug"):
            if getattr(self, name) not in (0, 1):
                raise ConfigError(f"{name} must be 0 or 1")
        if self.needs_ensemble and self.M < 2:
            raise ConfigError("the ensemble phase needs M >= 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        return self

    def ensemble_key(self) -> tuple:
        """Configs with equal keys share the same ensemble trajectory."""
        return (self.sigma, self.M, self.T, self.epsilon, self.inverse_usa,
                self.freeze_bn and FREEZE_BN_IN_ENSEMBLE, self.clip_inputs, self.seed)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


PRESETS: dict[str, dict[str, Any]] = {
    "sgd": dict(lambda_alpha=1, lambda_at=0, lambda_aug=0),
    "sgd_at": dict(lambda_alpha=1, lambda_at=1, lambda_aug=0),
    "sgd_usa": dict(lambda_alpha=0, lambda_at=0, lambda_aug=0),
    "sgd_usa_ufgsm": dict(lambda_alpha=0, lambda_at=0, lambda_aug=1, ufgsm=True),
    "sgd_all": dict(lambda_alpha=0, lambda_at=1, lambda_aug=1, enaug=True, ufgsm=True),
    # controls
    "sgd_i_usa": dict(lambda_alpha=0, lambda_at=0, lambda_aug=0, inverse_usa=True),
    "sgd_usa_i_ufgsm": dict(lambda_alpha=0, lambda_at=0, lambda_aug=1, ufgsm=True,
                            inverse_ufgsm=True),
    "sgd_usa_fgsm": dict(lambda_alpha=0, lambda_at=0, lambda_aug=1, ufgsm=True, fgsm_aug=True),
}


def preset(name: str, **overrides) -> AdaptConfig:
    """Named configuration; an ``adam`` prefix (``adam_all``) selects the Adam optimizer."""
    base, opt = name, "sgd"
    if name.startswith("adam"):
        base, opt = "sgd" + name[len("adam"):], "adam"
    if base not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {preset_names()}")
    return replace(AdaptConfig(optimizer=opt, **PRESETS[base]), **overrides).validate()


def preset_names() -> list[str]:
    return list(PRESETS) + ["adam" + n[3:] for n in PRESETS]


# -- optimizers ---------------------------------------------------------------

def _expand(step: np.ndarray, t: np.ndarray) -> np.ndarray:
    return step.reshape(step.shape + (1,) * (t.ndim - step.ndim))


class SGD:
    def step(self, params: list[np.ndarray], grads: list[np.ndarray], steps: Sequence[np.ndarray]):
        return [p - _expand(s, p) * g for p, g, s in zip(params, grads, steps)]


class Adam:
    """Bias-corrected Adam; the per-tensor stepsize replaces the scalar learning rate."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads, steps):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        out = []
        for i, (p, g, s) in enumerate(zip(params, grads, steps)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            out.append(p - _expand(s, p) * mhat / (np.sqrt(vhat) + self.eps))
        return out


def make_optimizer(cfg: AdaptConfig):
    return Adam(cfg.beta1, cfg.beta2, cfg.adam_eps) if cfg.optimizer == "adam" else SGD()


def optimizer_step(state, params: ParamSet, grads: Sequence[np.ndarray],
                   stepsizes: StepsizeMap) -> ParamSet:
    """Apply one update of ``state`` (an :class:`SGD` or :class:`Adam`) with layer stepsizes."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    steps = [np.asarray(v) for v in stepsizes.values]
    return params.replace(state.step(params.tensors, list(grads), steps))


# -- results --------------------------------------------------------------------

@dataclass
class AdaptResult:
    params: ParamSet
    alpha: float
    stepsizes: StepsizeMap          # used by the final loop
    alpha_adap: StepsizeMap         # ensemble-derived (uniform alpha when no ensemble ran)
    aug_counts: dict[str, int]
    losses: list[float]             # final-loop objective before each step
    query_accuracy: float
    ensemble_ran: bool
    config: AdaptConfig | None = None

    def params_sha256(self) -> str:
        h = hashlib.sha256()
        for t in self.params.tensors:
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "config": self.config.to_dict() if self.config else None,
            "stepsizes": self.stepsizes.to_dict(),
            "alpha_adap_per_layer": self.alpha_adap.per_layer(),
            "aug_counts": self.aug_counts,
            "losses": self.losses,
            "query_accuracy": self.query_accuracy,
            "ensemble_ran": self.ensemble_ran,
            "params_sha256": self.params_sha256(),
        }


# -- ensemble phase -------------------------------------------------------------

@dataclass
class PhaseOutput:
    """Ensemble-phase products for one base stepsize."""

    alpha_adap: np.ndarray                      # per layer
    pieces: dict[str, list[tuple[int, int | None, np.ndarray]]] = field(default_factory=dict)

    def aug_set(self, kinds: Sequence[str], y: np.ndarray) -> AugSet:
        """Assemble the augmented set for ``kinds`` in round-major order."""
        aug = AugSet()
        entries = [(rnd, 0 if kind == "enaug" else 1, m if m is not None else 0, kind, m, x)
                   for kind in kinds for rnd, m, x in self.pieces.get(kind, [])]
        for rnd, _, _, kind, m, x in sorted(entries, key=lambda e: e[:3]):
            aug.add(x, y, kind, rnd, m)
        return aug


def _bn_mask_rows(mask: Sequence[bool], steps: np.ndarray) -> np.ndarray:
    steps = steps.copy()
    steps[:, np.asarray(mask, dtype=bool)] = 0.0
    return steps


def _locate_member(spec, stacked, x, y, M, exc):
    for g in range(stacked[0].shape[0]):
        try:
            group_forward_loss(spec, [t[g:g + 1] for t in stacked], x, y, input_grad=False)
        except NumericError:
            return NumericError(f"ensemble member {g % M}: {exc}")
    return exc


def ensemble_phase(spec: ModelSpec, theta0: ParamSet, support, cfg: AdaptConfig,
                   alphas: Sequence[float], kinds: Sequence[str]) -> list[PhaseOutput]:
    """Run the ensemble rounds for every base stepsize in ``alphas``; collect ``kinds``."""
    x, y = support
    x = np.asarray(x, dtype=np.float64)
    A, M, T = len(alphas), cfg.M, cfg.T
    alphas = np.asarray(alphas, dtype=np.float64)
    layer_index = theta0.layer_indices
    layers = sorted(set(layer_index))
    col = [layers.index(li) for li in layer_index]
    freeze = cfg.freeze_bn and FREEZE_BN_IN_ENSEMBLE
    outputs = [PhaseOutput(np.full(len(layers), a)) for a in alphas]
    if T == 0:
        return outputs

    members = perturb_init(theta0, M, cfg.sigma, cfg.seed).stacked()
    stacked = [np.tile(t, (A,) + (1,) * (t.ndim - 1)) for t in members]   # row a*M + m
    per_layer = np.repeat(alphas[:, None], len(layers), axis=1)

    def rows(per_layer):
        steps = np.repeat(per_layer[:, col], M, axis=0)
        return _bn_mask_rows(theta0.bn_mask, steps) if freeze else steps

    want_u = any(k in kinds for k in ("ufgsm", "i_ufgsm"))
    sign0 = None
    if want_u or "fgsm" in kinds:
        _, tape0 = group_forward_loss(spec, ParamSet.stack([theta0]), x, y)
        sign0 = np.sign(group_grad_input(tape0)[0])

    def ce_pass(stacked):
        try:
            losses, tape = group_forward_loss(spec, stacked, x, y)
        except NumericError as exc:
            raise _locate_member(spec, stacked, x, y, M, exc) from exc
        return group_grads(tape), group_grad_input(tape), losses

    first = ce_pass(stacked)
    for t in range(1, T + 1):
        try:
            stacked, xadv, _ = train_round(spec, stacked, x, y, rows(per_layer), cfg.epsilon,
                                           cfg.clip_inputs, first)
        except NumericError as exc:
            raise _locate_member(spec, stacked, x, y, M, exc) from exc
        if "enaug" in kinds:
            for a in range(A):
                for m in range(M):
                    outputs[a].pieces.setdefault("enaug", []).append((t, m, xadv[a * M + m]))
        last = t == T
        if not last or want_u:
            first = ce_pass(stacked)
        for a in range(A):
            u = [member_std(s[a * M:(a + 1) * M]) for s in stacked]
            per_layer[a] = usa_from_std(alphas[a], u, layer_index, cfg.inverse_usa)
            outputs[a].alpha_adap = per_layer[a].copy()
            if want_u:
                gx = first[1][a * M:(a + 1) * M]
                for kind, inverse in (("ufgsm", False), ("i_ufgsm", True)):
                    if kind in kinds:
                        xa = x + cfg.epsilon * scale_from_grads(gx, inverse) * sign0
                        if cfg.clip_inputs:
                            xa = np.clip(xa, 0.0, 1.0)
                        outputs[a].pieces.setdefault(kind, []).append((t, None, xa))
            if "fgsm" in kinds:
                xa = x + cfg.epsilon * sign0
                if cfg.clip_inputs:
                    xa = np.clip(xa, 0.0, 1.0)
                outputs[a].pieces.setdefault("fgsm", []).append((t, None, xa))
    return outputs


# -- final loop -------------------------------------------------------------------

def select_stepsizes(cfg: AdaptConfig, theta0: ParamSet, alpha: float,
                     alpha_adap: Sequence[float]) -> StepsizeMap:
    """``lambda_alpha * alpha + (1 - lambda_alpha) * alpha_adap``, BN zeroed when frozen."""
    if cfg.lambda_alpha == 1:
        chosen = StepsizeMap.uniform(theta0, alpha)
    else:
        chosen = StepsizeMap.from_layers(theta0, alpha_adap)
    return chosen.masked(theta0.bn_mask) if cfg.freeze_bn else chosen


def final_loop(spec: ModelSpec, theta0: ParamSet, episode: Episode, cfg: AdaptConfig,
               stepsizes: Sequence[StepsizeMap], augs: Sequence[AugSet]):
    """The ``T`` adaptation steps from the checkpoint, one group per stepsize map.

    Returns (final stacked params, per-group objective histories, query accuracies).
    """
    A = len(stepsizes)
    x, y = episode.support
    stacked = [np.tile(t[None], (A,) + (1,) * t.ndim) for t in theta0.tensors]
    steps = np.array([s.as_array() for s in stepsizes])             # (A, n_tensors)
    per_tensor = [steps[:, i] for i in range(steps.shape[1])]
    aug_x = aug_y = None
    if cfg.lambda_aug and augs and len(augs[0]):
        pairs = [a.arrays() for a in augs]
        aug_x = np.stack([p[0] for p in pairs])
        aug_y = pairs[0][1]
    opt = make_optimizer(cfg)
    history = [[] for _ in range(A)]
    for _ in range(cfg.T):
        losses, grads, gx = group_value_and_grad(spec, stacked, x, y, bool(cfg.lambda_at))
        total = losses.copy()
        if cfg.lambda_at:
            xadv = x + cfg.epsilon * np.sign(gx)
            if cfg.clip_inputs:
                xadv = np.clip(xadv, 0.0, 1.0)
            l_at, g_at, _ = group_value_and_grad(spec, stacked, xadv, y, False)
            grads = [g + h for g, h in zip(grads, g_at)]
            total += l_at
        if aug_x is not None:
            l_aug, g_aug, _ = group_value_and_grad(spec, stacked, aug_x, aug_y, False)
            grads = [g + h for g, h in zip(grads, g_aug)]
            total += l_aug
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient in final loop")
        for a in range(A):
            history[a].append(float(total[a]))
        stacked = opt.step(stacked, grads, per_tensor)
    qx, qy = episode.query
    acc = group_accuracy(spec, stacked, qx, qy) if len(qy) else np.full(A, np.nan)
    return stacked, history, acc


def _check_inputs(checkpoint: Checkpoint, episode: Episode) -> None:
    spec = checkpoint.spec
    if tuple(episode.support_x.shape[1:]) != tuple(spec.input_shape):
        raise ConfigError(f"episode inputs {episode.support_x.shape[1:]} do not match checkpoint "
                          f"input shape {tuple(spec.input_shape)}")
    if episode.n_way != spec.n_outputs:
        raise ConfigError(f"{episode.n_way}-way episode but checkpoint has {spec.n_outputs} outputs")


def adapt_grid(checkpoint: Checkpoint, episode: Episode, cfg: AdaptConfig,
               alphas: Sequence[float], phase: Sequence[PhaseOutput] | None = None
               ) -> list[AdaptResult]:
    """:func:`adapt` for every base stepsize in ``alphas`` (``cfg.alpha`` is ignored).

    ``phase`` may supply precomputed ensemble outputs from a config with the
    same :meth:`AdaptConfig.ensemble_key` that collected this config's kinds.
    """
    cfg.validate()
    for a in alphas:
        if not a > 0:
            raise ConfigError("alpha must be positive")
    _check_inputs(checkpoint, episode)
    spec, theta0 = checkpoint.spec, checkpoint.params
    kinds = cfg.aug_kinds
    ran = cfg.needs_ensemble
    if ran and phase is None:
        phase = ensemble_phase(spec, theta0, episode.support, cfg, alphas, kinds)
    elif not ran:
        phase = [PhaseOutput(np.full(theta0.n_layers, a)) for a in alphas]
    augs = [p.aug_set(kinds, episode.support_y) for p in phase]
    maps = [select_stepsizes(cfg, theta0, a, p.alpha_adap) for a, p in zip(alphas, phase)]
    stacked, history, acc = final_loop(spec, theta0, episode, cfg, maps, augs)
    results = []
    for i, a in enumerate(alphas):
        results.append(AdaptResult(
            params=theta0.replace(t[i] for t in stacked),
            alpha=float(a),
            stepsizes=maps[i],
            alpha_adap=StepsizeMap.from_layers(theta0, phase[i].alpha_adap),
            aug_counts=augs[i].counts(),
            losses=history[i],
            query_accuracy=float(acc[i]),
            ensemble_ran=ran,
            config=replace(cfg, alpha=float(a)),
        ))
    return results


def adapt(checkpoint: Checkpoint, episode: Episode, cfg: AdaptConfig) -> AdaptResult:
    """Adapt ``checkpoint`` to ``episode`` per ``cfg`` and score it on the query set."""
    return adapt_grid(checkpoint, episode, cfg, [cfg.alpha])[0]
