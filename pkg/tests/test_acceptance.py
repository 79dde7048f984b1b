"""The eleven acceptance criteria, each at its stated tolerance.

One PASS/FAIL line per criterion is printed in the terminal summary. The
desk-scale sweep behind criteria 9 and 10 meta-trains a checkpoint and runs
for about an hour on one CPU core.
"""
import json
import time

import numpy as np
import pytest

from helpers import (fd_input_grad, fd_param_grads, plain_finetune, random_params, rel_err,
                     tiny_conv, tiny_mlp)
from oracles.hand_oracles import layer_stepsizes, scaled_sign_step
from repurpose.adapt import adapt, preset, preset_names
from repurpose.adversarial import at_loss, fgsm, ufgsm, ufgsm_from_grads
from repurpose.bench import SweepConfig, curve_metrics, metrics, sign_test, sweep
from repurpose.cli import main
from repurpose.metatrain import MetaTrainConfig, maml_train, select_checkpoint
from repurpose.modelio import Checkpoint, ParamEntry, ParamSet, conv_spec, mlp_spec
from repurpose.tasks import DomainParams, sample_episode
from repurpose.tensor import forward_loss, grad_input, grad_params
from repurpose.uncertainty import Ensemble, param_std, perturb_init, usa, usa_from_std

# Outputs of tests/oracles/hand_oracles.py, frozen before the package was built.
ORACLE_USA = [0.012, 0.008]
ORACLE_UFGSM = [0.5, 0.525, 0.45]
# Storing x + delta in floating point can move it by half an ulp of x.
ROUNDING = 4 * np.finfo(float).eps

DESK_PRESETS = ["sgd", "sgd_all", "sgd_usa", "sgd_i_usa", "sgd_usa_ufgsm", "sgd_usa_i_ufgsm"]
DESK_SEEDS = list(range(10))


def random_checkpoint(rng):
    spec = conv_spec() if rng.random() < 0.5 else mlp_spec()
    return Checkpoint(spec, random_params(spec, rng, scale=float(rng.uniform(0.5, 1.5))))


def test_c01_vanilla_reduction(criterion):
    start, worst = time.perf_counter(), {"sgd": 0.0, "adam": 0.0}
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        ck = random_checkpoint(rng)
        ep = sample_episode(DomainParams(), 5, int(rng.integers(1, 4)), 5, int(rng.integers(2 ** 31)))
        alpha = float(10 ** rng.uniform(-4, -1))
        for opt in worst:
            r = adapt(ck, ep, preset("sgd", alpha=alpha, optimizer=opt))
            ref = plain_finetune(ck.spec, ck.params, *ep.support, alpha, r.config.T, opt)
            diff = max(float(np.max(np.abs(a - b))) for a, b in zip(r.params.tensors, ref))
            worst[opt] = max(worst[opt], diff)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-12 and elapsed < 60
    criterion(1, ok, f"max |diff| sgd {worst['sgd']:.1e}, adam {worst['adam']:.1e}; {elapsed:.1f}s")


def test_c02_usa_correctness(criterion):
    start, failures = time.perf_counter(), []
    for i in range(100):
        rng = np.random.default_rng(2000 + i)
        ck = random_checkpoint(rng)
        ens = perturb_init(ck.params, int(rng.integers(2, 6)), float(rng.uniform(0.01, 0.2)), i)
        alpha, c = float(10 ** rng.uniform(-4, 0)), float(rng.uniform(0.1, 10))
        layer_mean = np.zeros(ck.params.n_layers)
        counts = np.zeros(ck.params.n_layers)
        for e, u in zip(ck.params, param_std(ens)):
            layer_mean[e.layer_index] += u.sum()
            counts[e.layer_index] += u.size
        layer_mean /= counts
        for inverse in (False, True):
            a = np.array(usa(alpha, ens, inverse).per_layer())
            if abs(a.mean() - alpha) > 1e-9 * alpha:
                failures.append(f"ensemble {i}: mean {a.mean()} != {alpha}")
            # Forward: the largest stepsize goes to the least spread layer.
            ranked = np.argsort(a) if inverse else np.argsort(-a)
            if list(ranked) != list(np.argsort(layer_mean)):
                failures.append(f"ensemble {i}: ranking ({'inverse' if inverse else 'forward'})")
            scaled = np.array(usa(c * alpha, ens, inverse).per_layer())
            if np.max(np.abs(scaled - c * a)) > 1e-12 * max(1.0, np.max(np.abs(c * a))):
                failures.append(f"ensemble {i}: scaling")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    criterion(2, ok, f"{len(failures)} failures over 100 ensembles; {elapsed:.1f}s"
              + (f"; first: {failures[0]}" if failures else ""))


def test_c03_hand_oracles(criterion):
    from fractions import Fraction as F
    usa_ours = usa_from_std(0.01, [np.array([0.10, 0.30]), np.array([0.20, 0.40])], [0, 1])
    x = np.full((1, 1, 1, 3), 0.5)
    u = np.array([[[[0.0, 0.2, 0.4]]]])
    sign = np.array([1.0, 1.0, -1.0]).reshape(x.shape)
    ufgsm_ours = ufgsm_from_grads(x, np.concatenate([-u, u]), sign, 0.05).ravel()
    # The frozen constants still agree with the exact-arithmetic oracle.
    exact_usa = [float(v) for v in layer_stepsizes(F("0.01"), [[F("0.10"), F("0.30")],
                                                              [F("0.20"), F("0.40")]])]
    exact_ufgsm = [float(v) for v in scaled_sign_step([F("0.5")] * 3, [F(0), F("0.2"), F("0.4")],
                                                      [1, 1, -1], F("0.05"))]
    d_usa = float(np.max(np.abs(usa_ours - ORACLE_USA)))
    d_ufgsm = float(np.max(np.abs(ufgsm_ours - ORACLE_UFGSM)))
    ok = d_usa <= 1e-15 and d_ufgsm <= 1e-15 and exact_usa == ORACLE_USA and exact_ufgsm == ORACLE_UFGSM
    criterion(3, ok, f"USA {usa_ours.tolist()} (|d| {d_usa:.0e}), UFGSM {ufgsm_ours.tolist()} "
                     f"(|d| {d_ufgsm:.0e})")


def test_c04_gradient_fidelity(criterion):
    start, worst = time.perf_counter(), 0.0
    for i in range(50):
        rng = np.random.default_rng(4000 + i)
        spec = tiny_conv() if i % 2 == 0 else tiny_mlp()
        p = random_params(spec, rng)
        x = rng.random((4,) + spec.input_shape)
        y = rng.integers(0, spec.n_outputs, 4)
        _, tape = forward_loss(spec, p, x, y)
        ga = np.concatenate([g.ravel() for g in grad_params(tape)])
        gn = np.concatenate([g.ravel() for g in fd_param_grads(spec, p, x, y)])
        worst = max(worst, rel_err(ga, gn), rel_err(grad_input(tape), fd_input_grad(spec, p, x, y)))
    elapsed = time.perf_counter() - start
    criterion(4, worst <= 1e-3 and elapsed < 300,
              f"worst relative error {worst:.1e} over 50 nets; {elapsed:.1f}s")


def test_c05_adversarial_bounds(criterion):
    rng = np.random.default_rng(5)
    spec = tiny_conv()
    p = random_params(spec, rng)
    ens = perturb_init(p, 5, 0.1, seed=5)
    x = rng.random((1000,) + spec.input_shape)
    y = rng.integers(0, spec.n_outputs, 1000)
    eps = 0.05
    bounds = {"fgsm": fgsm(spec, p, x, y, eps), "ufgsm": ufgsm(spec, p, ens, x, y, eps),
              "i_ufgsm": ufgsm(spec, p, ens, x, y, eps, inverse=True)}
    worst = max(float(np.max(np.abs(v - x))) for v in bounds.values())
    same = Ensemble([p, p.copy(), p.copy()])
    degenerate = all(ufgsm(spec, p, same, x[:50], y[:50], eps, inv).tobytes()
                     == fgsm(spec, p, x[:50], y[:50], eps).tobytes() for inv in (False, True))
    at0 = at_loss(spec, p, (x, y), 0.0) == forward_loss(spec, p, x, y)[0]
    ok = worst <= eps + ROUNDING and degenerate and at0
    criterion(5, ok, f"max |x'-x| = {worst!r} (eps {eps}); degenerate UFGSM == FGSM: {degenerate}; "
                     f"at_loss(0) == CE: {at0}")


def test_c06_ensemble_init_statistics(criterion):
    rng = np.random.default_rng(6)
    values = rng.uniform(0.5, 2.0, 200_000)
    values[::10] = 0.0
    theta = ParamSet([ParamEntry("dense0.weight", 0, values)])
    ens = perturb_init(theta, 3, 0.05, seed=6)
    nz = values != 0
    ratios = np.concatenate([m.tensors[0][nz] / values[nz] - 1 for m in ens.members])
    zeros_kept = all(np.all(m.tensors[0][~nz] == 0) for m in ens.members)
    std = float(np.std(ratios))
    ok = 0.045 <= std <= 0.055 and zeros_kept and nz.sum() >= 100_000
    criterion(6, ok, f"std {std:.5f} over {nz.sum()} components; zeros kept: {zeros_kept}")


def test_c07_bn_freezing(criterion):
    rng = np.random.default_rng(7)
    spec = conv_spec()
    ck = Checkpoint(spec, random_params(spec, rng))
    ep = sample_episode(DomainParams(), 5, 1, 3, 7)
    names = preset_names()
    moved = []
    for name in names:
        r = adapt(ck, ep, preset(name, freeze_bn=True, M=3, T=3))
        if any(t.tobytes() != e.tensor.tobytes() for e, t in zip(ck.params, r.params.tensors) if e.is_bn):
            moved.append(name)
    criterion(7, not moved, f"{len(names)} presets; BN moved in: {moved or 'none'}")


def test_c08_metrics_arithmetic(criterion):
    example = curve_metrics([10, 20, 30, 40, 50])
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(1000):
        curve = rng.uniform(0, 100, int(rng.integers(1, 40)))
        m = curve_metrics(curve)
        bad += not (m["top1"] >= m["top40"] >= m["all"])
    ok = example == {"all": 30.0, "top1": 50.0, "top40": 45.0} and bad == 0
    criterion(8, ok, f"example {example}; ordering violations {bad}/1000")


@pytest.fixture(scope="module")
def desk_sweep():
    start = time.perf_counter()
    history = maml_train(conv_spec(), DomainParams(), MetaTrainConfig(iterations=2000))
    chosen = select_checkpoint(history)
    trained = time.perf_counter()
    cfg = SweepConfig(presets=DESK_PRESETS, points=15, episodes=20, shifts={"shift1": 1.0},
                      seeds=DESK_SEEDS)
    table = sweep(chosen.checkpoint, cfg)
    report = metrics(table)
    timing = f"meta-train {trained - start:.0f}s, sweep {time.perf_counter() - trained:.0f}s"
    return report, chosen, timing


def per_seed(report, name, metric):
    return np.array(report.get(name, "shift1").per_seed[metric])


def test_c09_directional_result(desk_sweep, criterion):
    report, chosen, timing = desk_sweep
    top = per_seed(report, "sgd_all", "top40") - per_seed(report, "sgd", "top40")
    allm = per_seed(report, "sgd_all", "all") - per_seed(report, "sgd", "all")
    wins_top, wins_all = int(np.sum(top > 0)), int(np.sum(allm > 0))
    p = sign_test(wins_top, len(DESK_SEEDS))
    summary = {n: report.get(n, "shift1").summary for n in DESK_PRESETS}
    print(json.dumps(summary, indent=1))
    ok = p < 0.05 and wins_all >= 7
    criterion(9, ok, f"SGD+All vs SGD: Top-40% wins {wins_top}/10 (p={p:.4f}), All wins "
                     f"{wins_all}/10; mean Top-40% {summary['sgd_all']['top40'][0]:.2f} vs "
                     f"{summary['sgd']['top40'][0]:.2f}; checkpoint iteration {chosen.iteration} "
                     f"(val {chosen.val_accuracy:.3f}); {timing}")


def test_c10_inverse_controls(desk_sweep, criterion):
    report, _, _ = desk_sweep
    usa_wins = int(np.sum(per_seed(report, "sgd_i_usa", "all") < per_seed(report, "sgd_usa", "all")))
    ufgsm_wins = int(np.sum(per_seed(report, "sgd_usa_i_ufgsm", "top40")
                            < per_seed(report, "sgd_usa_ufgsm", "top40")))
    ok = usa_wins >= 7 and ufgsm_wins >= 7
    criterion(10, ok, f"I/USA below USA on All in {usa_wins}/10 seeds; I/UFGSM below UFGSM on "
                      f"Top-40% in {ufgsm_wins}/10 seeds")


def test_c11_cli_determinism(tmp_path, criterion):
    def snapshot(d):
        return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}

    train = ["--iterations", "4", "--eval-every", "2", "--val-episodes", "3", "--image-size", "8",
             "--n-way", "3", "--meta-batch", "2", "--q-per-class", "2"]
    for run in ("a", "b"):
        main(["metatrain", "--out", str(tmp_path / run / "mt")] + train)
    ck = str(tmp_path / "a" / "mt" / "iter_000004")
    main(["sweep", "--checkpoint", ck, "--out", str(tmp_path / "a" / "sweep"), "--presets", "sgd",
          "sgd_all", "--points", "3", "--episodes", "2", "--seeds", "0", "1", "--q-per-class", "2",
          "--set", "M=2", "T=3"])
    main(["sweep", "--manifest", str(tmp_path / "a" / "sweep" / "manifest.json"),
          "--out", str(tmp_path / "b" / "sweep")])
    for run in ("a", "b"):
        main(["report", "--raw", str(tmp_path / "a" / "sweep" / "raw.csv"), "--format", "csv", "json",
              "--out", str(tmp_path / run / "report")])
        main(["adapt", "--checkpoint", ck, "--preset", "sgd_all", "--M", "2", "--T", "3",
              "--out", str(tmp_path / run / "adapt.json")])
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    differing = sorted(k for k in a if a.get(k) != b.get(k)) + sorted(set(b) - set(a))
    checked = [k for k in a if k.endswith((".csv", ".json"))]
    criterion(11, not differing, f"{len(checked)} CSV/JSON files compared; differing: {differing or 'none'}")
