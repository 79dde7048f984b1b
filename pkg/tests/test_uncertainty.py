import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import linear_spec, random_params, tiny_conv, tiny_episode
from repurpose.modelio import ParamEntry, ParamSet
from repurpose.tensor import NumericError, forward_loss, grad_params
from repurpose.uncertainty import (Ensemble, StepsizeMap, aug_count, ensemble_step, param_std,
                                   perturb_init, usa, usa_from_std)

# Frozen outputs of tests/oracles/hand_oracles.py
ORACLE_FORWARD = [0.012, 0.008]
ORACLE_INVERSE = [0.008, 0.012]


def layered(stds):
    """Per-tensor spreads and layer indices; one tensor per layer."""
    return [np.asarray(s, dtype=np.float64) for s in stds], list(range(len(stds)))


class TestPerturbInit:
    def test_zero_components_stay_zero(self):
        p = random_params(tiny_conv(), np.random.default_rng(0))
        p = p.replace([np.where(np.abs(t) < 0.05, 0.0, t) for t in p.tensors])
        ens = perturb_init(p, 4, 0.05, seed=1)
        for m in ens.members:
            for a, b in zip(m.tensors, p.tensors):
                assert np.all(a[b == 0] == 0)

    def test_sigma_zero_copies(self):
        p = random_params(tiny_conv(), np.random.default_rng(0))
        for m in perturb_init(p, 3, 0.0, seed=2).members:
            for a, b in zip(m.tensors, p.tensors):
                assert a.tobytes() == b.tobytes()

    def test_perturbation_std(self):
        theta = ParamSet([ParamEntry("dense0.weight", 0, np.random.default_rng(3).uniform(0.5, 2, 100_000))])
        ens = perturb_init(theta, 2, 0.05, seed=4)
        ratio = ens.members[0].tensors[0] / theta.tensors[0] - 1
        assert 0.045 <= ratio.std() <= 0.055

    def test_members_differ(self):
        p = random_params(tiny_conv(), np.random.default_rng(0))
        ens = perturb_init(p, 2, 0.05, seed=0)
        assert not np.array_equal(ens.members[0].flat(), ens.members[1].flat())

    def test_rejects_small_ensembles(self):
        p = random_params(tiny_conv(), np.random.default_rng(0))
        with pytest.raises(ValueError):
            perturb_init(p, 1, 0.05, 0)


def hand_linear_ce_grads(W, b, x, y):
    """CE gradients of a dense layer by hand: returns (dW, db, dx)."""
    z = x @ W + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    d = p.copy()
    d[np.arange(len(y)), y] -= 1
    d /= len(y)
    return x.T @ d, d.sum(0), d @ W.T


class TestEnsembleStep:
    def setup_method(self):
        self.spec = linear_spec(3)
        rng = np.random.default_rng(5)
        self.members = [ParamSet([ParamEntry("dense0.weight", 0, rng.standard_normal((3, 2))),
                                  ParamEntry("dense0.bias", 0, rng.standard_normal(2))])
                        for _ in range(2)]
        self.x = rng.random((4, 1, 1, 3))
        self.y = np.array([0, 1, 1, 0])

    def test_zero_stepsizes_leave_members(self):
        ens = Ensemble(self.members)
        new, xadv = ensemble_step(ens, self.spec, (self.x, self.y),
                                  StepsizeMap.uniform(self.members[0], 0.0), 0.05)
        for a, b in zip(new.members, ens.members):
            np.testing.assert_array_equal(a.flat(), b.flat())
        assert len(xadv) == 2 and xadv[0].shape == self.x.shape
        assert np.all(np.isin(np.round((xadv[0] - self.x) / 0.05, 9), [-1, 0, 1]))

    def test_zero_epsilon_doubles_ce_step(self):
        alpha = 0.1
        new, _ = ensemble_step(Ensemble(self.members), self.spec, (self.x, self.y),
                               StepsizeMap.uniform(self.members[0], alpha), 0.0)
        for m, n in zip(self.members, new.members):
            _, tape = forward_loss(self.spec, m, self.x, self.y)
            for t, g, u in zip(m.tensors, grad_params(tape), n.tensors):
                np.testing.assert_allclose(u, t - alpha * 2 * g, rtol=0, atol=1e-15)

    def test_matches_hand_gradients(self):
        alpha, eps = 0.05, 0.05
        new, _ = ensemble_step(Ensemble(self.members), self.spec, (self.x, self.y),
                               StepsizeMap.uniform(self.members[0], alpha), eps)
        x2 = self.x.reshape(4, 3)
        for m, n in zip(self.members, new.members):
            W, b = m.tensors
            dW, db, dx = hand_linear_ce_grads(W, b, x2, self.y)
            xa = x2 + eps * np.sign(dx)
            dWa, dba, _ = hand_linear_ce_grads(W, b, xa, self.y)
            np.testing.assert_allclose(n.tensors[0], W - alpha * (dW + dWa), rtol=0, atol=1e-12)
            np.testing.assert_allclose(n.tensors[1], b - alpha * (db + dba), rtol=0, atol=1e-12)

    def test_error_names_member(self):
        bad = self.members[1].replace([np.full((3, 2), np.inf), self.members[1].tensors[1]])
        with pytest.raises(NumericError, match="member 1"):
            ensemble_step(Ensemble([self.members[0], bad]), self.spec, (self.x, self.y),
                          StepsizeMap.uniform(self.members[0], 0.1), 0.05)


class TestParamStd:
    def one_tensor(self, values):
        return Ensemble([ParamSet([ParamEntry("w", 0, np.asarray(v, dtype=float))]) for v in values])

    def test_identical_members(self):
        p = random_params(tiny_conv(), np.random.default_rng(0))
        assert all(np.all(u == 0) for u in param_std(Ensemble([p, p.copy(), p.copy()])))

    def test_population_std(self):
        assert param_std(self.one_tensor([[1.0], [3.0]]))[0][0] == 1.0

    def test_brute_force(self):
        rng = np.random.default_rng(6)
        values = rng.standard_normal((5, 7))
        u = param_std(self.one_tensor(values))[0]
        for j in range(7):
            col = [float(v) for v in values[:, j]]
            mean = sum(col) / 5
            ref = (sum((c - mean) ** 2 for c in col) / 5) ** 0.5
            assert abs(u[j] - ref) <= 1e-12


class TestUSA:
    def test_worked_example(self):
        u, li = layered([[0.10, 0.30], [0.20, 0.40]])
        np.testing.assert_allclose(usa_from_std(0.01, u, li), ORACLE_FORWARD, rtol=0, atol=1e-15)
        np.testing.assert_allclose(usa_from_std(0.01, u, li, inverse=True), ORACLE_INVERSE,
                                   rtol=0, atol=1e-15)

    @pytest.mark.parametrize("inverse", [False, True])
    def test_equal_stds_give_alpha(self, inverse):
        u, li = layered([[0.2, 0.2], [0.2], [0.2, 0.2, 0.2]])
        np.testing.assert_allclose(usa_from_std(0.03, u, li, inverse), 0.03, rtol=1e-15)

    @pytest.mark.parametrize("inverse", [False, True])
    def test_zero_spread_falls_back(self, inverse):
        u, li = layered([[0.0, 0.0], [0.0]])
        np.testing.assert_array_equal(usa_from_std(0.01, u, li, inverse), [0.01, 0.01])

    def test_bn_shares_its_layer(self):
        p = random_params(tiny_conv(), np.random.default_rng(7))
        ens = perturb_init(p, 3, 0.05, seed=8)
        m = usa(0.01, ens)
        values = dict(zip(m.names, m.values))
        assert values["conv0.bn_gamma"] == values["conv0.weight"] == values["conv0.bias"]
        assert len(set(m.values)) == p.n_layers

    def test_rejects_bad_alpha(self):
        u, li = layered([[0.1], [0.2]])
        with pytest.raises(ValueError):
            usa_from_std(0.0, u, li)

    @settings(max_examples=100, deadline=None)
    @given(data=st.data())
    def test_properties(self, data):
        L = data.draw(st.integers(2, 5))
        stds = [data.draw(st.lists(st.floats(1e-3, 1.0), min_size=1, max_size=4)) for _ in range(L)]
        alpha = data.draw(st.floats(1e-4, 1.0))
        c = data.draw(st.floats(0.1, 10.0))
        u, li = layered(stds)
        for inverse in (False, True):
            a = usa_from_std(alpha, u, li, inverse)
            assert abs(a.mean() - alpha) <= 1e-9 * alpha
            assert np.all(a >= 0)
            np.testing.assert_allclose(usa_from_std(c * alpha, u, li, inverse), c * a,
                                       rtol=1e-12, atol=0)
        # Forward mode reverses the layer order of mean spread; inverse keeps it.
        means = np.array([np.mean(s) for s in stds])
        fwd = usa_from_std(alpha, u, li)
        inv = usa_from_std(alpha, u, li, True)
        if len(set(np.round(means, 12))) == L:
            assert list(np.argsort(means)) == list(np.argsort(-fwd))
            assert list(np.argsort(means)) == list(np.argsort(inv))


def test_aug_count():
    assert aug_count(10, 5, 5, True, True) == 10 * 5 * 5 + 10 * 5
    assert aug_count(3, 4, 2, False, True) == 6
    assert aug_count(3, 4, 2, True, False) == 24
    assert aug_count(3, 4, 2, False, False) == 0


def test_stepsize_map():
    p = random_params(tiny_conv(), np.random.default_rng(0))
    m = StepsizeMap.from_layers(p, [0.1, 0.2])
    assert m.per_layer() == [0.1, 0.2]
    masked = m.masked(p.bn_mask)
    assert all(v == 0 for v, bn in zip(masked.values, p.bn_mask) if bn)
    with pytest.raises(ValueError):
        StepsizeMap(("a",), (0,), (-1.0,))
    assert tiny_episode().support_x.shape[0] == 6
