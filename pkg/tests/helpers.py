"""Oracles shared by the test modules.

These recompute quantities from the single-model API and plain numpy,
independent of the grouped code paths they check.
"""
import numpy as np

from repurpose.modelio import LayerSpec, ModelSpec, ParamEntry, ParamSet, conv_spec, init_params, mlp_spec
from repurpose.tasks import DomainParams, sample_episode
from repurpose.tensor import forward_loss, grad_params

FD_H = 1e-5


def tiny_conv(n_way=3, size=8, filters=3):
    return conv_spec(n_way=n_way, image_size=size, filters=filters, blocks=1)


def tiny_mlp(n_way=3, size=4):
    return mlp_spec(n_way=n_way, image_size=size, hidden=(6,), bn=True)


def linear_spec(d, n_out=2):
    return ModelSpec((LayerSpec("flatten"), LayerSpec("dense", n_out)), (1, 1, d), n_out)


def random_params(spec, rng, scale=1.0):
    p = init_params(spec, rng)
    # Perturb BN and biases too so that every gradient path is exercised.
    return p.replace(t * scale + 0.1 * rng.standard_normal(t.shape) for t in p.tensors)


def tiny_episode(n_way=3, k=2, q=2, size=8, seed=0):
    return sample_episode(DomainParams(image_size=size), n_way, k, q, seed)


def rel_err(a, b, floor=1e-8):
    """Normwise relative error ||a - b|| / max(||a||, ||b||, floor)."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def fd_param_grads(spec, params, x, y, h=FD_H):
    out = []
    for i, t in enumerate(params.tensors):
        g = np.zeros_like(t)
        for j in np.ndindex(t.shape):
            vals = []
            for s in (+1, -1):
                ts = [u.copy() for u in params.tensors]
                ts[i][j] += s * h
                vals.append(forward_loss(spec, params.replace(ts), x, y, input_grad=False)[0])
            g[j] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def fd_input_grad(spec, params, x, y, h=FD_H):
    g = np.zeros_like(x)
    for j in np.ndindex(x.shape):
        vals = []
        for s in (+1, -1):
            xs = x.copy()
            xs[j] += s * h
            vals.append(forward_loss(spec, params, xs, y, input_grad=False)[0])
        g[j] = (vals[0] - vals[1]) / (2 * h)
    return g


def plain_finetune(spec, params, x, y, alpha, T, optimizer="sgd", b1=0.9, b2=0.999, eps=1e-8):
    """Reference meta-test loop written directly against the single-model API."""
    theta = [t.copy() for t in params.tensors]
    m = [np.zeros_like(t) for t in theta]
    v = [np.zeros_like(t) for t in theta]
    for step in range(1, T + 1):
        _, tape = forward_loss(spec, params.replace(theta), x, y, input_grad=False)
        grads = grad_params(tape)
        for i, g in enumerate(grads):
            if optimizer == "sgd":
                theta[i] = theta[i] - alpha * g
            else:
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mhat = m[i] / (1 - b1 ** step)
                vhat = v[i] / (1 - b2 ** step)
                theta[i] = theta[i] - alpha * mhat / (np.sqrt(vhat) + eps)
    return theta


def scalar_params(value, name="dense0.weight"):
    return ParamSet([ParamEntry(name, 0, np.asarray(value, dtype=np.float64))])
