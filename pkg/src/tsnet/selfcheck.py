"""Finite-difference gradient verification across every op and the full model.

Each check builds a small seeded problem, computes the analytic gradient of a
scalar loss with respect to one input tensor, and compares against central
differences (eps 1e-6, float64). The suite covers all differentiable ops plus
the assembled two-stream multitask loss, parameter by parameter.
"""

import numpy as np

from .model import BranchConfig, TwoStreamConfig, build_model
from .tensor import (Tensor, add, conv2d, dense, dropout, elementwise_mul,
                     global_avg_pool, grad_check, mse, relu, scale,
                     take_column, tsum)
from .trainer import mtl_loss

__all__ = ["GRADCHECK_THRESHOLD", "gradcheck_suite", "suite_passes"]

GRADCHECK_THRESHOLD = 1e-6


def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _rand_away_from_zero(rng, *shape, margin=0.1):
    a = rng.uniform(margin, 1.0, size=shape)
    return a * np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def _check(theta_data, f, eps):
    theta = Tensor(np.asarray(theta_data, dtype=np.float64), requires_grad=True)
    return grad_check(f, theta, eps=eps)


def _op_checks(seed, eps):
    """One seeded trial per op/argument; extents kept at 5 or below."""
    rng = np.random.Generator(np.random.PCG64(seed))
    out = {}

    x = _rand(rng, 2, 3, 5, 5)
    w = _rand(rng, 4, 3, 3, 3)
    b = _rand(rng, 4)
    t = _rand(rng, 2, 4, 3, 3)
    out["conv2d/x"] = _check(x, lambda p: mse(conv2d(p, Tensor(w), Tensor(b),
                                                     stride=2, padding=1), Tensor(t)), eps)
    out["conv2d/w"] = _check(w, lambda p: mse(conv2d(Tensor(x), p, Tensor(b),
                                                     stride=2, padding=1), Tensor(t)), eps)
    out["conv2d/b"] = _check(b, lambda p: mse(conv2d(Tensor(x), Tensor(w), p,
                                                     stride=2, padding=1), Tensor(t)), eps)
    t1 = _rand(rng, 2, 4, 3, 3)
    out["conv2d_s1/x"] = _check(x, lambda p: mse(conv2d(p, Tensor(w), Tensor(b)),
                                                 Tensor(t1)), eps)

    xr = _rand_away_from_zero(rng, 3, 5)
    tr = Tensor(_rand(rng, 3, 5))
    out["relu/x"] = _check(xr, lambda p: mse(relu(p), tr), eps)

    xg = _rand(rng, 2, 3, 4, 5)
    tg = Tensor(_rand(rng, 2, 3))
    out["global_avg_pool/x"] = _check(xg, lambda p: mse(global_avg_pool(p), tg), eps)

    xd = _rand(rng, 4, 5)
    wd = _rand(rng, 3, 5)
    bd = _rand(rng, 3)
    td = Tensor(_rand(rng, 4, 3))
    out["dense/x"] = _check(xd, lambda p: mse(dense(p, Tensor(wd), Tensor(bd)), td), eps)
    out["dense/w"] = _check(wd, lambda p: mse(dense(Tensor(xd), p, Tensor(bd)), td), eps)
    out["dense/b"] = _check(bd, lambda p: mse(dense(Tensor(xd), Tensor(wd), p), td), eps)

    a = _rand(rng, 4, 5)
    b2 = _rand(rng, 4, 5)
    tm = Tensor(_rand(rng, 4, 5))
    out["elementwise_mul/a"] = _check(
        a, lambda p: mse(elementwise_mul(p, Tensor(b2)), tm), eps)
    out["elementwise_mul/b"] = _check(
        b2, lambda p: mse(elementwise_mul(Tensor(a), p), tm), eps)

    xdr = _rand(rng, 4, 5)
    out["dropout/x"] = _check(
        xdr, lambda p: tsum(dropout(p, 0.5, training=True, rng_seed=seed)), eps)

    xp = _rand(rng, 5)
    tp = Tensor(_rand(rng, 5))
    out["mse/pred"] = _check(xp, lambda p: mse(p, tp), eps)

    xs = _rand(rng, 3, 4)
    ts = Tensor(_rand(rng, 3, 4))
    out["tsum/x"] = _check(xs, lambda p: tsum(p), eps)
    out["add/a"] = _check(xs, lambda p: mse(add(p, Tensor(b2[:3, :4])), ts), eps)
    out["scale/x"] = _check(xs, lambda p: mse(scale(p, -1.7), ts), eps)
    xc = _rand(rng, 4, 3)
    tc = Tensor(_rand(rng, 4))
    out["take_column/x"] = _check(xc, lambda p: mse(take_column(p, 1), tc), eps)
    return out


def _model_checks(seed, eps):
    """Full two-stream MTL loss, checked against every parameter tensor."""
    cfg = TwoStreamConfig(branch=BranchConfig(blocks=((2, 3, 2, 1),)),
                          mlp_hidden=(3,), dropout_p=0.0, input_hw=(5, 5))
    model = build_model(cfg, seed=seed)
    # Fan-in init keeps early-layer gradients of this tiny net near the
    # central-difference noise floor; inflating the weights restores signal
    # without changing what is being differentiated.
    for p in model.params.values():
        p.data *= 5.0
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    frames = rng.random((2, 3, 5, 5))
    flows = rng.random((2, 3, 5, 5))
    t_main = Tensor(rng.normal(size=2))
    t_aux = Tensor(rng.normal(size=2))

    def loss_fn(_):
        y_main, y_aux = model.forward(Tensor(frames), Tensor(flows),
                                      training=False)
        return mtl_loss(y_main, y_aux, t_main, t_aux, 1.0)

    out = {}
    for name in sorted(model.params):
        out["model/" + name] = grad_check(loss_fn, model.params[name], eps=eps)
    return out


def gradcheck_suite(eps=1e-6, seeds=(0, 1, 2), model_seeds=(2, 3)):
    """Max relative error per check; multiple seeds per op, worst case kept."""
    results = {}
    for seed in seeds:
        for name, err in _op_checks(seed, eps).items():
            results[name] = max(err, results.get(name, 0.0))
    for seed in model_seeds:
        for name, err in _model_checks(seed, eps).items():
            results[name] = max(err, results.get(name, 0.0))
    return results


def suite_passes(results, threshold=GRADCHECK_THRESHOLD):
    return all(err < threshold for err in results.values())
