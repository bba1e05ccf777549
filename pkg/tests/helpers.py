"""Shared test oracles: finite differences and small numeric utilities."""

import numpy as np

from mrfvae import diffcore as dc


def finite_diff_grad(f, x, h=1e-5):
    """Central finite differences of a scalar-valued f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gf[k] = (fp - fm) / (2.0 * h)
    return g


def grad_of(build_loss, params, h=1e-5):
    """Autodiff and finite-difference gradients of build_loss(params)->Var.

    `params` maps name -> array; build_loss must read them through
    dc.Var(name=...)-style wiring supplied by the caller.
    """
    vars_ = {k: dc.Var(v.copy(), name=k) for k, v in params.items()}
    with dc.Tape() as tape:
        loss = build_loss(vars_)
    auto = dc.backward(tape, loss, wrt=vars_.values())

    fd = {}
    for name in params:
        def f(x, name=name):
            trial = {k: dc.Var(v.copy()) for k, v in params.items()}
            trial[name] = dc.Var(x)
            return float(build_loss(trial).data)

        fd[name] = finite_diff_grad(f, params[name], h=h)
    return auto, fd


def assert_grads_close(auto, fd, rtol=1e-4, atol=1e-7):
    for name, g_fd in fd.items():
        np.testing.assert_allclose(auto[name], g_fd, rtol=rtol, atol=atol, err_msg=name)
