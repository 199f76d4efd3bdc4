"""Shared test oracles."""

import numpy as np

from selfobf.srnet import backward, forward_upsampled, init_model, loss, prepare_input


def random_model(n_layers=2, hidden=4, lr_shape=(6, 6), scale=2, seed=1):
    """Double-precision model with every parameter (gate and canvas too) randomised."""
    m = init_model(3, scale=scale, n_layers=n_layers, hidden=hidden, input_shape=lr_shape,
                   seed=seed, dtype=np.float64)
    gen = np.random.default_rng(seed)
    for k in m.params:
        m.params[k] = m.params[k] + 0.3 * gen.standard_normal(m.params[k].shape)
    return m


def finite_difference_errors(model, x, y, kind="l2", h=1e-4):
    """Worst element-wise relative error between analytic and central-difference
    gradients, per parameter."""
    grads = backward(model, x, y, kind)
    u = prepare_input(model, x)
    worst = {}
    for name, v in model.params.items():
        err = 0.0
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            lp = loss(forward_upsampled(model, u, x), y, kind)
            v[idx] = old - h
            lm = loss(forward_upsampled(model, u, x), y, kind)
            v[idx] = old
            fd = (lp - lm) / (2 * h)
            a = grads[name][idx]
            err = max(err, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
        worst[name] = err
    return worst
