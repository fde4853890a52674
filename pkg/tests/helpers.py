"""Shared builders for the test suite."""

import numpy as np

from flowlens import flow


def randomized_flow(dim, seed=0, n_layers=10, hidden=16, scale=0.3):
    """Flow with non-zero heads, so layers are far from the identity."""
    model = flow.init_flow(dim, n_layers=n_layers, hidden=hidden, seed=seed)
    rng = np.random.default_rng([seed, 99])
    for layer in model.layers:
        for name in ("ws", "bs", "wt", "bt"):
            arr = getattr(layer, name)
            arr[...] = rng.standard_normal(arr.shape) * scale
    return model


def numeric_logdet(fn, x, step=1e-5):
    """log|det J| of ``fn`` at ``x`` from a central-difference Jacobian."""
    d = len(x)
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        jac[:, j] = (fn(x + e) - fn(x - e)) / (2 * step)
    return np.linalg.slogdet(jac)[1]


def stub_layer(layer, scale_logit, shift):
    """Make the conditioner output constant (scale_logit, shift) on every element."""
    for name in ("w1", "b1", "w2", "b2", "ws", "wt"):
        getattr(layer, name)[...] = 0
    # bs is the pre-clamp logit: invert the 2*tanh(raw/2) clamp
    layer.bs[...] = 2 * np.arctanh(scale_logit / 2)
    layer.bt[...] = shift
    return layer
