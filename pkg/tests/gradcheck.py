"""Central finite-difference gradient checking shared by the nn and acceptance tests."""

import numpy as np

from bgforecast import nn


def numeric_gradients(params, batch, weights, mode="eval", rng_seed=0, eps=1e-5):
    """Central differences of ``sum(forward(params, batch) * weights)`` for every element."""
    out = {}
    for name, tensor in params:
        g = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = np.sum(nn.forward(params, batch, mode, rng_seed)[0] * weights)
            flat[i] = old - eps
            down = np.sum(nn.forward(params, batch, mode, rng_seed)[0] * weights)
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def tensor_relative_errors(analytic, numeric):
    """Per tensor ``max|a - n| / max(max|a|, max|n|)`` (0 when both vanish)."""
    errs = {}
    for name, n in numeric.items():
        a = analytic[name]
        scale = max(np.abs(a).max(), np.abs(n).max())
        errs[name] = 0.0 if scale == 0 else float(np.abs(a - n).max() / scale)
    return errs


def check_model(config, seed=0, B=2, mode="train", rng_seed=123):
    rng = np.random.default_rng(seed)
    params = nn.init_params(config, seed)
    # non-zero biases so their gradients are exercised away from the symmetric start
    for name, t in params:
        if t.ndim == 1:
            t[:] = rng.uniform(-0.5, 0.5, t.shape)
    batch = rng.random((B, config.seq_len, config.n_features))
    weights = rng.normal(size=(B, config.out_dim))
    out, cache = nn.forward(params, batch, mode, rng_seed)
    analytic = nn.backward(params, cache, weights)
    numeric = numeric_gradients(params, batch, weights, mode, rng_seed)
    return tensor_relative_errors(dict(analytic), numeric)
