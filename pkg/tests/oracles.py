"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from heartsig import mlp


def naive_dft(frame):
    """One-sided DFT by the O(n^2) definition."""
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.size
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (frame[None, :] * np.exp(-2j * np.pi * k * t / n)).sum(axis=1)


def numeric_gradients(model, x, labels, step=1e-5):
    """Central differences of the mean cross-entropy for every parameter."""
    out = []
    for p in model.parameters():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = mlp.loss(model, x, labels)
            flat[i] = keep - step
            down = mlp.loss(model, x, labels)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def max_relative_error(model, x, labels, step=1e-5, floor=1e-7):
    """Largest |a - n| / max(|a| + |n|, floor) over all parameters.

    The floor keeps gradients that are zero up to rounding from dominating.
    """
    gw, gb, _ = mlp.gradients(model, x, labels)
    analytic = [g for pair in zip(gw, gb) for g in pair]
    worst = 0.0
    for a, n in zip(analytic, numeric_gradients(model, x, labels, step)):
        rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(rel.max()))
    return worst


def random_small_model(rng, max_dims=(16, 12, 8)):
    dims = [int(rng.integers(2, d + 1)) for d in max_dims]
    model = mlp.init(dims, seed=int(rng.integers(1 << 31)))
    # non-zero biases so every parameter is exercised
    model.biases = [rng.normal(0, 0.5, b.shape) for b in model.biases]
    x = rng.standard_normal((6, dims[0]))
    labels = rng.integers(0, dims[-1], size=6)
    return model, x, labels
