"""Brute-force Cox oracle: naive Breslow log partial likelihood plus zooming grid search."""
import itertools

import numpy as np


def breslow_loglik(x, times, events, betas):
    """Log partial likelihood for each row of ``betas`` (shape (m, p)), by direct summation."""
    x = np.asarray(x, float).reshape(len(times), -1)
    eta = np.asarray(betas, float) @ x.T  # (m, n)
    total = np.zeros(len(betas))
    for i in range(len(times)):
        if not events[i]:
            continue
        at_risk = [j for j in range(len(times)) if times[j] >= times[i]]
        m = eta[:, at_risk].max(axis=1)
        total += eta[:, i] - (m + np.log(np.exp(eta[:, at_risk] - m[:, None]).sum(axis=1)))
    return total


def grid_argmax(x, times, events, bound=8.0, points=161, zooms=10):
    """Maximizer on [-bound, bound]^p; returns (beta, on_boundary)."""
    p = np.asarray(x).reshape(len(times), -1).shape[1]
    center = np.zeros(p)
    half = bound
    best = None
    for level in range(zooms + 1):
        axes = [np.linspace(c - half, c + half, points) for c in center]
        grid = np.array(list(itertools.product(*axes)))
        ll = breslow_loglik(x, times, events, grid)
        best = grid[int(np.argmax(ll))]
        if level == 0:
            on_boundary = bool(np.any(np.abs(best) >= bound - 1e-9))
        center = best
        half = half * 4 / (points - 1) * 2
    return best, on_boundary


def random_fixtures(count, seed=0):
    """Small fixtures with an interior maximizer: (x, times, events, beta_hat)."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(4, 11))
        p = int(rng.integers(1, 3))
        x = np.round(rng.normal(size=(n, p)), 1)
        times = rng.integers(1, 7, size=n).astype(float)
        events = rng.random(n) < 0.7
        if not events.any():
            continue
        beta, boundary = grid_argmax(x, times, events, points=41 if p == 2 else 161)
        if boundary or np.abs(beta).max() > 5.0:
            continue
        out.append((x, times, events, beta))
    return out
