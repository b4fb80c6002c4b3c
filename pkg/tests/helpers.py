"""Central finite differences shared by the gradient tests."""

import numpy as np
import torch


def fd_check(fn, params, n_coords=None, eps=1e-6, rng=None):
    """Compare autograd against central differences on (a sample of) coordinates.

    ``fn()`` returns a scalar tensor computed from ``params`` (float64 leaves).
    Returns the worst relative error over the checked coordinates.
    """
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if n_coords is not None and n_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        coords = [coords[k] for k in rng.choice(len(coords), n_coords, replace=False)]
    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = fn().item()
            flat[j] = orig - eps
            down = fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            g = grads[i]
            analytic = 0.0 if g is None else g.reshape(-1)[j].item()
            scale = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst
