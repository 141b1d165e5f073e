"""Central finite-difference gradient checking shared across test files."""

import numpy as np

STEP = 1e-5


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def max_rel_error(loss_fn, params, grads, names=None, step=STEP):
    """Worst relative error between analytic gradients and central finite
    differences over every entry of the named parameters (all by default).

    loss_fn(params) must return a scalar and be deterministic.
    """
    worst = 0.0
    for name in sorted(names if names is not None else params):
        p = params[name]
        g = grads[name]
        flat = p.reshape(-1)
        g_flat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = loss_fn(params)
            flat[i] = original - step
            down = loss_fn(params)
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, relative_error(float(g_flat[i]), numeric))
    return worst
