"""Central finite-difference oracle for checking tape gradients."""
import numpy as np

from .tensor import no_grad


def numeric_grad(loss_fn, tensors, step=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``tensors``.

    ``loss_fn`` must rebuild the loss from the current ``.data`` of each tensor.
    """
    out = []
    with no_grad():
        for t in tensors:
            g = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = loss_fn().item()
                flat[j] = orig - step
                down = loss_fn().item()
                flat[j] = orig
                gflat[j] = (up - down) / (2 * step)
            out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-8):
    """Largest |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
