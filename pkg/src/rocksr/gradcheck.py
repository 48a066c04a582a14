"""Central finite differences for verifying hand-written backward passes."""
import numpy as np


def numerical_grad(f, x, h=1e-5, indices=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    If ``indices`` is given (flat indices), only those entries are
    estimated and a 1-D array is returned.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    out = np.array(out)
    return out.reshape(x.shape) if indices is None else out


def max_relative_error(analytic, numeric, floor=1e-8):
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
