"""Central finite-difference oracle, evaluated on a float64 shadow copy."""
import numpy as np

H = 1e-3


def numeric_grad(fn, arrays, h=H):
    """d fn / d arrays[i] for every i; fn takes float64 arrays, returns a float.

    Arrays are perturbed in place one entry at a time, so fn must read them
    afresh on each call.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    a = np.concatenate([np.ravel(x).astype(np.float64) for x in analytic])
    n = np.concatenate([np.ravel(x).astype(np.float64) for x in numeric])
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return np.linalg.norm(a - n) / denom
