import numpy as np


def numeric_grad(f, arr, eps=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = f()
        arr[idx] = orig - eps
        lo = f()
        arr[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


def max_rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# acceptance criterion number -> (passed, detail); printed in the terminal summary
ACCEPTANCE_RESULTS = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
    return bool(passed)
