import numpy as np


def rel_err(analytic, numeric):
    """Max absolute deviation scaled by the largest entry of either gradient."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def central_diff(f, x, eps):
    """Central finite differences of scalar f at array x (perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def random_ctc_instance(rng, max_T=6, max_V=4, max_L=3):
    """Random (logits, labels, blank) with a feasible label sequence."""
    while True:
        T = int(rng.integers(1, max_T + 1))
        V = int(rng.integers(2, max_V + 1))
        L = int(rng.integers(0, max_L + 1))
        blank = V - 1
        labels = rng.integers(0, V - 1, size=L).tolist()
        repeats = sum(a == b for a, b in zip(labels, labels[1:]))
        if L + repeats <= T:
            return rng.normal(scale=2.0, size=(T, V)), labels, blank
