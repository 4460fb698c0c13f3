"""Independent reference computations used by the tests.

Nothing here touches the autodiff engine: finite differences work on plain
callables and the MLP / BIM oracles are hand-written numpy.
"""

import numpy as np

FD_STEP = 1e-5
REL_FLOOR = 1e-3


def central_diff(f, x, h=FD_STEP):
    """Central differences of a scalar or array-valued ``f`` at ``x``.

    Returns an array of shape x.shape + f(x).shape.
    """
    x = np.array(x, dtype=np.float64)
    out0 = np.asarray(f(x))
    grad = np.zeros(x.shape + out0.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape((flat.size,) + out0.shape)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = np.asarray(f(x))
        flat[i] = old - h
        down = np.asarray(f(x))
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor=REL_FLOOR):
    """Largest per-coordinate |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# -- plain numpy MLP ------------------------------------------------------------


def mlp_logits(weights, x):
    """weights: list of (W, b); relu between layers, linear output."""
    h = x.reshape(len(x), -1)
    for i, (w, b) in enumerate(weights):
        h = h @ w + b
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return h


def log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def mlp_target_logprob_grad(weights, x, target):
    """log p_target(x) and d/dx by explicit backpropagation."""
    shape = x.shape
    h = x.reshape(len(x), -1)
    acts, pre = [h], []
    for i, (w, b) in enumerate(weights):
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if i < len(weights) - 1 else z)
    lp = log_softmax(acts[-1])
    rows = np.arange(len(x))
    p = np.exp(lp)
    delta = -p
    delta[rows, target] += 1.0
    for i in range(len(weights) - 1, -1, -1):
        w, _ = weights[i]
        delta = delta @ w.T
        if i > 0:
            delta = delta * (pre[i - 1] > 0)
    return lp[rows, target], delta.reshape(shape)


def bim(weights, x, target, eps, n_iter, bounds=(0.0, 1.0)):
    """Basic Iterative Method with l2 steps of length ``eps`` along grad log p_target.

    Returns the list of iterates (the input first).
    """
    iterates = [x.copy()]
    cur = x.copy()
    for _ in range(n_iter):
        _, g = mlp_target_logprob_grad(weights, cur, target)
        norm = np.sqrt(np.sum(g.reshape(len(g), -1) ** 2, axis=1))
        cur = cur + eps * g / norm.reshape((-1,) + (1,) * (g.ndim - 1))
        if bounds is not None:
            cur = np.clip(cur, *bounds)
        iterates.append(cur.copy())
    return iterates
