"""Shared test oracles: finite differences and reference classifiers."""

from __future__ import annotations

import numpy as np

from hikfs.autodiff import Tensor


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_grad(build_loss, arrays, h: float = 1e-5, tol: float = 1e-4):
    """Compare taped gradients of ``build_loss(*tensors)`` against finite differences.

    ``arrays``: list of numpy inputs; every one is treated as differentiable.
    Returns the worst relative error seen.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    worst = 0.0
    for j, t in enumerate(tensors):
        assert t.grad is not None, f"input {j} received no gradient"

        def scalar_fn(x, j=j):
            probe = [a.copy() for a in arrays]
            probe[j] = x
            vals = [Tensor(p) for p in probe]
            return float(build_loss(*vals).data)

        fd = finite_difference_grad(scalar_fn, arrays[j].copy(), h=h)
        denom = max(np.abs(fd).max(), np.abs(t.grad).max(), 1e-8)
        err = np.abs(t.grad - fd).max() / denom
        worst = max(worst, err)
        assert err < tol, f"input {j}: relative gradient error {err:.3e} >= {tol}"
    return worst


def check_param_grads(build_loss, named_tensors, h: float = 1e-5, tol: float = 1e-4):
    """FD-check taped gradients of a loss with respect to named parameters.

    ``build_loss`` takes no arguments and reads the tensors in place;
    perturbation happens through each tensor's data buffer.
    """
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for name, t in named_tensors.items():
        assert t.grad is not None, f"parameter '{name}' received no gradient"
        grad = t.grad.copy()
        fd = np.zeros_like(t.data)
        flat_data = t.data.ravel()
        flat_fd = fd.ravel()
        for i in range(flat_data.size):
            orig = flat_data[i]
            flat_data[i] = orig + h
            fp = float(build_loss().data)
            flat_data[i] = orig - h
            fm = float(build_loss().data)
            flat_data[i] = orig
            flat_fd[i] = (fp - fm) / (2.0 * h)
        denom = max(np.abs(fd).max(), np.abs(grad).max(), 1e-8)
        err = np.abs(grad - fd).max() / denom
        worst = max(worst, err)
        assert err < tol, f"parameter '{name}': relative gradient error {err:.3e} >= {tol}"
        t.zero_grad()
    return worst


def prototype_log_probs(support_by_class, queries):
    """Independent prototype classifier: log softmax of negative Euclidean
    distances from each query to each class mean."""
    protos = np.stack([np.asarray(s, dtype=np.float64).mean(axis=0)
                       for s in support_by_class])
    q = np.asarray(queries, dtype=np.float64)
    d = np.sqrt(((q[:, None, :] - protos[None, :, :]) ** 2).sum(axis=-1))
    logits = -d
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def exhaustive_kmeans_sse(points: np.ndarray, r: int) -> float:
    """Optimal within-cluster SSE over every assignment into at most r clusters."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    best = np.inf
    labels = np.zeros(n, dtype=np.intp)
    while True:
        sse = 0.0
        for c in range(r):
            members = pts[labels == c]
            if len(members):
                mu = members.mean(axis=0)
                sse += ((members - mu) ** 2).sum()
        best = min(best, sse)
        i = n - 1
        while i >= 0:
            labels[i] += 1
            if labels[i] < r:
                break
            labels[i] = 0
            i -= 1
        if i < 0:
            return float(best)
