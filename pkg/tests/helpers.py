"""Shared oracles for the test suite: central finite differences and a
naive 6-loop convolution, both independent of the autodiff engine."""

from __future__ import annotations

import numpy as np

from saccadenet.autodiff import Tensor


def numeric_grads(f, tensors: list[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite-difference gradients of the scalar ``f()``.

    ``f`` must recompute the loss from the tensors' current ``data``; each
    element is perturbed in place. Use float64 tensors for headroom.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the numeric gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / scale


def check_grads(build_loss, tensors: list[Tensor], tol: float = 1e-4, eps: float = 1e-5) -> None:
    """Backward pass vs finite differences for every tensor in the list."""
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    numeric = numeric_grads(lambda: float(build_loss().data), tensors, eps=eps)
    for t, num in zip(tensors, numeric):
        assert t.grad is not None, "tracked tensor ended up without a gradient"
        err = rel_err(t.grad, num)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:g} for shape {t.shape}"


def conv2d_naive(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct 6-loop cross-correlation over one (C, H, W) image."""
    c, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    assert c == c_in
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo), dtype=x.dtype)
    for co in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                out[co, i, j] = acc
    return out
