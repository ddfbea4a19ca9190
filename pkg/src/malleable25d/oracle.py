"""Brute-force reference implementations and central finite differences.

Nothing here reuses the vectorized code in :mod:`convops`, :mod:`rfield`
or :mod:`geometry`; every quantity is recomputed per scalar with ``math``.
Only the parameter containers are shared.
"""
from __future__ import annotations

import math

import numpy as np

MAX_TERMS = 2_000_000


def _sgn(v: float) -> float:
    return float(v > 0) - float(v < 0)


def _assignment(d: float, a, t: float) -> list[float]:
    """Softmax over the K+2 classes for one relative difference ``d``."""
    last = len(a) - 1
    h = []
    for m, am in enumerate(a):
        u = d - am
        if m == 0:
            h.append(-_sgn(u) * u * u / t)
        elif m == last:
            h.append(_sgn(u) * u * u / t)
        else:
            h.append(-u * u / t)
    top = max(h)
    e = [math.exp(v - top) for v in h]
    z = math.fsum(e)
    return [v / z for v in e]


def _rebalance(b) -> list[float]:
    top = max(b)
    e = [math.exp(v - top) for v in b]
    z = math.fsum(e)
    return [v / z for v in e]


def naive_forward(kind: str, x, weights, *, dilation=1, stride=1, padding=None,
                  r_down=1, depth=None, valid=None, focal=None, a=None, t=None, b=None,
                  alpha=None, bias=None) -> np.ndarray:
    """Evaluate one operator with explicit loops.

    ``kind`` is one of ``standard``, ``malleable``, ``depthaware``, ``hard25d``.
    ``weights`` is (c_out, c_in, kh, kw) for single-kernel kinds and
    (K, c_out, c_in, kh, kw) for ``malleable``/``hard25d``. ``depth`` and
    ``valid`` are (n, h, w) or (n, 1, h, w); ``focal`` is the effective focal length.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if kind in ("standard", "depthaware"):
        w = w[None]
    K, c_out, c_in, kh, kw = w.shape
    n, c, H, W = x.shape
    if c != c_in:
        raise ValueError("channel mismatch")
    if padding is None:
        padding = (dilation * (kh // 2), dilation * (kw // 2))
    ph, pw = padding
    ho = (H + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (W + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    terms = n * c_out * ho * wo * K * c_in * kh * kw
    if terms > MAX_TERMS:
        raise ValueError(f"instance needs {terms} terms, oracle limit is {MAX_TERMS}")

    if kind != "standard":
        dep = np.asarray(depth, dtype=np.float64).reshape(n, H, W)
        ok = np.ones((n, H, W), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(n, H, W)
    if kind == "malleable":
        s = _rebalance([float(v) for v in b])
    delta_p = r_down * dilation

    y = np.zeros((n, c_out, ho, wo))
    for bi in range(n):
        for yo in range(ho):
            for xo in range(wo):
                cy = yo * stride - ph + (kh // 2) * dilation
                cx = xo * stride - pw + (kw // 2) * dilation
                center_ok = False
                di = 0.0
                if kind != "standard" and 0 <= cy < H and 0 <= cx < W:
                    di = float(dep[bi, cy, cx])
                    center_ok = bool(ok[bi, cy, cx]) and math.isfinite(di) and di > 0
                acc = [0.0] * c_out
                for ki in range(kh):
                    for kj in range(kw):
                        yi = yo * stride - ph + ki * dilation
                        xi = xo * stride - pw + kj * dilation
                        if not (0 <= yi < H and 0 <= xi < W):
                            continue
                        # per-kernel weight of this neighbour
                        if kind == "standard":
                            gate = [1.0]
                        else:
                            dj = float(dep[bi, yi, xi])
                            neigh_ok = bool(ok[bi, yi, xi]) and math.isfinite(dj) and dj > 0
                            if not (center_ok and neigh_ok):
                                dj = di
                            if kind == "depthaware":
                                gate = [math.exp(-alpha * abs(di - dj))]
                            else:
                                rel = (di - dj) / (delta_p * di / focal) if center_ok else 0.0
                                if kind == "malleable":
                                    g = _assignment(rel, [float(v) for v in a], float(t))
                                    gate = [s[k] * g[k + 1] for k in range(K)]
                                else:
                                    gate = [1.0 if (k - K / 2.0 <= rel < k + 1 - K / 2.0) else 0.0
                                            for k in range(K)]
                        for o in range(c_out):
                            for k in range(K):
                                if gate[k] == 0.0:
                                    continue
                                for ci in range(c_in):
                                    acc[o] += gate[k] * w[k, o, ci, ki, kj] * x[bi, ci, yi, xi]
                for o in range(c_out):
                    y[bi, o, yo, xo] = acc[o] + (0.0 if bias is None else float(bias[o]))
    return y


def fd_gradient(loss, theta: np.ndarray, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. the array ``theta``.

    ``theta`` is perturbed in place and restored after every coordinate, so
    ``loss`` should read it by reference. ``indices`` restricts which flat
    coordinates are evaluated (others stay 0).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = theta.reshape(-1)
    if not np.shares_memory(flat, theta):
        raise ValueError("theta must be contiguous so it can be perturbed in place")
    grad = np.zeros(flat.size)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        up = loss()
        flat[i] = orig - step
        down = loss()
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(theta.shape)
