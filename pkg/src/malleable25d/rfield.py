"""Learnable depth receptive fields.

Every neighbour of a window is softly classified into K+2 classes by its
relative depth difference ``d``: classes 1..K feed the K kernels, class 0
lies in front of all receptive fields and class K+1 behind them.

    h_k     = -(d - a_k)^2 / t                       k = 1..K
    h_0     = -sgn(d - a_0) (d - a_0)^2 / t
    h_{K+1} = +sgn(d - a_{K+1}) (d - a_{K+1})^2 / t
    g       = softmax over the K+2 classes of h
    s       = softmax(b)                              per-kernel rescaling

Arrays produced here put the class axis first: ``h.shape == (K+2,) + d.shape``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kvfile

T_MIN = 1e-3


def default_centers(K: int) -> np.ndarray:
    """Evenly spaced a_0..a_{K+1} with unit gap, centred on 0."""
    return np.arange(K + 2, dtype=np.float64) - (K + 1) / 2.0


@dataclass
class RFieldParams:
    a: np.ndarray
    t: float
    b: np.ndarray

    def __post_init__(self):
        self.a = np.array(self.a, dtype=np.float64).reshape(-1)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        self.t = float(self.t)
        if self.a.size != self.b.size + 2:
            raise ValueError(f"need len(a) == len(b) + 2, got {self.a.size} and {self.b.size}")
        if self.b.size < 1:
            raise ValueError("at least one kernel required")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b)) and math.isfinite(self.t)):
            raise ValueError("rfield parameters must be finite")
        if self.t < T_MIN:
            raise ValueError(f"temperature {self.t} below t_min={T_MIN}")

    @classmethod
    def init(cls, K: int) -> "RFieldParams":
        return cls(default_centers(K), 1.0, np.zeros(K))

    @property
    def K(self) -> int:
        return self.b.size

    def copy(self) -> "RFieldParams":
        return RFieldParams(self.a.copy(), self.t, self.b.copy())

    def ordering_violations(self) -> list[int]:
        """Indices m where a_m >= a_{m+1}."""
        return [m for m in range(self.a.size - 1) if not self.a[m] < self.a[m + 1]]

    def to_kv(self, prefix: str = "") -> dict:
        return {f"{prefix}a": [float(v) for v in self.a], f"{prefix}t": self.t,
                f"{prefix}b": [float(v) for v in self.b]}

    @classmethod
    def from_kv(cls, kv: dict, prefix: str = "") -> "RFieldParams":
        return cls(kv[f"{prefix}a"], kv[f"{prefix}t"], kv[f"{prefix}b"])


def save_params(path, layers: dict[str, RFieldParams]) -> None:
    flat = {}
    for name, p in layers.items():
        flat.update(p.to_kv(f"{name}."))
    kvfile.write_kv(path, flat)


def load_params(path) -> dict[str, RFieldParams]:
    flat = kvfile.read_kv(path)
    names = sorted({k.rsplit(".", 1)[0] for k in flat})
    return {name: RFieldParams.from_kv(flat, f"{name}.") for name in names}


def h_values(d, params: RFieldParams) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    a = params.a.reshape((-1,) + (1,) * d.ndim)
    u = d[None] - a
    h = -(u * u) / params.t
    u0, uK = u[0], u[-1]
    h[0] = -np.sign(u0) * u0 * u0 / params.t
    h[-1] = np.sign(uK) * uK * uK / params.t
    return h


def softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def rebalance(b) -> np.ndarray:
    return softmax(np.asarray(b, dtype=np.float64), axis=0)


def g_values(d, params: RFieldParams) -> np.ndarray:
    return softmax(h_values(d, params), axis=0)


@dataclass
class AssignmentField:
    g: np.ndarray  # (K+2, n, P, ho, wo); zero at out-of-image offsets
    s: np.ndarray  # (K,)

    @property
    def kernel_g(self) -> np.ndarray:
        return self.g[1:-1]

    @property
    def scaled(self) -> np.ndarray:
        """s_k * g_k for the K kernel classes."""
        return self.s.reshape((-1,) + (1,) * (self.g.ndim - 1)) * self.g[1:-1]


def assign(reldiff, params: RFieldParams) -> AssignmentField:
    """Soft assignment for every window offset of a :class:`RelDiffField`."""
    g = g_values(reldiff.values, params)
    g *= reldiff.inside[None]
    return AssignmentField(g, rebalance(params.b))


def assign_backward(reldiff, params: RFieldParams, grad_g=None, grad_s=None, g=None):
    """Reverse-mode derivatives of :func:`assign` w.r.t. (a, t, b).

    ``grad_g`` has the shape of ``AssignmentField.g``; either upstream may be
    ``None`` for zero. ``g`` may pass the forward assignment to skip
    recomputing the softmax (its zeroed out-of-image entries are harmless).
    Depth is data and receives no gradient.
    """
    K = params.K
    grad_a = np.zeros(K + 2)
    grad_t = 0.0
    if grad_g is not None:
        d = reldiff.values
        h = h_values(d, params)
        if g is None:
            g = softmax(h, axis=0)
        # softmax vjp, restricted to offsets that exist
        gh = g * (grad_g - np.sum(g * grad_g, axis=0, keepdims=True))
        gh *= reldiff.inside[None]
        u = d[None] - params.a.reshape((-1,) + (1,) * d.ndim)
        dh_da = 2.0 * u / params.t
        dh_da[0] = 2.0 * np.abs(u[0]) / params.t
        dh_da[-1] = -2.0 * np.abs(u[-1]) / params.t
        axes = tuple(range(1, gh.ndim))
        grad_a = np.sum(gh * dh_da, axis=axes)
        grad_t = float(-np.sum(gh * h) / params.t)
    grad_b = np.zeros(K)
    if grad_s is not None:
        s = rebalance(params.b)
        grad_s = np.asarray(grad_s, dtype=np.float64)
        grad_b = s * (grad_s - np.dot(s, grad_s))
    return grad_a, grad_t, grad_b


def rf_width(params: RFieldParams, lo: float = -20.0, hi: float = 20.0, steps: int = 40001) -> float:
    """Length of the d-interval where the kernels together hold more than half the mass."""
    d = np.linspace(lo, hi, steps)
    inside = g_values(d, params)[1:-1].sum(axis=0) > 0.5
    return float(inside.sum() * (d[1] - d[0]))
