"""Diagnostic exports: receptive-field curves, assignment histograms, per-kernel features.

Everything is written as CSV (plus a small ``.meta.toml`` sidecar) or
``.t4``; rendering is left to external tools.

Curve CSV columns: ``d, h_0..h_{K+1}, g_0..g_{K+1}`` followed by optional
``depthaware_<tag>`` and ``hard_1..hard_K`` comparison profiles.

Histogram CSV columns: ``kernel, raw_total, scaled_total, raw_ratio, scaled_ratio``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import convops, kvfile, tensor
from .geometry import relative_depth_differences
from .network import ToyNet
from .rfield import RFieldParams, assign, h_values, rebalance, softmax
from .synth import SceneSet


class LayerKindError(ValueError):
    pass


@dataclass
class CurveExport:
    d: np.ndarray  # (steps,)
    h: np.ndarray  # (K+2, steps)
    g: np.ndarray  # (K+2, steps)
    extra: dict = field(default_factory=dict)  # column name -> (steps,)
    meta: dict = field(default_factory=dict)


def rf_curves(params: RFieldParams, lo: float = -4.0, hi: float = 4.0, steps: int = 801,
              meta: dict | None = None) -> CurveExport:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    d = np.linspace(lo, hi, steps)
    h = h_values(d, params)
    info = {"K": params.K, "t": params.t, "a": [float(v) for v in params.a],
            "b": [float(v) for v in params.b], "d_min": lo, "d_max": hi, "steps": steps}
    info.update(meta or {})
    return CurveExport(d, h, softmax(h, axis=0), {}, info)


def depthaware_profile(d, alpha: float, center_depth: float, focal: float, delta_p: float = 1.0) -> np.ndarray:
    """exp(-alpha |absolute depth difference|) expressed on the relative-difference axis."""
    unit = delta_p * center_depth / focal
    return np.exp(-alpha * np.abs(np.asarray(d) * unit))


def hard25d_profile(d, K: int) -> np.ndarray:
    return convops.hard25d_bins(np.asarray(d, dtype=np.float64), K)


def add_depthaware(curves: CurveExport, tag: str, alpha: float, center_depth: float, focal: float,
                   delta_p: float = 1.0) -> None:
    curves.extra[f"depthaware_{tag}"] = depthaware_profile(curves.d, alpha, center_depth, focal, delta_p)
    curves.meta[f"depthaware_{tag}"] = {"alpha": alpha, "center_depth": center_depth,
                                        "focal": focal, "delta_p": delta_p}


def add_hard25d(curves: CurveExport, K: int) -> None:
    bins = hard25d_profile(curves.d, K)
    for k in range(K):
        curves.extra[f"hard_{k + 1}"] = bins[k]


def write_curves(path, curves: CurveExport) -> None:
    K2 = curves.h.shape[0]
    header = ["d"] + [f"h_{m}" for m in range(K2)] + [f"g_{m}" for m in range(K2)] + list(curves.extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j in range(curves.d.size):
            row = [curves.d[j], *curves.h[:, j], *curves.g[:, j], *(v[j] for v in curves.extra.values())]
            w.writerow([repr(float(v)) for v in row])
    kvfile.write_kv(f"{os.fspath(path)}.meta.toml", _kv_safe(curves.meta))


def _kv_safe(meta: dict) -> dict:
    out = {}
    for k, v in kvfile.flatten(meta).items():
        out[k] = [float(x) for x in v] if isinstance(v, (list, tuple, np.ndarray)) else v
    return out


# ---------------------------------------------------------------- histograms

@dataclass
class AssignHistogram:
    raw_total: np.ndarray  # sum of g_k per kernel
    scaled_total: np.ndarray  # sum of s_k * g_k per kernel
    s: np.ndarray

    @property
    def raw_ratio(self) -> np.ndarray:
        return self.raw_total / self.raw_total.sum()

    @property
    def scaled_ratio(self) -> np.ndarray:
        return self.scaled_total / self.scaled_total.sum()


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _require_malleable(net: ToyNet, layer: int) -> None:
    if not 0 <= layer < net.n_blocks():
        raise LayerKindError(f"network has no block {layer}")
    kind = net.cfg.block_kind(layer)
    if kind != "malleable":
        raise LayerKindError(f"block {layer} is {kind}, not malleable")


def assignment_histogram(net: ToyNet, data: SceneSet, layer: int, batch: int = 32) -> AssignHistogram:
    """Totals of g_k and s_k * g_k over every measured (window, offset) of the dataset.

    Offsets outside the image and windows whose centre or neighbour depth is
    missing are excluded.
    """
    _require_malleable(net, layer)
    params = net.rfield(layer)
    spec = net.specs[layer]
    raw = np.zeros(params.K)
    for start in range(0, len(data), batch):
        idx = np.arange(start, min(start + batch, len(data)))
        _, depth, _ = data.batch(idx)
        rd = relative_depth_differences(net.depth_at(depth, layer), net.camera, spec)
        g = assign(rd, params).kernel_g
        raw += np.sum(g * rd.depth_ok[None], axis=(1, 2, 3, 4))
    s = rebalance(params.b)
    return AssignHistogram(raw, s * raw, s)


def write_histogram(path, hist: AssignHistogram, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kernel", "raw_total", "scaled_total", "raw_ratio", "scaled_ratio"])
        for k in range(hist.raw_total.size):
            w.writerow([k + 1] + [repr(float(v)) for v in (hist.raw_total[k], hist.scaled_total[k],
                                                            hist.raw_ratio[k], hist.scaled_ratio[k])])
    info = {"raw_entropy": entropy(hist.raw_ratio), "scaled_entropy": entropy(hist.scaled_ratio),
            "s": [float(v) for v in hist.s]}
    info.update(meta or {})
    kvfile.write_kv(f"{os.fspath(path)}.meta.toml", _kv_safe(info))


# ---------------------------------------------------------------- feature dumps

def kernel_features(net: ToyNet, x, depth, layer: int) -> np.ndarray:
    """Per-kernel partial sums s_k * sum_p g_k w_k x at block ``layer``: (K, n, c_out, h, w)."""
    _require_malleable(net, layer)
    h = net.block_input(x, depth, layer)
    return convops.malleable_kernel_outputs(h, net.depth_at(depth, layer), net.camera, net.malleable_params(layer))


def dump_kernel_features(net: ToyNet, x, depth, layer: int, directory) -> list[str]:
    feats = kernel_features(net, x, depth, layer)
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k in range(feats.shape[0]):
        p = os.path.join(directory, f"block{layer}_kernel{k + 1}.t4")
        tensor.save(p, feats[k])
        paths.append(p)
    return paths
