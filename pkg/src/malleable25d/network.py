"""A small fully-convolutional segmentation net with swappable RGB-D conv blocks.

Each block is conv -> batch norm -> ReLU; an optional 2x2 average pool may
follow any block, the depth field is resized to match, and the 1x1
classifier's logits are upsampled back to input resolution.

Parameters live in one flat ``dict[str, np.ndarray]`` so the optimizer,
checkpoints and gradient checks can treat them uniformly. Receptive-field
parameters are stored as ``block{i}.a``, ``block{i}.t`` (shape (1,)) and
``block{i}.b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import convops
from .geometry import CameraIntrinsics, DepthField, RfSpec, downsample_depth
from .rfield import RFieldParams, default_centers
from .tensor import rng

KINDS = ("standard", "malleable", "depthaware", "hard25d")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class NetConfig:
    kind: str = "malleable"
    in_channels: int = 3
    channels: int = 8
    classes: int = 3
    dilations: list = field(default_factory=lambda: [1, 1, 2, 4, 1])
    pool_after: list = field(default_factory=list)  # block indices followed by a 2x2 avg pool
    depth_blocks: list | None = None  # blocks using the RGB-D operator; None = all
    kernels: int = 3
    alpha: float = convops.DEFAULT_ALPHA
    init_a: list | None = None
    init_t: float = 1.0
    init_b: list | None = None
    duplicate_banks: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"net.kind must be one of {KINDS}, got {self.kind!r}")
        if self.kernels < 1:
            raise ValueError("net.kernels must be >= 1")
        if not self.dilations:
            raise ValueError("net.dilations must list at least one block")
        bad = [i for i in self.pool_after if not 0 <= i < len(self.dilations)]
        if bad:
            raise ValueError(f"net.pool_after refers to missing blocks {bad}")
        if self.depth_blocks is not None:
            bad = [i for i in self.depth_blocks if not 0 <= i < len(self.dilations)]
            if bad:
                raise ValueError(f"net.depth_blocks refers to missing blocks {bad}")
        if self.init_a is not None and len(self.init_a) != self.kernels + 2:
            raise ValueError(f"net.init_a needs {self.kernels + 2} values")
        if self.init_b is not None and len(self.init_b) != self.kernels:
            raise ValueError(f"net.init_b needs {self.kernels} values")

    def block_kind(self, i: int) -> str:
        if self.depth_blocks is None or i in self.depth_blocks:
            return self.kind
        return "standard"


def _avgpool2(x):
    n, c, h, w = x.shape
    return x[:, :, :h - h % 2, :w - w % 2].reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(g, shape):
    n, c, h, w = shape
    up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
    out = np.zeros(shape)
    out[:, :, :up.shape[2], :up.shape[3]] = up
    return out


def _upsample(x, factor, shape):
    up = np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)
    out = np.zeros(shape[:2] + tuple(shape[2:]))
    h, w = min(up.shape[2], shape[2]), min(up.shape[3], shape[3])
    out[:, :, :h, :w] = up[:, :, :h, :w]
    return out


def _upsample_backward(g, factor, small_shape):
    n, c, h, w = small_shape
    pad = np.zeros((n, c, h * factor, w * factor))
    hh, ww = min(pad.shape[2], g.shape[2]), min(pad.shape[3], g.shape[3])
    pad[:, :, :hh, :ww] = g[:, :, :hh, :ww]
    return pad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))


class ToyNet:
    def __init__(self, cfg: NetConfig, camera: CameraIntrinsics):
        self.cfg = cfg
        self.camera = camera
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.specs: list[RfSpec] = []
        r = rng(cfg.seed)
        rate = 1
        c_in = cfg.in_channels
        for i, dil in enumerate(cfg.dilations):
            kind = cfg.block_kind(i)
            spec = RfSpec(kernel=(3, 3), dilation=int(dil), r_down=rate)
            self.specs.append(spec)
            fan_in = c_in * 9
            std = np.sqrt(2.0 / fan_in)
            K = cfg.kernels if kind in ("malleable", "hard25d") else 1
            if kind in ("malleable", "hard25d"):
                if cfg.duplicate_banks:
                    bank = r.standard_normal((cfg.channels, c_in, 3, 3)) * std
                    w = np.repeat(bank[None], K, axis=0)
                else:
                    w = r.standard_normal((K, cfg.channels, c_in, 3, 3)) * std
            else:
                w = r.standard_normal((cfg.channels, c_in, 3, 3)) * std
            self.params[f"block{i}.weight"] = w
            if kind == "malleable":
                a = default_centers(K) if cfg.init_a is None else np.array(cfg.init_a, dtype=np.float64)
                b = np.zeros(K) if cfg.init_b is None else np.array(cfg.init_b, dtype=np.float64)
                self.params[f"block{i}.a"] = a
                self.params[f"block{i}.t"] = np.array([float(cfg.init_t)])
                self.params[f"block{i}.b"] = b
            self.params[f"block{i}.gamma"] = np.ones(cfg.channels)
            self.params[f"block{i}.beta"] = np.zeros(cfg.channels)
            self.buffers[f"block{i}.running_mean"] = np.zeros(cfg.channels)
            self.buffers[f"block{i}.running_var"] = np.ones(cfg.channels)
            c_in = cfg.channels
            if i in cfg.pool_after:
                rate *= 2
        self.out_rate = rate
        self.params["head.weight"] = r.standard_normal((cfg.classes, c_in, 1, 1)) * np.sqrt(1.0 / c_in)
        self.params["head.bias"] = np.zeros(cfg.classes)
        self._caches = None

    # ---------------------------------------------------------------- views

    def n_blocks(self) -> int:
        return len(self.cfg.dilations)

    def malleable_blocks(self) -> list[int]:
        return [i for i in range(self.n_blocks()) if self.cfg.block_kind(i) == "malleable"]

    def rfield(self, i: int) -> RFieldParams:
        return RFieldParams(self.params[f"block{i}.a"], float(self.params[f"block{i}.t"][0]),
                            self.params[f"block{i}.b"])

    def malleable_params(self, i: int) -> convops.MalleableParams:
        return convops.MalleableParams(self.params[f"block{i}.weight"], self.rfield(i), self.specs[i])

    def decay_names(self) -> set[str]:
        return {k for k in self.params if k.endswith(".weight")}

    def depth_at(self, depth: DepthField, i: int) -> DepthField:
        rate = self.specs[i].r_down
        return depth if depth.rate == rate else downsample_depth(depth, rate)

    # ---------------------------------------------------------------- passes

    def _conv(self, i, x, depth, train):
        kind = self.cfg.block_kind(i)
        spec = self.specs[i]
        w = self.params[f"block{i}.weight"]
        if kind == "standard":
            return convops.conv2d_forward(x, w, spec, with_cache=True)
        d = self.depth_at(depth, i)
        if kind == "malleable":
            return convops.malleable_forward(x, d, self.camera, self.malleable_params(i), with_cache=True)
        if kind == "depthaware":
            p = convops.DepthAwareParams(w, self.cfg.alpha, spec)
            return convops.depthaware_forward(x, d, p, with_cache=True)
        return convops.hard25d_forward(x, d, self.camera, convops.Hard25DParams(w, spec), with_cache=True)

    def _bn(self, i, x, train):
        gamma, beta = self.params[f"block{i}.gamma"], self.params[f"block{i}.beta"]
        rm, rv = self.buffers[f"block{i}.running_mean"], self.buffers[f"block{i}.running_var"]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mean
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * var * m / max(m - 1, 1)
        else:
            mean, var = rm, rv
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None], (xhat, inv)

    def forward(self, x, depth: DepthField, train: bool = True, keep: bool | None = None):
        """Logits (n, classes, h, w). ``keep`` retains caches for :meth:`backward`."""
        keep = train if keep is None else keep
        caches = []
        h = np.asarray(x, dtype=np.float64)
        in_shape = h.shape
        for i in range(self.n_blocks()):
            y, conv_cache = self._conv(i, h, depth, train)
            z, bn_cache = self._bn(i, y, train)
            a = np.maximum(z, 0.0)
            pooled_from = None
            if i in self.cfg.pool_after:
                pooled_from = a.shape
                a = _avgpool2(a)
            if keep:
                caches.append((conv_cache, bn_cache, z > 0, pooled_from))
            h = a
        feat = h
        logits = np.einsum("oc,nchw->nohw", self.params["head.weight"][:, :, 0, 0], feat)
        logits += self.params["head.bias"][None, :, None, None]
        small = logits.shape
        if self.out_rate > 1:
            logits = _upsample(logits, self.out_rate, (small[0], small[1]) + tuple(in_shape[2:]))
        self._caches = (caches, feat, small) if keep else None
        return logits

    def backward(self, grad_logits) -> dict[str, np.ndarray]:
        if self._caches is None:
            raise RuntimeError("backward() needs a preceding forward(..., keep=True)")
        caches, feat, small = self._caches
        grads: dict[str, np.ndarray] = {}
        g = grad_logits
        if self.out_rate > 1:
            g = _upsample_backward(g, self.out_rate, small)
        grads["head.bias"] = g.sum(axis=(0, 2, 3))
        grads["head.weight"] = np.einsum("nohw,nchw->oc", g, feat)[:, :, None, None]
        g = np.einsum("oc,nohw->nchw", self.params["head.weight"][:, :, 0, 0], g)
        for i in reversed(range(self.n_blocks())):
            conv_cache, (xhat, inv), relu_mask, pooled_from = caches[i]
            if pooled_from is not None:
                g = _avgpool2_backward(g, pooled_from)
            g = g * relu_mask
            gamma = self.params[f"block{i}.gamma"]
            grads[f"block{i}.gamma"] = np.sum(g * xhat, axis=(0, 2, 3))
            grads[f"block{i}.beta"] = g.sum(axis=(0, 2, 3))
            gx = g * gamma[None, :, None, None]
            gx = inv[None, :, None, None] * (gx - gx.mean(axis=(0, 2, 3), keepdims=True)
                                             - xhat * np.mean(gx * xhat, axis=(0, 2, 3), keepdims=True))
            kind = self.cfg.block_kind(i)
            if kind == "standard":
                g, gw, _ = convops.conv2d_backward(gx, conv_cache)
            elif kind == "malleable":
                mg = convops.malleable_backward(gx, conv_cache)
                g, gw = mg.x, mg.weights
                grads[f"block{i}.a"] = mg.a
                grads[f"block{i}.t"] = np.array([mg.t])
                grads[f"block{i}.b"] = mg.b
            else:
                g, gw, _ = convops.fixed_mask_backward(gx, conv_cache)
                if kind == "depthaware":
                    gw = gw[0]
            grads[f"block{i}.weight"] = gw
        self._caches = None
        return grads

    def block_input(self, x, depth: DepthField, layer: int) -> np.ndarray:
        """Eval-mode activations entering block ``layer``."""
        h = np.asarray(x, dtype=np.float64)
        for i in range(layer):
            y, _ = self._conv(i, h, depth, False)
            z, _ = self._bn(i, y, False)
            h = np.maximum(z, 0.0)
            if i in self.cfg.pool_after:
                h = _avgpool2(h)
        return h
