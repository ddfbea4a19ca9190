"""Forward/backward for standard, malleable 2.5D, depth-aware and hard 2.5D convolution.

All four share one engine: gather the input into per-offset columns,
multiply each kernel's copy of the columns by a per-(position, offset)
weight and contract with that kernel's bank in a single matmul::

    y[n, o, l] = sum_k sum_c sum_p W[k, o, c, p] * M[k, n, p, l] * X[n, c, p, l]

Only the weights ``M`` differ between operators: absent for a standard
conv, ``s_k * g_k`` for malleable, ``exp(-alpha |d_i - d_j|)`` for
depth-aware and bin indicators for hard 2.5D. Cross-correlation
convention, zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, DepthField, RfSpec, depth_windows, relative_depth_differences
from .rfield import RFieldParams, assign, assign_backward, default_centers, g_values, rebalance
from .tensor import as_tensor4

DEFAULT_ALPHA = 8.3


@dataclass
class MalleableParams:
    weights: np.ndarray  # (K, c_out, c_in, kh, kw)
    rfield: RFieldParams
    spec: RfSpec = field(default_factory=RfSpec)
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 5:
            raise ValueError(f"weights must be (K, c_out, c_in, kh, kw), got {self.weights.shape}")
        if self.weights.shape[0] != self.rfield.K:
            raise ValueError(f"{self.weights.shape[0]} banks but rfield has K={self.rfield.K}")
        if tuple(self.weights.shape[3:]) != tuple(self.spec.kernel):
            raise ValueError(f"bank spatial shape {self.weights.shape[3:]} != kernel {self.spec.kernel}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def introduced_params(self) -> int:
        return self.rfield.a.size + 1 + self.rfield.b.size


@dataclass
class DepthAwareParams:
    weights: np.ndarray  # (c_out, c_in, kh, kw)
    alpha: float = DEFAULT_ALPHA
    spec: RfSpec = field(default_factory=RfSpec)
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass
class Hard25DParams:
    weights: np.ndarray  # (K, c_out, c_in, kh, kw)
    spec: RfSpec = field(default_factory=RfSpec)
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 5 or self.weights.shape[0] < 1:
            raise ValueError(f"weights must be (K>=1, c_out, c_in, kh, kw), got {self.weights.shape}")

    @property
    def K(self) -> int:
        return self.weights.shape[0]


# ---------------------------------------------------------------- engine

def im2col(x: np.ndarray, spec: RfSpec) -> np.ndarray:
    """(n, c, h, w) -> (n, c, P, ho*wo) zero-padded windows."""
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    ph, pw = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kh, kw = spec.kernel
    cols = np.empty((n, c, kh * kw, ho, wo))
    for ki in range(kh):
        for kj in range(kw):
            y0, x0 = ki * spec.dilation, kj * spec.dilation
            cols[:, :, ki * kw + kj] = xp[:, :, y0:y0 + spec.stride * (ho - 1) + 1:spec.stride,
                                          x0:x0 + spec.stride * (wo - 1) + 1:spec.stride]
    return cols.reshape(n, c, kh * kw, ho * wo)


def col2im(cols: np.ndarray, x_shape, spec: RfSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to (n, c, h, w)."""
    n, c, h, w = x_shape
    ho, wo = spec.output_hw(h, w)
    ph, pw = spec.padding
    kh, kw = spec.kernel
    cols = cols.reshape(n, c, kh * kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    for ki in range(kh):
        for kj in range(kw):
            y0, x0 = ki * spec.dilation, kj * spec.dilation
            xp[:, :, y0:y0 + spec.stride * (ho - 1) + 1:spec.stride,
               x0:x0 + spec.stride * (wo - 1) + 1:spec.stride] += cols[:, :, ki * kw + kj]
    return xp[:, :, ph:ph + h, pw:pw + w].copy()


def _masked_forward(cols, masks, weights):
    """cols (n,C,P,L), masks (K,n,P,L) or None, weights (K,O,C,kh,kw) -> y (n,O,L), X."""
    n, C, P, L = cols.shape
    K, O = weights.shape[:2]
    if masks is None:
        X = cols.reshape(n, C * P, L)
    else:
        X = (cols[:, None] * masks.transpose(1, 0, 2, 3)[:, :, None]).reshape(n, K * C * P, L)
    Wm = weights.reshape(K, O, C * P).transpose(1, 0, 2).reshape(O, K * C * P)
    return Wm @ X, X


def _masked_backward(grad_y, cols, masks, weights, X):
    """Returns (grad_cols, grad_weights, grad_masks)."""
    n, C, P, L = cols.shape
    K, O = weights.shape[:2]
    Wm = weights.reshape(K, O, C * P).transpose(1, 0, 2).reshape(O, K * C * P)
    gW = np.zeros((O, K * C * P))
    for i in range(n):
        gW += grad_y[i] @ X[i].T
    gW = gW.reshape(O, K, C * P).transpose(1, 0, 2).reshape(weights.shape)
    gX = (Wm.T @ grad_y).reshape(n, K, C, P, L)
    if masks is None:
        return gX[:, 0], gW, None
    grad_cols = np.einsum("nkcpl,knpl->ncpl", gX, masks)
    grad_masks = np.einsum("nkcpl,ncpl->knpl", gX, cols)
    return grad_cols, gW, grad_masks


def _check_x(x, c_in, spec):
    x = as_tensor4(x)
    if x.shape[1] != c_in:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {c_in}")
    spec.output_hw(*x.shape[2:])
    return x


def _check_depth(x, depth: DepthField, spec: RfSpec):
    if depth.rate != spec.r_down:
        raise ValueError(f"depth rate {depth.rate} != conv input rate {spec.r_down}")
    if depth.shape[0] != x.shape[0] or depth.shape[2:] != x.shape[2:]:
        raise ValueError(f"depth shape {depth.shape} does not match features {x.shape}")


def _finish(y, bias, n, ho, wo):
    y = y.reshape(n, -1, ho, wo)
    if bias is not None:
        y += np.asarray(bias).reshape(1, -1, 1, 1)
    return y


# ---------------------------------------------------------------- standard

@dataclass
class ConvCache:
    x_shape: tuple
    cols: np.ndarray
    X: np.ndarray
    masks: np.ndarray | None
    weights: np.ndarray
    spec: RfSpec
    extra: dict = field(default_factory=dict)


def conv2d_forward(x, weights, spec: RfSpec | None = None, bias=None, with_cache: bool = False):
    spec = spec or RfSpec(kernel=tuple(np.shape(weights)[2:]))
    weights = np.asarray(weights, dtype=np.float64)
    x = _check_x(x, weights.shape[1], spec)
    n = x.shape[0]
    ho, wo = spec.output_hw(*x.shape[2:])
    cols = im2col(x, spec)
    y, X = _masked_forward(cols, None, weights[None])
    y = _finish(y, bias, n, ho, wo)
    if with_cache:
        return y, ConvCache(x.shape, cols, X, None, weights[None], spec)
    return y


def conv2d_backward(grad_y, cache: ConvCache):
    """Returns (grad_x, grad_weights, grad_bias)."""
    gy = grad_y.reshape(grad_y.shape[0], grad_y.shape[1], -1)
    gcols, gW, _ = _masked_backward(gy, cache.cols, None, cache.weights, cache.X)
    gx = col2im(gcols, cache.x_shape, cache.spec)
    return gx, gW[0], gy.sum(axis=(0, 2))


# ---------------------------------------------------------------- malleable

@dataclass
class MalleableGrads:
    x: np.ndarray
    weights: np.ndarray
    bias: np.ndarray | None
    a: np.ndarray
    t: float
    b: np.ndarray


def malleable_masks(depth: DepthField, cam: CameraIntrinsics, params: MalleableParams):
    reldiff = relative_depth_differences(depth, cam, params.spec)
    field_ = assign(reldiff, params.rfield)
    n, P = reldiff.shape[:2]
    masks = field_.scaled.reshape(params.K, n, P, -1)
    return masks, reldiff, field_


def malleable_forward(x, depth: DepthField, cam: CameraIntrinsics, params: MalleableParams,
                      with_cache: bool = False):
    x = _check_x(x, params.weights.shape[2], params.spec)
    _check_depth(x, depth, params.spec)
    n = x.shape[0]
    ho, wo = params.spec.output_hw(*x.shape[2:])
    masks, reldiff, field_ = malleable_masks(depth, cam, params)
    cols = im2col(x, params.spec)
    y, X = _masked_forward(cols, masks, params.weights)
    y = _finish(y, params.bias, n, ho, wo)
    if with_cache:
        cache = ConvCache(x.shape, cols, X, masks, params.weights, params.spec,
                          {"reldiff": reldiff, "field": field_, "params": params})
        return y, cache
    return y


def malleable_backward(grad_y, cache: ConvCache) -> MalleableGrads:
    params: MalleableParams = cache.extra["params"]
    field_ = cache.extra["field"]
    reldiff = cache.extra["reldiff"]
    if grad_y.shape[1] != params.weights.shape[1]:
        raise ValueError(f"grad_y has {grad_y.shape[1]} channels, expected {params.weights.shape[1]}")
    n = grad_y.shape[0]
    gy = grad_y.reshape(n, grad_y.shape[1], -1)
    gcols, gW, gmasks = _masked_backward(gy, cache.cols, cache.masks, cache.weights, cache.X)
    gx = col2im(gcols, cache.x_shape, cache.spec)
    K = params.K
    gmasks = gmasks.reshape((K,) + reldiff.shape)
    kernel_g = field_.kernel_g
    grad_s = np.sum(gmasks * kernel_g, axis=(1, 2, 3, 4))
    grad_g = np.zeros_like(field_.g)
    grad_g[1:-1] = gmasks * field_.s.reshape(-1, 1, 1, 1, 1)
    ga, gt, gb = assign_backward(reldiff, params.rfield, grad_g, grad_s, g=field_.g)
    gbias = gy.sum(axis=(0, 2)) if params.bias is not None else None
    return MalleableGrads(gx, gW, gbias, ga, gt, gb)


def malleable_kernel_outputs(x, depth: DepthField, cam: CameraIntrinsics, params: MalleableParams):
    """The K per-kernel partial sums before aggregation (no bias). Shape (K, n, c_out, ho, wo)."""
    x = _check_x(x, params.weights.shape[2], params.spec)
    _check_depth(x, depth, params.spec)
    n = x.shape[0]
    ho, wo = params.spec.output_hw(*x.shape[2:])
    masks, _, _ = malleable_masks(depth, cam, params)
    cols = im2col(x, params.spec)
    outs = []
    for k in range(params.K):
        y, _ = _masked_forward(cols, masks[k:k + 1], params.weights[k:k + 1])
        outs.append(y.reshape(n, -1, ho, wo))
    return np.stack(outs)


def merged_kernel(params: MalleableParams, d: float = 0.0) -> np.ndarray:
    """sum_k s_k g_k(d) w_k: the equivalent standard kernel when every offset sees ``d``."""
    g = g_values(np.float64(d), params.rfield)[1:-1]
    scale = rebalance(params.rfield.b) * g
    return np.tensordot(scale, params.weights, axes=1)


def duplicate_pretrained(weight, K: int, spec: RfSpec | None = None, bias=None,
                         rfield: RFieldParams | None = None) -> MalleableParams:
    """Load one standard conv bank into all K kernels of a malleable conv."""
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 4:
        raise ValueError(f"source weight must be (c_out, c_in, kh, kw), got {weight.shape}")
    spec = spec or RfSpec(kernel=tuple(weight.shape[2:]))
    if tuple(weight.shape[2:]) != tuple(spec.kernel):
        raise ValueError(f"source kernel {weight.shape[2:]} != spec kernel {spec.kernel}")
    rfield = rfield or RFieldParams(default_centers(K), 1.0, np.zeros(K))
    banks = np.repeat(weight[None], K, axis=0)
    return MalleableParams(banks, rfield, spec, None if bias is None else np.array(bias, dtype=np.float64))


# ---------------------------------------------------------------- baselines

def depthaware_masks(depth: DepthField, params: DepthAwareParams):
    win = depth_windows(depth, params.spec)
    m = np.exp(-params.alpha * np.abs(win.center - win.neighbor)) * win.inside
    return m.reshape(1, m.shape[0], m.shape[1], -1)


def depthaware_forward(x, depth: DepthField, params: DepthAwareParams, with_cache: bool = False):
    weights = np.asarray(params.weights, dtype=np.float64)
    x = _check_x(x, weights.shape[1], params.spec)
    _check_depth(x, depth, params.spec)
    n = x.shape[0]
    ho, wo = params.spec.output_hw(*x.shape[2:])
    masks = depthaware_masks(depth, params)
    cols = im2col(x, params.spec)
    y, X = _masked_forward(cols, masks, weights[None])
    y = _finish(y, params.bias, n, ho, wo)
    if with_cache:
        return y, ConvCache(x.shape, cols, X, masks, weights[None], params.spec)
    return y


def hard25d_bins(values: np.ndarray, K: int) -> np.ndarray:
    """Indicator (K, ...) of k-1-K/2 <= d < k-K/2 for k = 1..K."""
    k = np.arange(1, K + 1, dtype=np.float64).reshape((-1,) + (1,) * values.ndim)
    return ((k - 1 - K / 2.0 <= values[None]) & (values[None] < k - K / 2.0)).astype(np.float64)


def hard25d_masks(depth: DepthField, cam: CameraIntrinsics, params: Hard25DParams):
    reldiff = relative_depth_differences(depth, cam, params.spec)
    m = hard25d_bins(reldiff.values, params.K) * reldiff.inside[None]
    return m.reshape(params.K, m.shape[1], m.shape[2], -1)


def hard25d_forward(x, depth: DepthField, cam: CameraIntrinsics, params: Hard25DParams,
                    with_cache: bool = False):
    x = _check_x(x, params.weights.shape[2], params.spec)
    _check_depth(x, depth, params.spec)
    n = x.shape[0]
    ho, wo = params.spec.output_hw(*x.shape[2:])
    masks = hard25d_masks(depth, cam, params)
    cols = im2col(x, params.spec)
    y, X = _masked_forward(cols, masks, params.weights)
    y = _finish(y, params.bias, n, ho, wo)
    if with_cache:
        return y, ConvCache(x.shape, cols, X, masks, params.weights, params.spec)
    return y


def fixed_mask_backward(grad_y, cache: ConvCache):
    """Backward for operators whose masks carry no parameters (depth-aware, hard 2.5D).

    Returns (grad_x, grad_weights, grad_bias); grad_weights keeps the bank axis.
    """
    gy = grad_y.reshape(grad_y.shape[0], grad_y.shape[1], -1)
    gcols, gW, _ = _masked_backward(gy, cache.cols, cache.masks, cache.weights, cache.X)
    return col2im(gcols, cache.x_shape, cache.spec), gW, gy.sum(axis=(0, 2))


# ---------------------------------------------------------------- budget

@dataclass(frozen=True)
class LayerDescriptor:
    kind: str  # standard | malleable | depthaware | hard25d
    c_in: int
    c_out: int
    kernel: tuple[int, int] = (3, 3)
    K: int = 1
    bias: bool = False
    out_hw: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in ("standard", "malleable", "depthaware", "hard25d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("standard", "depthaware") and self.K != 1:
            raise ValueError(f"{self.kind} convolution has exactly one kernel")


@dataclass(frozen=True)
class FlopReport:
    conv_macs: int  # kernel-bank multiply-accumulates over all active paths
    mask_macs: int  # applying per-offset assignment weights to input columns
    assign_flops: int  # computing relative differences and assignment weights
    bias_flops: int
    total_flops: int  # 2 * (conv_macs + mask_macs) + assign_flops + bias_flops


def count_params(desc: LayerDescriptor) -> int:
    kh, kw = desc.kernel
    n = desc.K * desc.c_out * desc.c_in * kh * kw
    if desc.bias:
        n += desc.c_out
    if desc.kind == "malleable":
        n += 2 * desc.K + 3
    return n


# per-(position, offset) arithmetic, counted as scalar floating-point ops
_RELDIFF_OPS = 3  # subtract, multiply by f / delta_p, divide by centre depth
_PER_CLASS_OPS = 6  # subtract, square, divide by t, exp, accumulate, normalize
_DEPTHAWARE_OPS = 4  # subtract, abs, scale by alpha, exp
_BIN_OPS = 2  # two comparisons against the bin edges


def estimate_flops(desc: LayerDescriptor) -> FlopReport:
    kh, kw = desc.kernel
    P = kh * kw
    positions = desc.out_hw[0] * desc.out_hw[1]
    conv = desc.K * desc.c_out * desc.c_in * P * positions
    if desc.kind == "standard":
        mask, assign_ = 0, 0
    else:
        mask = desc.K * desc.c_in * P * positions
        if desc.kind == "malleable":
            per = _RELDIFF_OPS + _PER_CLASS_OPS * (desc.K + 2) + desc.K
        elif desc.kind == "hard25d":
            per = _RELDIFF_OPS + _BIN_OPS * desc.K
        else:
            per = _DEPTHAWARE_OPS
        assign_ = per * P * positions
    bias = desc.c_out * positions if desc.bias else 0
    return FlopReport(conv, mask, assign_, bias, 2 * (conv + mask) + assign_ + bias)
