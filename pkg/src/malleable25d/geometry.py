"""Camera model, depth fields and relative depth differences inside a conv window."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kvfile
from .tensor import as_tensor4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


def effective_focal(cam: CameraIntrinsics) -> float:
    # fx and fy are close in practice, so a single focal length is used
    return (cam.fx + cam.fy) / 2.0


def read_camera(path) -> tuple[CameraIntrinsics, int]:
    kv = kvfile.read_kv(path)
    unknown = set(kv) - {"fx", "fy", "cx", "cy", "rate"}
    if unknown:
        raise KeyError(f"{path}: unknown camera keys {sorted(unknown)}")
    cam = CameraIntrinsics(float(kv["fx"]), float(kv["fy"]), float(kv.get("cx", 0.0)), float(kv.get("cy", 0.0)))
    return cam, int(kv.get("rate", 1))


def write_camera(path, cam: CameraIntrinsics, rate: int = 1) -> None:
    kvfile.write_kv(path, {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "rate": int(rate)})


@dataclass(frozen=True)
class RfSpec:
    """Sampling geometry of one convolution.

    ``padding=None`` means "same" padding, ``dilation * (k // 2)`` per side.
    ``r_down`` is the input feature map's downsampling rate w.r.t. the image.
    """

    kernel: tuple[int, int] = (3, 3)
    dilation: int = 1
    stride: int = 1
    padding: tuple[int, int] | None = None
    r_down: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.dilation < 1 or self.stride < 1 or self.r_down < 1:
            raise ValueError("dilation, stride and r_down must be >= 1")
        if self.padding is None:
            object.__setattr__(self, "padding", (self.dilation * (kh // 2), self.dilation * (kw // 2)))
        if min(self.padding) < 0:
            raise ValueError(f"negative padding {self.padding}")

    @property
    def delta_p(self) -> int:
        """Image-plane distance between neighbouring kernel samples."""
        return self.r_down * self.dilation

    @property
    def n_offsets(self) -> int:
        return self.kernel[0] * self.kernel[1]

    @property
    def center_offset(self) -> int:
        kh, kw = self.kernel
        return (kh // 2) * kw + kw // 2

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ph, pw = self.padding
        ho = (h + 2 * ph - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (w + 2 * pw - self.dilation * (kw - 1) - 1) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for {self}")
        return ho, wo


@dataclass
class DepthField:
    """Metric depth (n, 1, h, w) with a validity mask and its downsampling rate."""

    depth: np.ndarray
    valid: np.ndarray | None = None
    rate: int = 1

    def __post_init__(self):
        depth = as_tensor4(self.depth)
        if depth.shape[1] != 1:
            raise ValueError(f"depth must have one channel, got shape {depth.shape}")
        ok = np.isfinite(depth) & (depth > 0)
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != depth.shape:
                raise ValueError(f"valid mask shape {valid.shape} != depth shape {depth.shape}")
            ok &= valid
        # invalid entries are zeroed so no NaN/inf leaks into arithmetic
        self.depth = np.where(ok, depth, 0.0)
        self.valid = ok
        self.rate = int(self.rate)
        if self.rate < 1:
            raise ValueError("rate must be >= 1")

    @property
    def shape(self):
        return self.depth.shape

    def take(self, index) -> "DepthField":
        return DepthField(self.depth[index], self.valid[index], self.rate)


def downsample_depth(field: DepthField, target_rate: int) -> DepthField:
    """Nearest-neighbour resize: keep the top-left sample of every cell."""
    if target_rate % field.rate:
        raise ValueError(f"target rate {target_rate} is not a multiple of source rate {field.rate}")
    step = target_rate // field.rate
    return DepthField(field.depth[:, :, ::step, ::step].copy(), field.valid[:, :, ::step, ::step].copy(), target_rate)


@dataclass
class DepthWindows:
    """Depth gathered per (batch, offset, out_y, out_x) after invalid substitution."""

    center: np.ndarray  # (n, 1, ho, wo)
    neighbor: np.ndarray  # (n, P, ho, wo); invalid neighbours carry the centre depth
    inside: np.ndarray  # (n, P, ho, wo) offset lies inside the image
    depth_ok: np.ndarray  # (n, P, ho, wo) centre and neighbour depths both valid
    center_valid: np.ndarray = field(repr=False, default=None)  # (n, 1, ho, wo)


def _window_slices(spec: RfSpec, ho: int, wo: int):
    kh, kw = spec.kernel
    for ki in range(kh):
        for kj in range(kw):
            y0, x0 = ki * spec.dilation, kj * spec.dilation
            yield (slice(y0, y0 + spec.stride * (ho - 1) + 1, spec.stride),
                   slice(x0, x0 + spec.stride * (wo - 1) + 1, spec.stride))


def depth_windows(field: DepthField, spec: RfSpec) -> DepthWindows:
    if field.rate != spec.r_down:
        raise ValueError(f"depth rate {field.rate} != conv input rate {spec.r_down}")
    n, _, h, w = field.shape
    ho, wo = spec.output_hw(h, w)
    ph, pw = spec.padding
    pad = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    d = np.pad(field.depth[:, 0:1], pad)
    v = np.pad(field.valid[:, 0:1], pad)
    inside_img = np.pad(np.ones((n, 1, h, w), dtype=bool), pad)

    P = spec.n_offsets
    neighbor = np.empty((n, P, ho, wo))
    nvalid = np.empty((n, P, ho, wo), dtype=bool)
    inside = np.empty((n, P, ho, wo), dtype=bool)
    for p, (sy, sx) in enumerate(_window_slices(spec, ho, wo)):
        neighbor[:, p] = d[:, 0, sy, sx]
        nvalid[:, p] = v[:, 0, sy, sx]
        inside[:, p] = inside_img[:, 0, sy, sx]

    c = spec.center_offset
    center = neighbor[:, c:c + 1].copy()
    center_valid = nvalid[:, c:c + 1] & inside[:, c:c + 1]
    center = np.where(center_valid, center, 0.0)
    depth_ok = nvalid & inside & center_valid
    # invalid neighbour -> centre depth; invalid centre -> whole window flat
    neighbor = np.where(depth_ok, neighbor, center)
    return DepthWindows(center, neighbor, inside, depth_ok, center_valid)


@dataclass
class RelDiffField:
    values: np.ndarray  # (n, P, ho, wo), dimensionless
    inside: np.ndarray  # (n, P, ho, wo) window validity
    depth_ok: np.ndarray  # (n, P, ho, wo) both depths measured (not substituted)

    @property
    def shape(self):
        return self.values.shape


def relative_depth_differences(field: DepthField, cam: CameraIntrinsics, spec: RfSpec) -> RelDiffField:
    """(d_i - d_j) / (delta_p * d_i / f) for every window position and offset."""
    win = depth_windows(field, spec)
    f = effective_focal(cam)
    safe_center = np.where(win.center > 0, win.center, 1.0)
    values = (win.center - win.neighbor) * f / (spec.delta_p * safe_center)
    values = np.where(win.inside, values, 0.0)
    return RelDiffField(values, win.inside, win.depth_ok)
