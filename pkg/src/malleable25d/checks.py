"""Randomized verification suites: analytical gradients vs finite differences,
and fast operators vs the brute-force oracle."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import convops, oracle
from .geometry import CameraIntrinsics, DepthField, RfSpec, effective_focal
from .rfield import RFieldParams


@dataclass
class GradcheckConfig:
    trials: int = 100
    max_batch: int = 2
    max_channels: int = 4
    max_size: int = 9
    kernels: list = field(default_factory=lambda: [1, 3, 5])
    step: float = 1e-5
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("gradcheck.trials must be >= 1")
        if self.step <= 0 or self.tol <= 0:
            raise ValueError("gradcheck.step and gradcheck.tol must be positive")


@dataclass
class OracleConfig:
    trials: int = 50
    max_batch: int = 2
    max_channels: int = 4
    max_size: int = 9
    kernels: list = field(default_factory=lambda: [1, 3, 5])
    tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("oracle.trials must be >= 1")


@dataclass
class Instance:
    x: np.ndarray
    depth: DepthField
    cam: CameraIntrinsics
    spec: RfSpec
    weights: np.ndarray  # (K, c_out, c_in, kh, kw)
    bias: np.ndarray
    rfield: RFieldParams
    alpha: float


def random_instance(r: np.random.Generator, K: int, max_batch=2, max_channels=4, max_size=9) -> Instance:
    n = int(r.integers(1, max_batch + 1))
    c_in = int(r.integers(1, max_channels + 1))
    c_out = int(r.integers(1, max_channels + 1))
    h = int(r.integers(3, max_size + 1))
    w = int(r.integers(3, max_size + 1))
    kh, kw = [int(v) for v in r.choice([1, 3], size=2, p=[0.2, 0.8])]
    dilation = int(r.integers(1, 3))
    stride = int(r.integers(1, 3))
    r_down = int(r.choice([1, 2, 4]))
    spec = RfSpec(kernel=(kh, kw), dilation=dilation, stride=stride, r_down=r_down)
    if min(spec.output_hw(h, w)) < 1:
        spec = RfSpec(kernel=(kh, kw), r_down=r_down)
    focal = float(r.uniform(20, 80))
    cam = CameraIntrinsics(focal * r.uniform(0.98, 1.02), focal, w / 2, h / 2)
    # piecewise depth: a base plane plus a step so every operator sees structure
    base = r.uniform(1.0, 5.0)
    unit = r_down * dilation * base / focal
    depth = base + unit * r.normal(0, 1.5, size=(n, 1, h, w))
    step_col = int(r.integers(0, w))
    depth[..., step_col:] += unit * r.uniform(-4, 4)
    valid = r.random((n, 1, h, w)) > 0.1
    a = np.sort(r.normal(0, 1.5, size=K + 2)) + np.arange(K + 2) * 0.3
    rf = RFieldParams(a, float(r.uniform(0.3, 3.0)), r.normal(0, 1, size=K))
    return Instance(
        x=r.standard_normal((n, c_in, h, w)),
        depth=DepthField(depth, valid, r_down),
        cam=cam,
        spec=spec,
        weights=r.standard_normal((K, c_out, c_in, kh, kw)),
        bias=r.standard_normal(c_out),
        rfield=rf,
        alpha=float(r.uniform(0.5, 10.0)),
    )


def group_error(analytic, numeric) -> float:
    """max |analytic - numeric| relative to the group's largest numeric entry."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


@dataclass
class GradResult:
    op: str
    param: str
    worst: float
    trial: int
    index: int


def _malleable_groups(inst: Instance, target, step):
    p = convops.MalleableParams(inst.weights, inst.rfield, inst.spec, inst.bias)
    t_box = np.array([inst.rfield.t])

    def loss():
        p.rfield.t = float(t_box[0])
        y = convops.malleable_forward(inst.x, inst.depth, inst.cam, p)
        return 0.5 * float(np.sum((y - target) ** 2))

    y, cache = convops.malleable_forward(inst.x, inst.depth, inst.cam, p, with_cache=True)
    g = convops.malleable_backward(y - target, cache)
    for name, analytic, theta in (("x", g.x, inst.x), ("w", g.weights, p.weights), ("bias", g.bias, p.bias),
                                  ("a", g.a, p.rfield.a), ("t", np.array([g.t]), t_box), ("b", g.b, p.rfield.b)):
        yield name, analytic, oracle.fd_gradient(loss, theta, step)


def _baseline_groups(kind: str, inst: Instance, target, step):
    if kind == "standard":
        w = inst.weights[0]
        fwd = lambda: convops.conv2d_forward(inst.x, w, inst.spec, inst.bias, with_cache=True)
    elif kind == "depthaware":
        w = inst.weights[0]
        p = convops.DepthAwareParams(w, inst.alpha, inst.spec, inst.bias)
        fwd = lambda: convops.depthaware_forward(inst.x, inst.depth, p, with_cache=True)
    else:
        w = inst.weights
        p = convops.Hard25DParams(w, inst.spec, inst.bias)
        fwd = lambda: convops.hard25d_forward(inst.x, inst.depth, inst.cam, p, with_cache=True)

    def loss():
        return 0.5 * float(np.sum((fwd()[0] - target) ** 2))

    y, cache = fwd()
    if kind == "standard":
        gx, gw, gb = convops.conv2d_backward(y - target, cache)
    else:
        gx, gw, gb = convops.fixed_mask_backward(y - target, cache)
        if kind == "depthaware":
            gw = gw[0]
    for name, analytic, theta in (("x", gx, inst.x), ("w", gw, w), ("bias", gb, inst.bias)):
        yield name, analytic, oracle.fd_gradient(loss, theta, step)


def _target(r, inst: Instance):
    ho, wo = inst.spec.output_hw(*inst.x.shape[2:])
    return r.standard_normal((inst.x.shape[0], inst.weights.shape[1], ho, wo))


def run_gradient_suite(cfg: GradcheckConfig, ops=("malleable", "standard", "depthaware", "hard25d")):
    """Worst relative error per (op, param group) over ``cfg.trials`` random instances.

    Baseline operators get a quarter of the trials (at least one).
    """
    r = np.random.default_rng(cfg.seed)
    worst: dict[tuple[str, str], GradResult] = {}
    for op in ops:
        trials = cfg.trials if op == "malleable" else max(1, cfg.trials // 4)
        for trial in range(trials):
            K = int(cfg.kernels[trial % len(cfg.kernels)]) if op in ("malleable", "hard25d") else 1
            inst = random_instance(r, K, cfg.max_batch, cfg.max_channels, cfg.max_size)
            target = _target(r, inst)
            groups = (_malleable_groups(inst, target, cfg.step) if op == "malleable"
                      else _baseline_groups(op, inst, target, cfg.step))
            for name, analytic, numeric in groups:
                err = group_error(analytic, numeric)
                diff = np.abs(np.asarray(analytic).reshape(-1) - numeric.reshape(-1))
                key = (op, name)
                if key not in worst or err > worst[key].worst:
                    worst[key] = GradResult(op, name, err, trial, int(np.argmax(diff)))
    return list(worst.values())


def oracle_forward(kind: str, inst: Instance) -> np.ndarray:
    s = inst.spec
    common = dict(dilation=s.dilation, stride=s.stride, padding=s.padding, r_down=s.r_down, bias=inst.bias)
    if kind == "standard":
        return oracle.naive_forward("standard", inst.x, inst.weights[0], **common)
    dep = dict(depth=inst.depth.depth, valid=inst.depth.valid)
    if kind == "depthaware":
        return oracle.naive_forward("depthaware", inst.x, inst.weights[0], alpha=inst.alpha, **dep, **common)
    focal = effective_focal(inst.cam)
    if kind == "hard25d":
        return oracle.naive_forward("hard25d", inst.x, inst.weights, focal=focal, **dep, **common)
    rf = inst.rfield
    return oracle.naive_forward("malleable", inst.x, inst.weights, focal=focal, a=rf.a, t=rf.t, b=rf.b,
                                **dep, **common)


def fast_forward(kind: str, inst: Instance) -> np.ndarray:
    if kind == "standard":
        return convops.conv2d_forward(inst.x, inst.weights[0], inst.spec, inst.bias)
    if kind == "depthaware":
        return convops.depthaware_forward(inst.x, inst.depth,
                                          convops.DepthAwareParams(inst.weights[0], inst.alpha, inst.spec, inst.bias))
    if kind == "hard25d":
        return convops.hard25d_forward(inst.x, inst.depth, inst.cam,
                                       convops.Hard25DParams(inst.weights, inst.spec, inst.bias))
    return convops.malleable_forward(inst.x, inst.depth, inst.cam,
                                     convops.MalleableParams(inst.weights, inst.rfield, inst.spec, inst.bias))


def run_oracle_suite(cfg: OracleConfig, ops=("standard", "malleable", "depthaware", "hard25d")):
    """Max absolute fast-vs-oracle difference per operator over ``cfg.trials`` instances each."""
    r = np.random.default_rng(cfg.seed)
    worst = {}
    for op in ops:
        worst[op] = 0.0
        for trial in range(cfg.trials):
            K = int(cfg.kernels[trial % len(cfg.kernels)]) if op in ("malleable", "hard25d") else 1
            inst = random_instance(r, K, cfg.max_batch, cfg.max_channels, cfg.max_size)
            diff = float(np.max(np.abs(fast_forward(op, inst) - oracle_forward(op, inst))))
            worst[op] = max(worst[op], diff)
    return worst
