"""Losses, momentum SGD with a poly schedule, the training loop and checkpoints."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kvfile, tensor
from .network import NetConfig, ToyNet
from .rfield import T_MIN, rebalance
from .synth import IGNORE, SceneSet


# ---------------------------------------------------------------- loss

def cross_entropy(logits, labels, bootstrap: float = 1.0, ignore: int = IGNORE):
    """Mean pixel cross-entropy and its gradient w.r.t. ``logits``.

    With ``bootstrap < 1`` only the hardest ``ceil(bootstrap * N)`` of the
    N non-ignored pixels are averaged.
    """
    n, C, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not 0 < bootstrap <= 1:
        raise ValueError("bootstrap fraction must lie in (0, 1]")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    keep = labels != ignore
    count = int(keep.sum())
    if count == 0:
        raise ValueError("every pixel is ignored")
    safe = np.where(keep, labels, 0)
    nll = -np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    selected = keep
    if bootstrap < 1:
        top = math.ceil(bootstrap * count)
        flat = np.where(keep, nll, -np.inf).reshape(-1)
        # stable sort keeps tie-breaking deterministic
        order = np.argsort(-flat, kind="stable")[:top]
        selected = np.zeros(flat.size, dtype=bool)
        selected[order] = True
        selected = selected.reshape(keep.shape)
    m = int(selected.sum())
    loss = float(nll[selected].sum() / m)
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= (selected / m)[:, None]
    return loss, grad


def pixel_accuracy(logits, labels, ignore: int = IGNORE) -> float:
    keep = labels != ignore
    pred = logits.argmax(axis=1)
    return float((pred[keep] == labels[keep]).mean())


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    base_lr: float = 0.01
    power: float = 0.9
    max_iter: int = 2000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iteration: int = 0
    buffers: dict = field(default_factory=dict)

    def lr(self, iteration: int | None = None) -> float:
        it = self.iteration if iteration is None else iteration
        frac = max(0.0, 1.0 - it / self.max_iter)
        return self.base_lr * frac ** self.power


def sgd_step(params: dict, grads: dict, state: OptimState, decay: set = frozenset(),
             frozen: set = frozenset(), lr_mult: dict | None = None) -> None:
    """One in-place momentum SGD update (PyTorch convention).

    ``v <- momentum * v + (grad + wd * p)`` and ``p <- p - lr * v``; weight
    decay only for names in ``decay``; names in ``frozen`` are skipped;
    every ``*.t`` is clamped to ``T_MIN`` afterwards.
    """
    for name, g in grads.items():
        if name in frozen:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    lr = state.lr()
    state.iteration += 1
    if lr == 0.0:
        return
    for name in sorted(grads):
        if name in frozen:
            continue
        p = params[name]
        g = grads[name]
        if name in decay and state.weight_decay:
            g = g + state.weight_decay * p
        v = state.buffers.get(name)
        if v is None:
            v = state.buffers[name] = np.zeros_like(p)
        v *= state.momentum
        v += g
        scale = lr * (lr_mult or {}).get(name, 1.0)
        p -= scale * v
        if name.endswith(".t"):
            np.maximum(p, T_MIN, out=p)


# ---------------------------------------------------------------- training loop

RFIELD_GROUPS = ("a", "t", "b")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    rfield_lr_mult: float = 1.0
    loss: str = "ce"  # ce | bootstrap
    bootstrap_fraction: float = 0.25
    freeze: list = field(default_factory=list)  # subset of ["a", "t", "b"]
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("ce", "bootstrap"):
            raise ValueError(f"train.loss must be 'ce' or 'bootstrap', got {self.loss!r}")
        bad = set(self.freeze) - set(RFIELD_GROUPS)
        if bad:
            raise ValueError(f"train.freeze accepts only {RFIELD_GROUPS}, got {sorted(bad)}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


def batch_indices(seed: int, iteration: int, n: int, size: int) -> np.ndarray:
    r = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xBA7C, int(iteration)])))
    return np.sort(r.choice(n, size=min(size, n), replace=False))


def optim_for(cfg: TrainConfig) -> OptimState:
    return OptimState(cfg.base_lr, cfg.power, max(cfg.iterations, 1), cfg.momentum, cfg.weight_decay)


def frozen_names(net: ToyNet, groups) -> set:
    return {f"block{i}.{g}" for i in net.malleable_blocks() for g in groups}


def evaluate(net: ToyNet, data: SceneSet, batch: int = 32) -> float:
    correct = total = 0
    for start in range(0, len(data), batch):
        idx = np.arange(start, min(start + batch, len(data)))
        x, depth, labels = data.batch(idx)
        logits = net.forward(x, depth, train=False)
        keep = labels != IGNORE
        correct += int((logits.argmax(axis=1)[keep] == labels[keep]).sum())
        total += int(keep.sum())
    return correct / max(total, 1)


def log_columns(net: ToyNet) -> list[str]:
    cols = ["iter", "lr", "loss", "pixel_acc"]
    K = net.cfg.kernels
    for i in net.malleable_blocks():
        cols += [f"block{i}.a{m}" for m in range(K + 2)]
        cols += [f"block{i}.t"]
        cols += [f"block{i}.s{k}" for k in range(K)]
    return cols


def _log_row(net, it, lr, loss, acc):
    row = [it, lr, loss, acc]
    for i in net.malleable_blocks():
        row += list(net.params[f"block{i}.a"]) + [net.params[f"block{i}.t"][0]]
        row += list(rebalance(net.params[f"block{i}.b"]))
    return [repr(float(v)) if not isinstance(v, int) else str(v) for v in row]


def fit(net: ToyNet, train: SceneSet, cfg: TrainConfig, state: OptimState | None = None,
        log_path=None, progress=None) -> tuple[list, OptimState]:
    """Train ``net`` in place until ``cfg.iterations``; returns (log rows, optimizer state).

    Resuming from a checkpoint passes its ``state``; batches depend only on
    (seed, iteration) so a resumed run follows the uninterrupted one exactly.
    """
    state = state or optim_for(cfg)
    frozen = frozen_names(net, cfg.freeze)
    decay = net.decay_names()
    mult = {f"block{i}.{g}": cfg.rfield_lr_mult for i in net.malleable_blocks() for g in RFIELD_GROUPS}
    rows = []
    writer = fh = None
    if log_path is not None:
        new = state.iteration == 0 or not os.path.exists(log_path)
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(log_columns(net))
    try:
        while state.iteration < cfg.iterations:
            it = state.iteration
            idx = batch_indices(cfg.seed, it, len(train), cfg.batch_size)
            x, depth, labels = train.batch(idx)
            logits = net.forward(x, depth, train=True)
            frac = cfg.bootstrap_fraction if cfg.loss == "bootstrap" else 1.0
            loss, grad = cross_entropy(logits, labels, frac)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at iteration {it}")
            grads = net.backward(grad)
            lr = state.lr()
            sgd_step(net.params, grads, state, decay, frozen, mult)
            if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
                row = _log_row(net, it + 1, lr, loss, pixel_accuracy(logits, labels))
                rows.append(row)
                if writer:
                    writer.writerow(row)
                    fh.flush()
                if progress:
                    progress(it + 1, loss)
    finally:
        if fh:
            fh.close()
    return rows, state


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, net: ToyNet, state: OptimState) -> None:
    """Directory of ``.t4`` tensors plus ``net.toml``, ``rfield.toml`` and ``optim.toml``."""
    os.makedirs(directory, exist_ok=True)
    for sub in ("params", "buffers", "momentum"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    for name, v in net.params.items():
        tensor.save(os.path.join(directory, "params", f"{name}.t4"), v)
    for name, v in net.buffers.items():
        tensor.save(os.path.join(directory, "buffers", f"{name}.t4"), v)
    for name, v in state.buffers.items():
        tensor.save(os.path.join(directory, "momentum", f"{name}.t4"), v)
    net_kv = {k: v for k, v in asdict(net.cfg).items() if v is not None}
    cam = net.camera
    net_kv.update({"camera.fx": cam.fx, "camera.fy": cam.fy, "camera.cx": cam.cx, "camera.cy": cam.cy})
    kvfile.write_kv(os.path.join(directory, "net.toml"), net_kv)
    rf = {}
    for i in net.malleable_blocks():
        rf.update(net.rfield(i).to_kv(f"block{i}."))
    kvfile.write_kv(os.path.join(directory, "rfield.toml"), rf)
    opt = {k: v for k, v in asdict(state).items() if k != "buffers"}
    kvfile.write_kv(os.path.join(directory, "optim.toml"), opt)


def load_checkpoint(directory) -> tuple[ToyNet, OptimState]:
    from .geometry import CameraIntrinsics

    if not os.path.isdir(directory):
        raise FileNotFoundError(f"checkpoint directory not found: {directory}")
    kv = kvfile.read_kv(os.path.join(directory, "net.toml"))
    cam = CameraIntrinsics(kv.pop("camera.fx"), kv.pop("camera.fy"), kv.pop("camera.cx"), kv.pop("camera.cy"))
    net = ToyNet(NetConfig(**kv), cam)
    for name in net.params:
        net.params[name] = tensor.load(os.path.join(directory, "params", f"{name}.t4"))
    for name in net.buffers:
        net.buffers[name] = tensor.load(os.path.join(directory, "buffers", f"{name}.t4"))
    state = OptimState(**kvfile.read_kv(os.path.join(directory, "optim.toml")))
    mdir = os.path.join(directory, "momentum")
    for fname in sorted(os.listdir(mdir)):
        state.buffers[fname[:-3]] = tensor.load(os.path.join(mdir, fname))
    return net, state
