"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests.

Three comparisons are run on seeded synthetic scenes:

* learned receptive fields vs frozen ones vs plain convolutions,
* receptive-field width learned on noisy outdoor depth vs sharp indoor depth,
* kernel-mass entropy before and after rebalancing.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import assignment_histogram, entropy
from .network import NetConfig, ToyNet
from .rfield import rf_width
from .synth import SceneConfig, split
from .train import RFIELD_GROUPS, TrainConfig, evaluate, fit


def _indoor_scene() -> SceneConfig:
    return SceneConfig(n_scenes=640, test_fraction=0.2, seed=1, texture=0.2)


def _net() -> NetConfig:
    return NetConfig(kind="malleable", depth_blocks=[0, 2, 4])


def _train() -> TrainConfig:
    return TrainConfig(iterations=2000, base_lr=0.05)


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=_indoor_scene)
    net: NetConfig = field(default_factory=_net)
    train: TrainConfig = field(default_factory=_train)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    # the noisy regime differs from `scene` only in these two fields
    noisy_regime: str = "outdoor"
    noisy_sigma: float = 0.6

    def noisy_scene(self) -> SceneConfig:
        return replace(self.scene, regime=self.noisy_regime, noise_sigma=self.noisy_sigma)


@dataclass
class RunResult:
    variant: str
    seed: int
    test_acc: float
    seconds: float
    widths: dict  # block -> learned width
    entropies: dict = field(default_factory=dict)  # block -> (raw, rebalanced)

    @property
    def raw_entropy(self) -> float | None:
        return self.entropies[max(self.entropies)][0] if self.entropies else None

    @property
    def scaled_entropy(self) -> float | None:
        return self.entropies[max(self.entropies)][1] if self.entropies else None

    @property
    def mean_width(self) -> float:
        return float(np.mean(list(self.widths.values()))) if self.widths else float("nan")


def run_variant(variant: str, seed: int, cfg: ExperimentConfig, data=None) -> RunResult:
    """Train one model. ``variant`` is ``learned``, ``frozen``, ``standard`` or ``noisy``."""
    scene = cfg.noisy_scene() if variant == "noisy" else cfg.scene
    train, test = data if data is not None else split(scene)
    kind = "standard" if variant == "standard" else cfg.net.kind
    net = ToyNet(replace(cfg.net, kind=kind, seed=seed), scene.camera)
    freeze = list(RFIELD_GROUPS) if variant == "frozen" else []
    t0 = time.perf_counter()
    fit(net, train, replace(cfg.train, seed=seed, freeze=freeze))
    seconds = time.perf_counter() - t0
    result = RunResult(variant, seed, evaluate(net, test), seconds,
                       {i: rf_width(net.rfield(i)) for i in net.malleable_blocks()})
    for i in net.malleable_blocks():
        hist = assignment_histogram(net, test, i)
        result.entropies[i] = (entropy(hist.raw_ratio), entropy(hist.scaled_ratio))
    return result


def run_all(cfg: ExperimentConfig, variants=("learned", "frozen", "standard", "noisy"),
            progress=None) -> list[RunResult]:
    sharp = split(cfg.scene)
    noisy = split(cfg.noisy_scene()) if "noisy" in variants else None
    out = []
    for seed in cfg.seeds:
        for v in variants:
            r = run_variant(v, seed, cfg, noisy if v == "noisy" else sharp)
            if progress:
                progress(r)
            out.append(r)
    return out


def mean_of(results, variant: str, attr: str) -> float:
    vals = [getattr(r, attr) for r in results if r.variant == variant]
    return float(np.mean(vals)) if vals else float("nan")


def mean_entropies(results, variant: str = "learned") -> dict:
    """block -> (mean raw entropy, mean rebalanced entropy) over seeds."""
    rows = [r.entropies for r in results if r.variant == variant]
    return {b: tuple(float(np.mean([e[b][j] for e in rows])) for j in (0, 1)) for b in (rows[0] if rows else {})}


def write_results(path, results) -> None:
    blocks = sorted({b for r in results for b in r.widths})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "test_acc", "seconds", "mean_width", "raw_entropy", "scaled_entropy"]
                   + [f"block{b}_{c}" for b in blocks for c in ("width", "raw_entropy", "scaled_entropy")])
        for r in results:
            w.writerow([r.variant, r.seed, repr(r.test_acc), f"{r.seconds:.1f}", repr(r.mean_width),
                        "" if r.raw_entropy is None else repr(r.raw_entropy),
                        "" if r.scaled_entropy is None else repr(r.scaled_entropy)]
                       + [repr(v) if b in r.widths else "" for b in blocks
                          for v in (r.widths.get(b), *r.entropies.get(b, (None, None)))])
