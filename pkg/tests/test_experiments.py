import csv
from dataclasses import replace

import numpy as np

from malleable25d import experiments
from malleable25d.synth import SceneConfig


def _tiny():
    cfg = experiments.ExperimentConfig()
    cfg.scene = SceneConfig(n_scenes=6, height=12, width=12, min_size=3, max_size=5, texture=0.2)
    cfg.net = replace(cfg.net, channels=3)
    cfg.train = replace(cfg.train, iterations=2, batch_size=2)
    cfg.seeds = [0]
    return cfg


def test_noisy_scene_differs_only_in_regime_and_noise():
    cfg = experiments.ExperimentConfig()
    noisy = cfg.noisy_scene()
    assert noisy.regime == "outdoor" and noisy.noise_sigma > 0
    assert replace(noisy, regime=cfg.scene.regime, noise_sigma=cfg.scene.noise_sigma) == cfg.scene


def test_variants_and_csv(tmp_path):
    cfg = _tiny()
    results = experiments.run_all(cfg)
    by = {r.variant: r for r in results}
    assert set(by) == {"learned", "frozen", "standard", "noisy"}
    assert by["standard"].widths == {} and by["standard"].raw_entropy is None
    assert sorted(by["learned"].entropies) == [0, 2, 4]
    # frozen receptive fields keep the initial width
    assert len(set(by["frozen"].widths.values())) == 1
    path = tmp_path / "e.csv"
    experiments.write_results(path, results)
    rows = list(csv.DictReader(open(path)))
    assert [r["variant"] for r in rows] == ["learned", "frozen", "standard", "noisy"]
    assert float(rows[0]["block4_raw_entropy"]) == by["learned"].raw_entropy


def test_deterministic():
    a = experiments.run_variant("learned", 0, _tiny())
    b = experiments.run_variant("learned", 0, _tiny())
    assert a.test_acc == b.test_acc and a.entropies == b.entropies


def test_mean_helpers():
    rs = [experiments.RunResult("learned", s, acc, 0.0, {0: 1.0}, {0: (0.5, 0.5 + s)}) for s, acc in [(0, .5), (1, .7)]]
    assert np.isclose(experiments.mean_of(rs, "learned", "test_acc"), 0.6)
    assert experiments.mean_entropies(rs) == {0: (0.5, 1.0)}
    assert np.isnan(experiments.mean_of(rs, "frozen", "test_acc"))
