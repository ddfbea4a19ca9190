import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from malleable25d import oracle, synth, train
from malleable25d.geometry import CameraIntrinsics, DepthField
from malleable25d.network import NetConfig, ToyNet
from malleable25d.synth import IGNORE, SceneConfig

CAM = CameraIntrinsics(20.0, 20.0, 4.0, 4.0)


def tiny_net(**kw):
    base = dict(channels=3, dilations=[1, 2], kernels=3)
    base.update(kw)
    return ToyNet(NetConfig(**base), CAM)


def test_init_defaults():
    net = tiny_net()
    for i in net.malleable_blocks():
        rf = net.rfield(i)
        assert rf.a.tolist() == [-2, -1, 0, 1, 2] and rf.t == 1.0 and rf.b.tolist() == [0, 0, 0]
    assert tiny_net(kernels=1).rfield(0).a.tolist() == [-1, 0, 1]
    a, b = tiny_net(seed=5), tiny_net(seed=5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["block0.weight"], tiny_net(seed=6).params["block0.weight"])


def test_config_validation():
    for bad in (dict(kind="fancy"), dict(kernels=0), dict(pool_after=[7]), dict(depth_blocks=[9]),
                dict(init_a=[0.0, 1.0]), dict(init_b=[0.0])):
        with pytest.raises(ValueError):
            NetConfig(**bad)


def test_depth_blocks_placement():
    net = tiny_net(dilations=[1, 1, 1], depth_blocks=[1])
    assert net.malleable_blocks() == [1]
    assert "block0.a" not in net.params and net.params["block0.weight"].ndim == 4


@pytest.mark.parametrize("kind", ["malleable", "standard", "depthaware", "hard25d"])
def test_network_gradient_fd(kind):
    r = np.random.default_rng(0)
    net = tiny_net(kind=kind, pool_after=[0], dilations=[1, 1], duplicate_banks=False)
    x = r.uniform(size=(2, 3, 8, 8))
    depth = DepthField(2.0 + 0.3 * r.standard_normal((2, 1, 8, 8)))
    labels = r.integers(0, 3, size=(2, 8, 8))
    labels[0, 0, :3] = IGNORE

    def loss():
        return train.cross_entropy(net.forward(x, depth, train=True, keep=False), labels)[0]

    # pooled logits repeat in 2x2 blocks, so a bootstrap cut would be ambiguous here
    _, grad = train.cross_entropy(net.forward(x, depth, train=True), labels)
    grads = net.backward(grad)
    assert set(grads) == set(net.params)
    for name, g in grads.items():
        num = oracle.fd_gradient(loss, net.params[name], 1e-6)
        scale = max(np.abs(num).max(), 1e-4)
        assert np.abs(g - num).max() / scale < 1e-5, name


def test_backward_requires_forward():
    with pytest.raises(RuntimeError):
        tiny_net().backward(np.zeros((1, 3, 4, 4)))


def test_constant_depth_mirror_antisymmetry():
    net = tiny_net()
    r = np.random.default_rng(1)
    x = r.uniform(size=(2, 3, 8, 8))
    labels = r.integers(0, 3, size=(2, 8, 8))
    _, g = train.cross_entropy(net.forward(x, DepthField(np.full((2, 1, 8, 8), 3.0))), labels)
    grads = net.backward(g)
    for i in net.malleable_blocks():
        ga = grads[f"block{i}.a"]
        assert abs(ga[1] + ga[3]) < 1e-8 and abs(ga[0] + ga[4]) < 1e-8


# ---------------------------------------------------------------- loss

def test_uniform_logits_give_log_c():
    loss, _ = train.cross_entropy(np.zeros((2, 4, 3, 3)), np.zeros((2, 3, 3), dtype=int))
    assert loss == pytest.approx(math.log(4), rel=1e-15)


@given(st.integers(0, 10**6))
def test_bootstrap_one_equals_plain(seed):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((2, 3, 4, 4))
    labels = r.integers(0, 3, size=(2, 4, 4))
    a, ga = train.cross_entropy(logits, labels)
    b, gb = train.cross_entropy(logits, labels, bootstrap=1.0)
    assert a == b and np.array_equal(ga, gb)


def test_bootstrap_keeps_hardest():
    logits = np.zeros((1, 2, 1, 4))
    logits[0, 0, 0] = [5.0, 1.0, -1.0, -5.0]
    labels = np.zeros((1, 1, 4), dtype=int)
    loss, grad = train.cross_entropy(logits, labels, bootstrap=0.5)
    nll = np.log1p(np.exp(-logits[0, 0, 0]))
    assert loss == pytest.approx(nll[2:].mean(), rel=1e-12)
    assert np.all(grad[0, :, 0, :2] == 0)

    def loss():
        return train.cross_entropy(logits, labels, bootstrap=0.5)[0]

    np.testing.assert_allclose(grad, oracle.fd_gradient(loss, logits, 1e-6), atol=1e-9)


def test_confident_correct_logits_give_zero_loss():
    logits = np.zeros((1, 3, 2, 2))
    logits[:, 1] = 1e3
    loss, grad = train.cross_entropy(logits, np.ones((1, 2, 2), dtype=int))
    assert loss == 0.0 and np.abs(grad).max() == 0.0


def test_all_ignored_rejected():
    with pytest.raises(ValueError):
        train.cross_entropy(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), IGNORE))


# ---------------------------------------------------------------- optimizer

def test_poly_schedule():
    s = train.OptimState(base_lr=0.1, power=0.9, max_iter=100)
    lrs = [s.lr(i) for i in range(101)]
    assert lrs[0] == 0.1 and lrs[-1] == 0.0
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_zero_grad_only_decays_weights():
    params = {"c.weight": np.ones(3), "c.a": np.ones(5), "c.t": np.ones(1)}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    s = train.OptimState(base_lr=0.1, max_iter=10, momentum=0.9, weight_decay=0.01)
    train.sgd_step(params, grads, s, decay={"c.weight"})
    np.testing.assert_allclose(params["c.weight"], 1 - 0.1 * 0.01)
    assert np.all(params["c.a"] == 1.0) and params["c.t"][0] == 1.0


def test_no_update_at_max_iter():
    params = {"w.weight": np.ones(2)}
    s = train.OptimState(base_lr=0.1, max_iter=5, iteration=5)
    train.sgd_step(params, {"w.weight": np.ones(2)}, s, decay={"w.weight"})
    assert np.all(params["w.weight"] == 1.0) and s.iteration == 6


def test_momentum_recurrence_by_hand():
    p = {"x": np.array([1.0])}
    s = train.OptimState(base_lr=0.1, power=0.0, max_iter=10**9, momentum=0.9, weight_decay=0.0)
    train.sgd_step(p, {"x": np.array([2.0])}, s)
    assert p["x"][0] == pytest.approx(0.8, rel=1e-15)
    train.sgd_step(p, {"x": np.array([2.0])}, s)
    assert p["x"][0] == pytest.approx(0.8 - 0.1 * 3.8, rel=1e-15)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5), st.floats(1e-4, 1.0))
def test_plain_gradient_descent_without_momentum(grad, lr):
    g = np.array(grad)
    p = {"x": np.zeros_like(g)}
    s = train.OptimState(base_lr=lr, power=0.0, max_iter=10**9, momentum=0.0, weight_decay=0.0)
    train.sgd_step(p, {"x": g}, s)
    assert np.array_equal(p["x"], 0.0 - lr * g)


def test_temperature_clamped_and_nonfinite_named():
    p = {"block0.t": np.array([0.01])}
    s = train.OptimState(base_lr=1.0, power=0.0, max_iter=10)
    train.sgd_step(p, {"block0.t": np.array([5.0])}, s)
    assert p["block0.t"][0] == 1e-3
    with pytest.raises(FloatingPointError, match="block0.t"):
        train.sgd_step(p, {"block0.t": np.array([np.nan])}, s)


def test_frozen_params_untouched():
    p = {"block0.a": np.zeros(5), "block0.weight": np.zeros(2)}
    s = train.OptimState(base_lr=1.0, max_iter=10, weight_decay=0.0)
    train.sgd_step(p, {k: np.ones_like(v) for k, v in p.items()}, s, frozen={"block0.a"})
    assert np.all(p["block0.a"] == 0) and np.all(p["block0.weight"] < 0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        train.TrainConfig(loss="hinge")
    with pytest.raises(ValueError):
        train.TrainConfig(freeze=["w"])


# ---------------------------------------------------------------- loop and checkpoints

@pytest.fixture(scope="module")
def toy_data():
    cfg = SceneConfig(height=12, width=12, n_scenes=12, min_size=3, max_size=5, focal=20.0)
    return synth.split(cfg)


def test_fit_is_deterministic(toy_data, tmp_path):
    tr, _ = toy_data
    cfg = train.TrainConfig(iterations=6, batch_size=3, log_every=2, base_lr=0.05)
    logs = []
    for name in ("a.csv", "b.csv"):
        net = ToyNet(NetConfig(channels=3, dilations=[1, 2]), tr.camera)
        train.fit(net, tr, cfg, log_path=tmp_path / name)
        logs.append((tmp_path / name).read_text())
    assert logs[0] == logs[1]
    header = logs[0].splitlines()[0].split(",")
    assert header[:4] == ["iter", "lr", "loss", "pixel_acc"] and "block1.t" in header
    assert len(logs[0].splitlines()) == 4


def test_zero_iterations_checkpoint_is_init(toy_data, tmp_path):
    tr, _ = toy_data
    net = ToyNet(NetConfig(channels=3, dilations=[1, 2]), tr.camera)
    init = {k: v.copy() for k, v in net.params.items()}
    _, state = train.fit(net, tr, train.TrainConfig(iterations=0))
    train.save_checkpoint(tmp_path / "ck", net, state)
    back, _ = train.load_checkpoint(tmp_path / "ck")
    assert all(np.array_equal(back.params[k], init[k]) for k in init)


def test_resume_is_bit_exact(toy_data, tmp_path):
    tr, _ = toy_data
    cfg = train.TrainConfig(iterations=6, batch_size=3, base_lr=0.05)
    full = ToyNet(NetConfig(channels=3, dilations=[1, 2]), tr.camera)
    train.fit(full, tr, cfg)

    half = ToyNet(NetConfig(channels=3, dilations=[1, 2]), tr.camera)
    state = train.optim_for(cfg)
    train.fit(half, tr, train.TrainConfig(iterations=3, batch_size=3, base_lr=0.05), state=state)
    state.max_iter = cfg.iterations  # first leg used its own horizon; restore the real one
    train.save_checkpoint(tmp_path / "ck", half, state)
    resumed, st_ = train.load_checkpoint(tmp_path / "ck")
    train.fit(resumed, tr, cfg, state=st_)
    assert all(np.array_equal(resumed.params[k], full.params[k]) for k in full.params)


def test_frozen_fit_keeps_rfield(toy_data):
    tr, _ = toy_data
    net = ToyNet(NetConfig(channels=3, dilations=[1, 2]), tr.camera)
    train.fit(net, tr, train.TrainConfig(iterations=3, batch_size=3, freeze=["a", "t", "b"]))
    assert net.rfield(0).a.tolist() == [-2, -1, 0, 1, 2] and net.rfield(1).t == 1.0
    assert 0.0 <= train.evaluate(net, tr) <= 1.0


def test_missing_checkpoint_dir():
    with pytest.raises(FileNotFoundError):
        train.load_checkpoint("/nonexistent/ck")
