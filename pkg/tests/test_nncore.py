import numpy as np
import pytest

from formrisk.nncore import (
    Adam,
    Conv,
    Dropout,
    FullyConnected,
    GlobalAveragePool,
    ModelFileError,
    NumericFault,
    ReLU,
    Sequential,
    Softmax,
    TrainConfig,
    class_weights,
    conv_output_size,
    load_network,
    mean_squared_error,
    save_network,
    train,
    weighted_cross_entropy,
)
from gradcheck import check_network, random_net, run_trials


def test_gradients_on_random_nets():
    assert max(run_trials(15, seed=42)) < 1e-4


def test_two_layer_dense_gradients():
    rng = np.random.default_rng(3)
    net = Sequential([FullyConnected(4, 6), ReLU(), FullyConnected(6, 2), Softmax()], seed=1, dtype=np.float64)
    for p, _ in net.parameters():
        p += rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(5, 4))
    assert check_network(net, x, rng.integers(0, 2, 5), np.ones(5)) < 1e-4


def test_mse_gradient():
    rng = np.random.default_rng(0)
    pred, target, w = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4)), rng.random(3)
    loss, g = mean_squared_error(pred, target, w)
    num = np.zeros_like(pred)
    for i in np.ndindex(pred.shape):
        d = np.zeros_like(pred)
        d[i] = 1e-6
        num[i] = (mean_squared_error(pred + d, target, w)[0] - mean_squared_error(pred - d, target, w)[0]) / 2e-6
    assert np.allclose(g, num, atol=1e-7)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    conv = Conv(2, 3, 3, stride=2, dilation=2)
    net = Sequential([conv], seed=0, dtype=np.float64)
    x = rng.normal(size=(1, 2, 7, 7))
    out = net.forward(x)
    W, b = conv.params["W"], conv.params["b"]
    pad = 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = conv_output_size(7, 3, 2, 2)
    ref = np.zeros((1, 3, ho, ho))
    for o in range(3):
        for i in range(ho):
            for j in range(ho):
                patch = xp[0, :, 2 * i : 2 * i + 5 : 2, 2 * j : 2 * j + 5 : 2]
                ref[0, o, i, j] = np.sum(patch * W[o]) + b[o]
    assert np.allclose(out, ref)


def test_gap_dropout_softmax_semantics():
    gap = Sequential([GlobalAveragePool()])
    assert np.allclose(gap.forward(np.full((2, 3, 4, 4), 2.5)), 2.5)
    drop = Sequential([Dropout(0.5)], dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(4, 8))
    assert np.array_equal(drop.forward(x, training=False), x)
    p = Sequential([Softmax()], dtype=np.float64).forward(np.random.default_rng(1).normal(size=(5, 4)) * 30)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_layer_spec_invariants():
    with pytest.raises(ValueError):
        Conv(1, 1, 2)
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_cross_entropy_edge_cases():
    probs = np.array([[0.3, 0.7], [0.6, 0.4]])
    loss, g = weighted_cross_entropy(probs, [1, 0], np.zeros(2))
    assert loss == 0.0 and not g.any()
    net = Sequential([Softmax()], dtype=np.float64)
    p = net.forward(np.array([[40.0, -40.0]]), training=True)
    _, g = weighted_cross_entropy(p, [0])
    assert np.allclose(net.backward(g), 0.0, atol=1e-12)


def test_backward_before_forward():
    net = Sequential([FullyConnected(2, 2)])
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 2)))


def test_numeric_fault_on_nonfinite():
    net = Sequential([FullyConnected(2, 2)], dtype=np.float64)
    with pytest.raises(NumericFault):
        net.forward(np.array([[np.inf, 0.0]]))


def test_class_weights_example():
    w = class_weights(np.array([0] * 90 + [1] * 10))
    assert w == pytest.approx([100 / 180, 5.0])
    assert w[0] == pytest.approx(0.5556, abs=1e-4)
    with pytest.raises(ValueError):
        class_weights(np.zeros(5, dtype=int), 2)


def test_balanced_weighting_is_neutral():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet([1, 1], size=6)
    y = np.array([0, 1] * 3)
    a = weighted_cross_entropy(probs, y, class_weights(y)[y])
    b = weighted_cross_entropy(probs, y)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def toy_net(seed=0):
    return Sequential([FullyConnected(2, 8), ReLU(), FullyConnected(8, 2), Softmax()], seed=seed)


def toy_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    return x, y


def test_separable_toy_reaches_high_auc():
    x, y = toy_data()
    res = train(toy_net(), x, y, TrainConfig(epochs=50, batch_size=36, lr=1e-2, seed=1))
    assert res.history[-1]["train_auc"] >= 0.99


def test_training_is_deterministic():
    x, y = toy_data()
    nets = [toy_net(), toy_net()]
    for net in nets:
        train(net, x, y, TrainConfig(epochs=3, lr=1e-3, seed=5))
    for a, b in zip(nets[0].get_state(), nets[1].get_state()):
        assert np.array_equal(a, b)


def test_full_batch_loss_nonincreasing():
    x, y = toy_data(64)
    net = toy_net(3).astype(np.float64)
    opt = Adam(net.parameters(), lr=1e-4)
    losses = []
    for _ in range(10):
        net.zero_grad()
        loss, g = weighted_cross_entropy(net.forward(x, training=True), y)
        net.backward(g)
        opt.step()
        losses.append(loss)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_empty_class_rejected():
    x, _ = toy_data(10)
    with pytest.raises(ValueError):
        train(toy_net(), x, np.zeros(10, dtype=int), TrainConfig(epochs=1))


def test_best_checkpoint_restored():
    x, y = toy_data(100)
    net = toy_net()
    res = train(net, x, y, TrainConfig(epochs=5, lr=1e-2), val_inputs=x, val_labels=y)
    assert res.best_val_auc == max(h["val_auc"] for h in res.history)


def test_serialization_roundtrip(tmp_path):
    net = Sequential([Conv(1, 2, 3, stride=2), ReLU(), GlobalAveragePool(), FullyConnected(2, 2), Softmax()], seed=4)
    save_network(tmp_path / "n.fnet", net)
    back = load_network(tmp_path / "n.fnet")
    x = np.random.default_rng(0).normal(size=(2, 1, 9, 9))
    assert np.array_equal(net.forward(x), back.forward(x))
    assert back.specs() == net.specs()


def test_corrupt_model_file(tmp_path):
    net = toy_net()
    save_network(tmp_path / "n.fnet", net)
    raw = bytearray((tmp_path / "n.fnet").read_bytes())
    raw[20] ^= 0xFF
    (tmp_path / "bad.fnet").write_bytes(bytes(raw))
    with pytest.raises(ModelFileError):
        load_network(tmp_path / "bad.fnet")
