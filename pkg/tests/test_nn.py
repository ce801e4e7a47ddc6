import numpy as np
import pytest

from pcreg import autodiff as ad
from pcreg.autodiff import KinkMonitor, Tape, Tensor, grad_check
from pcreg.errors import CheckpointError, ParameterError, ShapeError, TrainingError
from pcreg.nn import (
    Adam,
    DenseLayer,
    EdgeConv,
    Mlp,
    PointNorm,
    adam_step,
    edge_conv,
    knn_graph,
    load_checkpoint,
    lr_schedule,
    mlp_forward,
    save_checkpoint,
)


def test_identity_mlp_passes_input_through():
    rng = np.random.default_rng(0)
    mlp = Mlp([5, 5], rng, init="identity")
    x = rng.normal(size=(7, 5))
    np.testing.assert_array_equal(mlp_forward(mlp, x).data, x)


def test_zero_input_zero_bias_gives_zero():
    rng = np.random.default_rng(1)
    mlp = Mlp([4, 4], rng)
    assert np.array_equal(mlp(np.zeros((3, 4))).data, np.zeros((3, 4)))


def test_mlp_matches_unrolled_oracle():
    rng = np.random.default_rng(2)
    mlp = Mlp([3, 6, 5, 2], rng, final_activation="sigmoid")
    for norm in mlp.norms:
        norm.gamma.data = rng.uniform(0.5, 1.5, norm.gamma.shape)
        norm.beta.data = rng.normal(size=norm.beta.shape)
    x = rng.normal(size=(9, 3))
    h = x
    for i, layer in enumerate(mlp.layers):
        h = h @ layer.weight.data.T + layer.bias.data
        if i < 2:
            g, b = mlp.norms[i].gamma.data, mlp.norms[i].beta.data
            h = (h - h.mean(0)) / np.sqrt(h.var(0) + 1e-5) * g + b
            h = np.maximum(h, 0)
    h = 1 / (1 + np.exp(-h))
    np.testing.assert_allclose(mlp(x).data, h, atol=1e-10)


def test_mlp_width_errors():
    rng = np.random.default_rng(3)
    with pytest.raises(ParameterError):
        Mlp([3], rng)
    with pytest.raises(ShapeError):
        Mlp([3, 4], rng)(np.zeros((2, 5)))
    with pytest.raises(ParameterError):
        Mlp([3, 4], rng, final_activation="tanh")


def test_eval_mode_deterministic_and_uses_running_stats():
    rng = np.random.default_rng(4)
    mlp = Mlp([3, 8, 1], rng)
    for _ in range(5):
        mlp(rng.normal(size=(20, 3)))
    mlp.eval()
    x = rng.normal(size=(6, 3))
    a, b = mlp(x).data, mlp(x).data
    assert np.array_equal(a, b)
    # one-row batches work in eval mode because statistics are fixed
    np.testing.assert_allclose(mlp(x[:1]).data, a[:1], atol=1e-15)


def test_point_norm_running_stats():
    pn = PointNorm(2, momentum=0.5)
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    pn(x)
    np.testing.assert_allclose(pn.running_mean, 0.5 * np.array([2.0, 4.0]))
    np.testing.assert_allclose(pn.running_var, 0.5 * 1.0 + 0.5 * np.array([2.0, 8.0]))
    assert np.all(pn.running_var >= 0)


def test_point_norm_cumulative_average():
    pn = PointNorm(3, momentum=None)
    rng = np.random.default_rng(0)
    batches = [rng.normal(size=(int(rng.integers(2, 9)), 3)) * 2 + 1 for _ in range(5)]
    for b in batches:
        pn(b)
    np.testing.assert_allclose(pn.running_mean, np.mean([b.mean(0) for b in batches], axis=0), atol=1e-12)
    np.testing.assert_allclose(pn.running_var, np.mean([b.var(0, ddof=1) for b in batches], axis=0), atol=1e-12)
    pn.reset_stats()
    assert pn.updates == 0 and np.all(pn.running_mean == 0) and np.all(pn.running_var == 1)


def test_modules_walks_every_block():
    mlp = Mlp([3, 4, 5, 1], np.random.default_rng(0))
    kinds = [type(m).__name__ for m in mlp.modules()]
    assert kinds[0] == "Mlp" and kinds.count("DenseLayer") == 3 and kinds.count("PointNorm") == 2


def test_state_dict_round_trip():
    rng = np.random.default_rng(5)
    a, b = Mlp([3, 4, 2], rng), Mlp([3, 4, 2], rng)
    a(rng.normal(size=(5, 3)))
    b.load_state_dict(a.state_dict())
    for (ka, va), (kb, vb) in zip(sorted(a.state_dict().items()), sorted(b.state_dict().items())):
        assert ka == kb and np.array_equal(va, vb)
    with pytest.raises(CheckpointError):
        b.load_state_dict({})


def naive_edge_conv(layer: EdgeConv, x, nbrs):
    W, b = layer.dense.weight.data, layer.dense.bias.data
    n, k = nbrs.shape
    pre = np.zeros((n, k, W.shape[0]))
    for i in range(n):
        for a in range(k):
            j = nbrs[i, a]
            pre[i, a] = W @ np.concatenate([x[i], x[j] - x[i]]) + b
    flat = pre.reshape(n * k, -1)
    flat = (flat - flat.mean(0)) / np.sqrt(flat.var(0) + 1e-5)
    flat = flat * layer.norm.gamma.data + layer.norm.beta.data
    return np.maximum(flat, 0).reshape(n, k, -1).max(axis=1)


def naive_knn(x, k):
    out = []
    for i in range(len(x)):
        d = np.sum((x - x[i]) ** 2, axis=1)
        out.append(np.lexsort((np.arange(len(x)), d))[:k])
    return np.array(out)


def test_knn_graph_matches_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(10):
        x = rng.normal(size=(40, 4))
        assert np.array_equal(knn_graph(x, 7), naive_knn(x, 7))
    with pytest.raises(ParameterError):
        knn_graph(np.zeros((3, 3)), 3)


def test_edge_conv_matches_double_loop_oracle():
    rng = np.random.default_rng(7)
    layer = EdgeConv(3, 4, 2, rng)
    layer.norm.gamma.data = rng.uniform(0.5, 1.5, 4)
    layer.norm.beta.data = rng.normal(size=4)
    x = rng.normal(size=(5, 3))
    out, nbrs = layer(x)
    assert np.array_equal(nbrs, naive_knn(x, 2))
    np.testing.assert_allclose(out.data, naive_edge_conv(layer, x, nbrs), atol=1e-10)


def test_edge_conv_identical_points():
    rng = np.random.default_rng(8)
    layer = EdgeConv(3, 6, 3, rng)
    layer.eval()
    out = edge_conv(layer, np.tile([[0.3, -0.1, 0.7]], (8, 1)))
    assert np.all(out.data == out.data[0])


def test_edge_conv_permutation_equivariance():
    rng = np.random.default_rng(9)
    layer = EdgeConv(3, 8, 4, rng)
    x = rng.normal(size=(30, 3))
    perm = rng.permutation(30)
    a = layer(x)[0].data
    b = layer(x[perm])[0].data
    # normalisation sums run in a different order, so equality is to rounding
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)
    layer.eval()
    assert np.array_equal(layer(x[perm])[0].data, layer(x)[0].data[perm])


def test_edge_conv_errors():
    rng = np.random.default_rng(10)
    layer = EdgeConv(3, 4, 5, rng)
    with pytest.raises(ParameterError):
        layer(np.zeros((5, 3)))
    with pytest.raises(ShapeError):
        layer(np.zeros((9, 2)))
    with pytest.raises(ParameterError):
        edge_conv(layer, np.zeros((9, 3)), k=3)


def test_block_gradients_pass_grad_check():
    rng = np.random.default_rng(11)
    mlp = Mlp([3, 5, 2], rng)
    ec = EdgeConv(3, 4, 3, rng)
    x = rng.normal(size=(8, 3))
    nbrs = knn_graph(x, 3)
    w = rng.normal(size=(8, 2))
    w2 = rng.normal(size=(8, 4))
    for p in mlp.parameters():
        with KinkMonitor() as mon:
            mlp(x)
        assert mon.min_margin > 1e-4
        assert grad_check(lambda _p: ad.sum(ad.mul(mlp(x), Tensor(w))), p) < 1e-4
    for p in ec.parameters():
        assert grad_check(lambda _p: ad.sum(ad.mul(ec(x, nbrs)[0], Tensor(w2))), p) < 1e-4
    xt = Tensor(x)
    assert grad_check(lambda t: ad.sum(ad.mul(ec(t, nbrs)[0], Tensor(w2))), xt) < 1e-4


def test_adam_fixed_point_and_first_step():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(3):
        opt.step({"p": np.zeros(2)})
    assert np.array_equal(p.data, [1.5, -2.0]) and opt.t == 3
    q = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"q": q}, lr=0.1)
    opt.step({"q": np.array([1.0])})
    assert q.data[0] == pytest.approx(-0.1, abs=1e-8)


def textbook_adam(x0, grad, steps, lr, b1, b2, eps, wd):
    x, m, v = x0.copy(), np.zeros_like(x0), np.zeros_like(x0)
    trace = []
    for t in range(1, steps + 1):
        g = grad(x) + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * mh / (np.sqrt(vh) + eps)
        trace.append(x.copy())
    return trace


def test_adam_matches_reference_trace():
    A = np.diag([1.0, 3.0, 0.5])
    grad = lambda x: A @ x - 1.0
    x0 = np.array([1.0, -1.0, 2.0])
    ref = textbook_adam(x0, grad, 10, 0.05, 0.9, 0.999, 1e-8, 1e-3)
    p = Tensor(x0.copy(), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05, weight_decay=1e-3)
    for t in range(10):
        adam_step(opt, {"p": p}, {"p": grad(p.data)})
        np.testing.assert_allclose(p.data, ref[t], rtol=0, atol=1e-12)


def test_adam_rejects_nan():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(TrainingError):
        Adam({"p": p}).step({"p": np.array([np.nan, 0.0])})


def test_adam_state_round_trip():
    p = Tensor(np.ones(3), requires_grad=True)
    a = Adam({"p": p}, lr=0.01)
    a.step({"p": np.array([0.1, -0.2, 0.3])})
    b = Adam({"p": p}, lr=0.01)
    b.load_state_dict(a.state_dict())
    assert b.t == 1 and np.array_equal(b.m["p"], a.m["p"]) and np.array_equal(b.v["p"], a.v["p"])


def test_lr_schedule():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(39) == 1e-4
    assert lr_schedule(40) == pytest.approx(1e-5, rel=1e-15)
    assert lr_schedule(7, 1e-3, total_epochs=10) == pytest.approx(1e-3)
    assert lr_schedule(8, 1e-3, total_epochs=10) == pytest.approx(1e-4)
    with pytest.raises(ParameterError):
        lr_schedule(-1)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(12)
    tensors = {"a": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "c": np.zeros(0)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, tensors, {"epoch": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"epoch": 3}
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "y.ckpt", tensors, {"epoch": 3})
    assert path.read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.arange(10.0)})
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "trunc.ckpt").write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(path.read_bytes().replace(b"PCREG-CKPT 1", b"PCREG-CKPT 9", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_dense_layer_shapes():
    rng = np.random.default_rng(13)
    d = DenseLayer(3, 5, rng)
    assert d.weight.shape == (5, 3) and d.n_in == 3 and d.n_out == 5
    bound = np.sqrt(6 / 3)
    assert np.all(np.abs(d.weight.data) <= bound)
    with Tape() as tape:
        y = ad.sum(d(Tensor(np.ones((2, 3)))))
    tape.backward(y)
    np.testing.assert_allclose(d.bias.grad, np.full(5, 2.0))
