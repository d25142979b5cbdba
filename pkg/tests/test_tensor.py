import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab.tensor import (SGD, Graph, NonFiniteError, ShapeError, finite_diff_grad, grad, load_checkpoint,
                           save_checkpoint, sgd_step)

from graphs import kink_free, random_graph, rel_err


def test_relu_forward():
    g = Graph()
    x = g.input("x")
    r = g.relu(x)
    np.testing.assert_array_equal(g.forward({"x": [-1.0, 0.0, 2.0]}, r), [0.0, 0.0, 2.0])


def test_identity_matmul():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5))
    g = Graph()
    out = g.matmul(g.param("eye", np.eye(3)), g.input("a"))
    np.testing.assert_array_equal(g.forward({"a": a}, out), a)


def test_identity_kernel_conv():
    img = np.random.default_rng(1).random((2, 1, 5, 7))
    g = Graph()
    out = g.conv2d(g.input("x"), g.param("w", np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(g.forward({"x": img}, out), img)


def test_conv_stride_two_matches_direct_sum():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    g = Graph()
    out = g.forward({"x": x}, g.conv2d(g.input("x"), g.param("w", w), stride=2, padding=1))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expect = np.zeros((1, 3, 3, 3))
    for f in range(3):
        for i in range(3):
            for j in range(3):
                expect[0, f, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[f])
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_square_gradient():
    g = Graph()
    x = g.input("x")
    sq = g.matmul(x, x)
    g.forward({"x": [[3.0]]}, sq)
    assert grad(g, sq, [x])[x][0, 0] == 6.0


def test_uniform_softmax_gradient():
    g = Graph()
    z = g.input("z")
    loss = g.softmax_xent(z, g.input("y"))
    g.forward({"z": np.zeros((1, 3)), "y": [0]}, loss)
    np.testing.assert_allclose(grad(g, loss, [z])[z], [[-2 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_grad_requires_scalar():
    g = Graph()
    x = g.input("x")
    r = g.relu(x)
    g.forward({"x": np.ones((2, 2))}, r)
    with pytest.raises(ShapeError):
        grad(g, r, [x])


def test_shape_mismatch_names_node():
    g = Graph()
    a = g.input("a")
    b = g.param("b", np.ones((4, 2)))
    m = g.matmul(a, b)
    with pytest.raises(ShapeError) as exc:
        g.forward({"a": np.ones((2, 3))})
    assert exc.value.node_id == m


def test_declared_input_shape_enforced():
    g = Graph()
    g.input("x", (None, 3))
    with pytest.raises(ShapeError):
        g.forward({"x": np.ones((2, 4))})


def test_nonfinite_is_an_error():
    g = Graph()
    r = g.relu(g.input("x"))
    with pytest.raises(NonFiniteError):
        g.forward({"x": [np.inf]}, r)
    g.debug = True
    with pytest.raises(NonFiniteError):
        g.forward({"x": [np.nan]}, r)


def test_finite_diff_square():
    g = Graph()
    x = g.input("x")
    sq = g.matmul(x, x)
    est = finite_diff_grad(g, sq, [x], {"x": [[3.0]]}, h=1e-5)[x]
    assert abs(est[0, 0] - 6.0) < 1e-9


def test_finite_diff_linear_is_exact():
    w = np.array([[0.5], [-1.25], [2.0]])
    g = Graph()
    x = g.input("x")
    out = g.matmul(x, g.param("w", w))
    est = finite_diff_grad(g, out, [x], {"x": [[0.1, 0.2, 0.3]]}, h=1e-3)[x]
    np.testing.assert_allclose(est[0], w[:, 0], rtol=1e-9)


def test_finite_diff_rejects_bad_step():
    g = Graph()
    x = g.input("x")
    with pytest.raises(ValueError):
        finite_diff_grad(g, g.relu(x), [x], {"x": [1.0]}, h=0.0)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    g = Graph()
    x = g.input("x")
    h = g.relu(g.bias_add(g.matmul(x, g.param("w1", rng.normal(size=(4, 6)))), g.param("b1", rng.normal(size=6))))
    logits = g.bias_add(g.matmul(h, g.param("w2", rng.normal(size=(6, 3)))), g.param("b2", rng.normal(size=3)))
    loss = g.softmax_xent(logits, g.input("y"))
    feeds = {"x": rng.normal(size=(5, 4)), "y": [0, 1, 2, 1, 0]}
    leaves = [x] + [g.node_id(n) for n in ("w1", "b1", "w2", "b2")]
    g.forward(feeds)
    exact = grad(g, loss, leaves)
    approx = finite_diff_grad(g, loss, leaves, feeds)
    for nid in leaves:
        assert rel_err(exact[nid], approx[nid]) < 1e-6


@pytest.mark.parametrize("kind", ["dense", "conv"])
def test_random_graphs_match_finite_differences(kind):
    rng = np.random.default_rng(10 if kind == "dense" else 11)
    checked = 0
    while checked < 60:
        g, feeds, loss, leaves, relus = random_graph(rng, kind)
        g.forward(feeds)
        if not kink_free(g, relus):
            continue
        exact = grad(g, loss, leaves)
        approx = finite_diff_grad(g, loss, leaves, feeds)
        for nid in leaves:
            assert exact[nid].shape == g.values[nid].shape
            assert rel_err(exact[nid], approx[nid]) < 1e-6, (kind, checked, nid)
        checked += 1


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(4)
    g, feeds, loss, _, _ = random_graph(rng, "conv")
    first = g.forward(feeds).copy()
    assert np.array_equal(first, g.forward(feeds))


def test_gradient_of_sum_is_sum_of_gradients():
    # the batch "sum" loss is the sum of per-sample losses
    rng = np.random.default_rng(5)
    for _ in range(20):
        g, feeds, _, leaves, _ = random_graph(rng, "dense")
        logits = g.nodes[-1].inputs[0]
        total = g.softmax_xent(logits, g.node_id("y"), reduction="sum")
        g.forward(feeds, total)
        whole = grad(g, total, leaves)
        parts = {nid: 0.0 for nid in leaves if g.nodes[nid].op == "param"}
        for i in range(len(feeds["y"])):
            one = {"x": feeds["x"][i:i + 1], "y": feeds["y"][i:i + 1]}
            g.forward(one, total)
            for nid, gr in grad(g, total, list(parts)).items():
                parts[nid] = parts[nid] + gr
        for nid in parts:
            np.testing.assert_allclose(whole[nid], parts[nid], rtol=1e-10, atol=1e-12)


def test_sgd_zero_lr_is_noop():
    p = {"w": np.array([1.0, 2.0])}
    new, _, ok = sgd_step(p, {"w": np.array([5.0, -3.0])}, lr=0.0)
    assert ok
    np.testing.assert_array_equal(new["w"], p["w"])


def test_sgd_arithmetic():
    new, _, _ = sgd_step({"p": np.array([1.0])}, {"p": np.array([2.0])}, lr=0.1)
    assert new["p"][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_converges_on_quadratic():
    params = {"p": np.array([0.0])}
    opt = SGD(params, lr=0.1)
    for _ in range(200):
        opt.step({"p": 2 * (params["p"] - 3.0)})
    # contraction factor (1 - 2 lr) = 0.8 per step
    assert abs(params["p"][0] - 3.0) < 1e-6
    assert abs(params["p"][0] - 3.0) <= 3.0 * 0.8 ** 200 + 1e-15


def test_sgd_rejects_nonfinite_gradient():
    params = {"p": np.array([1.0])}
    opt = SGD(params, lr=0.1, momentum=0.5)
    assert not opt.step({"p": np.array([np.nan])})
    assert params["p"][0] == 1.0 and opt.rejected == 1
    _, _, ok = sgd_step({"p": np.array([1.0])}, {"p": np.array([np.inf])}, lr=0.1)
    assert not ok


def test_sgd_validates_momentum():
    with pytest.raises(ValueError):
        SGD({}, lr=0.1, momentum=1.0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    tensors = {"conv.weight": rng.normal(size=(2, 1, 3, 3)), "b": np.array([np.pi]), "w": rng.normal(size=(4, 5))}
    path = tmp_path / "m.advl"
    save_checkpoint(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"ADVL"
    back = load_checkpoint(path)
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "again.advl", back)
    assert (tmp_path / "again.advl").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.advl"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        load_checkpoint(p)
    save_checkpoint(p, {"w": np.ones(3)})
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(p)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_relu_gradient_is_indicator(values):
    g = Graph()
    x = g.input("x")
    out = g.softmax_xent(g.relu(x), g.input("y"), reduction="sum")
    v = np.array([values])
    g.forward({"x": v, "y": [0]})
    gx = grad(g, out, [x])[x]
    assert np.all(gx[v <= 0] == 0)
