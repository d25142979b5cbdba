"""Random small graphs for gradient checking."""

import numpy as np

from advlab.tensor import Graph


def random_graph(rng, kind):
    """Return ``(graph, feeds, loss_node, leaf_nodes, relu_nodes)``.

    ``kind`` is "dense" or "conv"; together the two cover every op.
    """
    g = Graph()
    n = int(rng.integers(1, 4))
    classes = int(rng.integers(2, 5))
    relus = []
    if kind == "dense":
        m = int(rng.integers(2, 7))
        hidden = int(rng.integers(2, 7))
        x = g.input("x", (None, m))
        feeds = {"x": rng.normal(size=(n, m))}
        w1 = g.param("w1", rng.normal(size=(m, hidden)))
        b1 = g.param("b1", rng.normal(size=hidden))
        h = g.relu(g.bias_add(g.matmul(x, w1), b1))
        relus.append(h - 1)
        w2 = g.param("w2", rng.normal(size=(hidden, classes)))
        logits = g.matmul(h, w2)
    else:
        c = int(rng.integers(1, 3))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        k = int(rng.choice([1, 2, 3]))
        # pick a spatial size that leaves an even conv output for the pool
        for size in range(3, 12):
            out = (size + 2 * pad - k) // stride + 1
            if out >= 2 and out % 2 == 0 and size >= 3:
                break
        f = int(rng.integers(1, 3))
        x = g.input("x", (None, c, size, size))
        feeds = {"x": rng.normal(size=(n, c, size, size))}
        w = g.param("w", rng.normal(size=(f, c, k, k)))
        b = g.param("b", rng.normal(size=f))
        h = g.relu(g.bias_add(g.conv2d(x, w, stride=stride, padding=pad), b))
        relus.append(h - 1)
        h = g.flatten(g.avgpool2(h))
        flat = f * (out // 2) ** 2
        w2 = g.param("w2", rng.normal(size=(flat, classes)))
        b2 = g.param("b2", rng.normal(size=classes))
        logits = g.bias_add(g.matmul(h, w2), b2)
    y = g.input("y", (None,))
    feeds["y"] = rng.integers(0, classes, size=n).astype(float)
    loss = g.softmax_xent(logits, y, reduction=str(rng.choice(["mean", "sum"])))
    leaves = [i for i, node in enumerate(g.nodes) if node.op == "param" or node.name == "x"]
    return g, feeds, loss, leaves, relus


def kink_free(g, relus, margin=1e-3):
    """True when no ReLU pre-activation sits within ``margin`` of zero."""
    return all(np.min(np.abs(g.values[i])) > margin for i in relus)


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom
