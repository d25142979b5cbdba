"""Dense float64 compute graph with exact reverse-mode gradients.

Values are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Graph`
records nodes in construction order, which is also a valid topological order,
so the graph is acyclic by construction.

The op set is closed: matmul, bias_add, conv2d, relu, avgpool2, flatten and
softmax_xent. Nothing broadcasts implicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when a node receives inputs of incompatible shape."""

    def __init__(self, node_id, message):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id, message="non-finite value produced"):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


def as_tensor(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


# ---------------------------------------------------------------------------
# op kernels: forward(node_id, inputs, attrs) and backward(g, inputs, out, attrs, need).
# backward returns one gradient per input; None where not differentiable or not needed


_ROW_BLOCK = 64


def rowwise_matmul(a, b):
    """``a @ b`` whose rows do not depend on the other rows of ``a``.

    BLAS picks kernels by row position, so the same sample can round
    differently in different batches. Feeding it fixed 64-row blocks (zero
    padded) keeps every row on the same code path.
    """
    n, k = a.shape
    m = -(-max(n, 1) // _ROW_BLOCK) * _ROW_BLOCK
    if m != n:
        a = np.concatenate([a, np.zeros((m - n, k))])
    return np.matmul(a.reshape(-1, _ROW_BLOCK, k), b).reshape(m, b.shape[1])[:n]


def _matmul_fwd(nid, xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(nid, f"matmul of {a.shape} and {b.shape}")
    return rowwise_matmul(a, b)


def _matmul_bwd(g, xs, out, attrs, need):
    a, b = xs
    return [rowwise_matmul(g, b.T) if need[0] else None, a.T @ g if need[1] else None]


def _bias_add_fwd(nid, xs, attrs):
    x, b = xs
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(nid, f"bias {b.shape} does not match channel axis of {x.shape}")
    return x + b.reshape((1, -1) + (1,) * (x.ndim - 2))


def _bias_add_bwd(g, xs, out, attrs, need):
    axes = (0,) + tuple(range(2, g.ndim))
    return [g, g.sum(axis=axes) if need[1] else None]


def _im2col(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = view.shape[:4]
    # rows ordered (n, ho, wo); columns ordered (c, kh, kw) to match the kernel layout
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv2d_fwd(nid, xs, attrs):
    x, w = xs
    stride, pad = attrs["stride"], attrs["padding"]
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(nid, f"conv2d of input {x.shape} with kernel {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(nid, f"unsupported stride {stride}")
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(nid, f"kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = rowwise_matmul(cols, w.reshape(w.shape[0], -1).T)
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2))


def _conv2d_bwd(g, xs, out, attrs, need):
    x, w = xs
    stride, pad = attrs["stride"], attrs["padding"]
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
    gw = None
    if need[1]:  # attacks only want the input gradient; skip im2col then
        gw = (g2.T @ _im2col(x, kh, kw, stride, pad)[0]).reshape(w.shape)
    if not need[0]:
        return [None, gw]
    gcols = rowwise_matmul(g2, w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return [gx, gw]


def _relu_fwd(nid, xs, attrs):
    return np.maximum(xs[0], 0.0)


def _relu_bwd(g, xs, out, attrs, need):
    return [g * (xs[0] > 0)]


def _avgpool2_fwd(nid, xs, attrs):
    x = xs[0]
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(nid, f"avgpool2 needs even spatial dims, got {x.shape}")
    # four strided adds beat mean() over two small axes by a wide margin
    return ((x[:, :, 0::2, 0::2] + x[:, :, 0::2, 1::2]) + (x[:, :, 1::2, 0::2] + x[:, :, 1::2, 1::2])) * 0.25


def _avgpool2_bwd(g, xs, out, attrs, need):
    up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
    return [up * 0.25]


def _flatten_fwd(nid, xs, attrs):
    x = xs[0]
    if x.ndim < 2:
        raise ShapeError(nid, f"flatten needs a batch axis, got {x.shape}")
    return x.reshape(x.shape[0], -1)


def _flatten_bwd(g, xs, out, attrs, need):
    return [g.reshape(xs[0].shape)]


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax_xent_fwd(nid, xs, attrs):
    z, y = xs
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(nid, f"logits {z.shape} vs labels {y.shape}")
    labels = y.astype(np.intp)
    if np.any(labels != y) or np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ShapeError(nid, "labels must be integers in [0, num_classes)")
    nll = -_log_softmax(z)[np.arange(z.shape[0]), labels]
    total = nll.sum()
    if attrs["reduction"] == "mean":
        total = total / z.shape[0]
    return np.array([total])


def _softmax_xent_bwd(g, xs, out, attrs, need):
    z, y = xs
    p = np.exp(_log_softmax(z))
    p[np.arange(z.shape[0]), y.astype(np.intp)] -= 1.0
    if attrs["reduction"] == "mean":
        p /= z.shape[0]
    return [g[0] * p, None]


OPS = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "bias_add": (_bias_add_fwd, _bias_add_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "avgpool2": (_avgpool2_fwd, _avgpool2_bwd),
    "flatten": (_flatten_fwd, _flatten_bwd),
    "softmax_xent": (_softmax_xent_fwd, _softmax_xent_bwd),
}


@dataclass
class Node:
    op: str  # "input", "param" or a key of OPS
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    shape: tuple | None = None  # declared shape for inputs; None entries are free


class Graph:
    """A static computation graph.

    Build it once with the op helpers, then call :meth:`forward` with a feed
    dict as often as needed. Parameters live in ``graph.params`` and are
    read at each forward, so an optimizer can update them in place.
    """

    def __init__(self, debug=False):
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.values: list[np.ndarray | None] = []
        self.debug = debug

    def _add(self, node):
        self.nodes.append(node)
        self.values.append(None)
        return len(self.nodes) - 1

    def input(self, name, shape=None):
        return self._add(Node("input", name=name, shape=tuple(shape) if shape is not None else None))

    def param(self, name, value):
        self.params[name] = as_tensor(value)
        return self._add(Node("param", name=name))

    def op(self, kind, *inputs, **attrs):
        if kind not in OPS:
            raise ValueError(f"unknown op kind {kind!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} does not exist")
        return self._add(Node(kind, tuple(inputs), attrs))

    def matmul(self, a, b):
        return self.op("matmul", a, b)

    def bias_add(self, x, b):
        return self.op("bias_add", x, b)

    def conv2d(self, x, w, stride=1, padding=0):
        return self.op("conv2d", x, w, stride=stride, padding=padding)

    def relu(self, x):
        return self.op("relu", x)

    def avgpool2(self, x):
        return self.op("avgpool2", x)

    def flatten(self, x):
        return self.op("flatten", x)

    def softmax_xent(self, logits, labels, reduction="mean"):
        if reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
        return self.op("softmax_xent", logits, labels, reduction=reduction)

    def node_id(self, name):
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise KeyError(name)

    # -- evaluation ---------------------------------------------------------

    def forward(self, feeds, output=None):
        """Evaluate every node up to ``output`` (default: the last node)."""
        last = len(self.nodes) - 1 if output is None else output
        for i in range(last + 1):
            node = self.nodes[i]
            if node.op == "input":
                if node.name not in feeds:
                    raise KeyError(f"missing feed for input {node.name!r} (node {i})")
                val = np.asarray(feeds[node.name], dtype=np.float64)
                if node.shape is not None:
                    ok = len(node.shape) == val.ndim and all(
                        d is None or d == v for d, v in zip(node.shape, val.shape))
                    if not ok:
                        raise ShapeError(i, f"input {node.name!r} expects {node.shape}, got {val.shape}")
            elif node.op == "param":
                val = self.params[node.name]
            else:
                fwd = OPS[node.op][0]
                val = fwd(i, [self.values[j] for j in node.inputs], node.attrs)
                if self.debug and not np.all(np.isfinite(val)):
                    raise NonFiniteError(i)
            self.values[i] = val
        out = self.values[last]
        if not self.debug and not np.all(np.isfinite(out)):
            raise NonFiniteError(last)
        return out

    def backward(self, output, seed, wrt):
        """Vector-Jacobian product of ``output`` against cotangent ``seed``.

        Requires a preceding :meth:`forward` that reached ``output``.
        Returns ``{node_id: gradient}`` for every id in ``wrt``.
        """
        wrt = list(wrt)
        if self.values[output] is None:
            raise RuntimeError("forward has not been run")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.values[output].shape:
            raise ShapeError(output, f"seed shape {seed.shape} != output shape {self.values[output].shape}")

        # only propagate along nodes that depend on something in wrt
        live = [False] * (output + 1)
        targets = set(wrt)
        for i in range(output + 1):
            live[i] = i in targets or any(live[j] for j in self.nodes[i].inputs)

        grads = {output: seed}
        for i in range(output, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.op in ("input", "param"):
                continue
            xs = [self.values[j] for j in node.inputs]
            need = tuple(live[j] for j in node.inputs)
            for j, gj in zip(node.inputs, OPS[node.op][1](g, xs, self.values[i], node.attrs, need)):
                if gj is None or not live[j]:
                    continue
                grads[j] = grads[j] + gj if j in grads else gj
        return {i: grads[i] if i in grads else np.zeros_like(self.values[i]) for i in wrt}


def forward(graph, feeds, output=None):
    return graph.forward(feeds, output)


def grad(graph, loss_output, wrt):
    """Exact gradients of a scalar node with respect to the nodes in ``wrt``."""
    val = graph.values[loss_output]
    if val is None:
        raise RuntimeError("forward has not been run")
    if val.size != 1:
        raise ShapeError(loss_output, f"loss must be scalar, got shape {val.shape}")
    return graph.backward(loss_output, np.ones_like(val), wrt)


def finite_diff_grad(graph, loss_output, wrt, feeds, h=1e-5):
    """Central-difference estimate of ``grad``; ``wrt`` must be input or param nodes.

    Feeds and parameters are restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    feeds = dict(feeds)
    out = {}
    for nid in wrt:
        node = graph.nodes[nid]
        if node.op == "param":
            base = graph.params[node.name]

            def put(v, node=node):
                graph.params[node.name] = v
        elif node.op == "input":
            base = np.asarray(feeds[node.name], dtype=np.float64)

            def put(v, node=node):
                feeds[node.name] = v
        else:
            raise ValueError(f"node {nid} is not a leaf; finite differences need an input or param")
        est = np.zeros_like(base)
        flat = est.reshape(-1)
        for k in range(base.size):
            plus = base.copy()
            plus.reshape(-1)[k] += h
            put(plus)
            fp = graph.forward(feeds, loss_output).reshape(-1)[0]
            minus = base.copy()
            minus.reshape(-1)[k] -= h
            put(minus)
            fm = graph.forward(feeds, loss_output).reshape(-1)[0]
            flat[k] = (fp - fm) / (2 * h)
        put(base)
        out[nid] = est
    graph.forward(feeds, loss_output)
    return out


class SGD:
    """SGD with heavy-ball momentum over a dict of named arrays, updated in place."""

    def __init__(self, params, lr, momentum=0.0):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.rejected = 0

    def step(self, grads):
        """Apply one update. Returns False (and leaves params untouched) on non-finite grads."""
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise ShapeError(k, f"gradient shape {g.shape} != param shape {self.params[k].shape}")
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.rejected += 1
            return False
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g
            self.params[k] -= self.lr * v
        return True


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """Functional single step. Returns ``(new_params, new_velocity, accepted)``."""
    velocity = velocity or {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    new_p = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    new_v = {k: np.array(v, dtype=np.float64) for k, v in velocity.items()}
    opt = SGD(new_p, lr, momentum)
    opt.velocity = new_v
    accepted = opt.step({k: np.asarray(g, dtype=np.float64) for k, g in grads.items()})
    if not accepted:
        return dict(params), dict(velocity), False
    return new_p, new_v, True


# ---------------------------------------------------------------------------
# checkpoint format: "ADVL", u32 version, u32 count, then per tensor
# u16 name length, name, u8 rank, u32 dims, little-endian float64 payload

MAGIC = b"ADVL"
VERSION = 1


def save_checkpoint(path, tensors):
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(data):
                raise ValueError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out
