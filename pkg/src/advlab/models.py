"""Small classifiers built on the compute graph, with a representation tap."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, ShapeError, load_checkpoint, save_checkpoint

LAYER_KINDS = ("dense", "conv", "relu", "pool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0  # dense
    filters: int = 0  # conv
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def dense(units):
    return LayerSpec("dense", units=units)


def conv(filters, kernel=3, stride=1, padding=1):
    return LayerSpec("conv", filters=filters, kernel=kernel, stride=stride, padding=padding)


RELU, POOL, FLATTEN = LayerSpec("relu"), LayerSpec("pool"), LayerSpec("flatten")


@dataclass
class Model:
    """Layer stack compiled to a :class:`~advlab.tensor.Graph`.

    ``tap`` is a layer index whose output is the representation; by default
    the layer right before the final dense layer.
    """

    input_shape: tuple
    layers: list
    num_classes: int
    tap: int | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)
    chunk_size: int = 500

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layers = list(self.layers)
        dense_idx = [i for i, l in enumerate(self.layers) if l.kind == "dense"]
        if not dense_idx or dense_idx[-1] != len(self.layers) - 1:
            raise ValueError("the last layer must be dense")
        if self.tap is None:
            self.tap = len(self.layers) - 2
        if not 0 <= self.tap < len(self.layers) - 1:
            raise ValueError(f"representation tap {self.tap} must precede the final dense layer")
        if not self.params:
            self.params = self._init_params(np.random.default_rng(self.seed))
        self._build()

    # -- construction ---------------------------------------------------------

    def _init_params(self, rng):
        params = {}
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(i, f"dense layer needs flat input, got {shape}")
                fan_in = shape[0]
                params[f"l{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, layer.units))
                params[f"l{i}.bias"] = np.zeros(layer.units)
                shape = (layer.units,)
            elif layer.kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(i, f"conv layer needs C x H x W input, got {shape}")
                c, h, w = shape
                fan_in = c * layer.kernel ** 2
                params[f"l{i}.weight"] = rng.normal(
                    0.0, np.sqrt(2.0 / fan_in), (layer.filters, c, layer.kernel, layer.kernel))
                params[f"l{i}.bias"] = np.zeros(layer.filters)
                k, s, p = layer.kernel, layer.stride, layer.padding
                shape = (layer.filters, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
            elif layer.kind == "pool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeError(i, f"pool needs even spatial dims, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
        if shape != (self.num_classes,):
            raise ShapeError(len(self.layers) - 1, f"output shape {shape} != ({self.num_classes},)")
        return params

    def _build(self):
        g = Graph()
        h = self.x_node = g.input("x", (None,) + self.input_shape)
        self.layer_nodes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                h = g.bias_add(g.matmul(h, g.param(f"l{i}.weight", self.params[f"l{i}.weight"])),
                               g.param(f"l{i}.bias", self.params[f"l{i}.bias"]))
            elif layer.kind == "conv":
                h = g.bias_add(g.conv2d(h, g.param(f"l{i}.weight", self.params[f"l{i}.weight"]),
                                        stride=layer.stride, padding=layer.padding),
                               g.param(f"l{i}.bias", self.params[f"l{i}.bias"]))
            elif layer.kind == "relu":
                h = g.relu(h)
            elif layer.kind == "pool":
                h = g.avgpool2(h)
            else:
                h = g.flatten(h)
            self.layer_nodes.append(h)
        self.logits_node = h
        self.y_node = g.input("y", (None,))
        self.loss_mean_node = g.softmax_xent(h, self.y_node, reduction="mean")
        self.loss_sum_node = g.softmax_xent(h, self.y_node, reduction="sum")
        # the graph reads from the same dict the optimizer updates
        g.params = self.params
        self.graph = g
        self.param_nodes = {name: g.node_id(name) for name in self.params}

    # -- helpers ----------------------------------------------------------------

    @property
    def representation_dim(self):
        return self.representation(np.zeros((1,) + self.input_shape)).shape[1]

    def prepare(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1:] == self.input_shape:
            return X
        if X.ndim >= 1 and X.size and X[0].size == int(np.prod(self.input_shape)):
            return X.reshape((X.shape[0],) + self.input_shape)
        raise ShapeError(self.x_node, f"batch shape {X.shape} does not match model input {self.input_shape}")

    def _chunks(self, n):
        for start in range(0, n, self.chunk_size):
            yield slice(start, min(start + self.chunk_size, n))

    def _eval(self, X, node):
        X = self.prepare(X)
        outs = [self.graph.forward({"x": X[s]}, node).copy() for s in self._chunks(len(X))]
        return np.concatenate(outs) if outs else np.zeros((0,))

    # -- inference ----------------------------------------------------------------

    def forward_logits(self, X):
        return self._eval(X, self.logits_node)

    def representation(self, X):
        rep = self._eval(X, self.layer_nodes[self.tap])
        return rep.reshape(len(rep), -1)

    def logits_from_representation(self, R):
        """Apply the layers after the tap (used to check the prefix property)."""
        h = np.asarray(R, dtype=np.float64)
        for i in range(self.tap + 1, len(self.layers)):
            layer = self.layers[i]
            if layer.kind == "dense":
                h = h.reshape(len(h), -1) @ self.params[f"l{i}.weight"] + self.params[f"l{i}.bias"]
            elif layer.kind == "relu":
                h = np.maximum(h, 0.0)
            elif layer.kind == "flatten":
                h = h.reshape(len(h), -1)
            else:
                raise NotImplementedError(f"{layer.kind} after the tap")
        return h

    def predict(self, X):
        return predict_from_logits(self.forward_logits(X))

    def accuracy(self, X, y):
        y = np.asarray(y)
        if len(y) == 0:
            raise ValueError("accuracy of an empty dataset is undefined")
        return float(np.mean(self.predict(X) == y))

    # -- gradients ------------------------------------------------------------------

    def input_gradient(self, X, y):
        """Per-sample gradient of the cross-entropy loss with respect to the input.

        Uses the summed loss so each row is the gradient of that sample's own loss.
        Returns ``(per_sample_loss_sum, grad)`` with grad shaped like ``X``.
        """
        X0 = np.asarray(X, dtype=np.float64)
        X = self.prepare(X0)
        g = self.graph
        grads, total = [], 0.0
        for s in self._chunks(len(X)):
            total += g.forward({"x": X[s], "y": y[s]}, self.loss_sum_node)[0]
            grads.append(g.backward(self.loss_sum_node, np.ones(1), [self.x_node])[self.x_node])
        return total, np.concatenate(grads).reshape(X0.shape)

    def logits_vjp(self, X, cotangent):
        """Gradient of ``sum(cotangent * logits(X))`` with respect to ``X``."""
        X0 = np.asarray(X, dtype=np.float64)
        X = self.prepare(X0)
        g = self.graph
        out = []
        for s in self._chunks(len(X)):
            g.forward({"x": X[s]}, self.logits_node)
            out.append(g.backward(self.logits_node, cotangent[s], [self.x_node])[self.x_node])
        return np.concatenate(out).reshape(X0.shape)

    def logits_and_jacobian(self, X):
        """Logits (N, c) and input Jacobian (N, c, *X.shape[1:]) by c backward passes."""
        X0 = np.asarray(X, dtype=np.float64)
        X = self.prepare(X0)
        g = self.graph
        logits = g.forward({"x": X}, self.logits_node).copy()
        jac = np.empty((len(X), self.num_classes) + X0.shape[1:])
        for k in range(self.num_classes):
            seed = np.zeros_like(logits)
            seed[:, k] = 1.0
            jac[:, k] = g.backward(self.logits_node, seed, [self.x_node])[self.x_node].reshape(
                (len(X),) + X0.shape[1:])
        return logits, jac

    def representation_vjp(self, X, cotangent):
        """Representation of ``X`` and the gradient of ``sum(cotangent * representation)``.

        ``cotangent`` may be an array of shape (N, d) or a callable mapping the
        (N, d) representation to one, which saves a second forward pass.
        """
        X0 = np.asarray(X, dtype=np.float64)
        X = self.prepare(X0)
        g = self.graph
        node = self.layer_nodes[self.tap]
        rep = g.forward({"x": X}, node)
        flat = rep.reshape(len(X), -1).copy()
        cot = cotangent(flat) if callable(cotangent) else cotangent
        grad = g.backward(node, np.asarray(cot, dtype=np.float64).reshape(rep.shape), [self.x_node])[self.x_node]
        return flat, grad.reshape(X0.shape)

    def loss_and_param_grads(self, X, y):
        X = self.prepare(X)
        g = self.graph
        loss = g.forward({"x": X, "y": y}, self.loss_mean_node)[0]
        grads = g.backward(self.loss_mean_node, np.ones(1), list(self.param_nodes.values()))
        return loss, {name: grads[nid] for name, nid in self.param_nodes.items()}

    # -- persistence ------------------------------------------------------------------

    def copy(self):
        return Model(self.input_shape, self.layers, self.num_classes, self.tap, self.seed,
                     params={k: v.copy() for k, v in self.params.items()}, chunk_size=self.chunk_size)

    def save(self, path):
        save_checkpoint(path, self.params)

    def load_params(self, path):
        loaded = load_checkpoint(path)
        if set(loaded) != set(self.params):
            raise ValueError(f"{path}: parameter names do not match the architecture")
        for k, v in loaded.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(k, f"checkpoint shape {v.shape} != {self.params[k].shape}")
            self.params[k][...] = v
        return self


def predict_from_logits(logits):
    # np.argmax already returns the first (lowest) index on ties
    return np.argmax(np.asarray(logits), axis=1)


def mlp_small(seed=0, num_classes=10):
    return Model((784,), [dense(256), RELU, dense(128), RELU, dense(num_classes)], num_classes, seed=seed)


def conv_small(seed=0, num_classes=10):
    layers = [conv(8), RELU, POOL, conv(16), RELU, POOL, FLATTEN, dense(128), RELU, dense(num_classes)]
    return Model((1, 28, 28), layers, num_classes, seed=seed)


def mlp(input_dim, hidden=(32,), num_classes=2, seed=0):
    layers = []
    for units in hidden:
        layers += [dense(units), RELU]
    layers.append(dense(num_classes))
    if not hidden:
        raise ValueError("an MLP needs at least one hidden layer for its representation tap")
    return Model((input_dim,), layers, num_classes, seed=seed)


ARCHITECTURES = {"mlp-small": mlp_small, "conv-small": conv_small}


def build_model(arch, seed=0, num_classes=10):
    try:
        return ARCHITECTURES[arch](seed=seed, num_classes=num_classes)
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None


