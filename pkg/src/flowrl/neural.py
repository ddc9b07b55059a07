"""Minimal dense/graph-convolutional network core with exact gradients.

No autodiff framework: each layer caches its forward pass and implements
the reverse-mode rule by hand. All arithmetic is float64. Layers accept
arbitrary leading batch dimensions; parameter gradients are summed over
them, so the contribution of a duplicated sample doubles exactly.
"""

from __future__ import annotations

import numpy as np

from .config import ConfigError

ACTIVATIONS = ("tanh", "sigmoid", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _act_grad_from_output(name: str, y: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(y)


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    """backward called without a cached forward pass."""


def adjacency_normalize(edges, n_nodes: int, normalize: bool = True) -> np.ndarray:
    """Neighbor coefficients c_ij from an undirected edge list.

    With normalize=True, c_ij = 1 / sqrt(deg_i * deg_j), degrees counted
    with the implicit self-connection (the node's own state enters the
    update unscaled, outside these coefficients). The diagonal stays zero.
    """
    adj = np.zeros((n_nodes, n_nodes))
    seen = set()
    for a, b in edges:
        if not (0 <= a < n_nodes and 0 <= b < n_nodes):
            raise ConfigError(f"edge ({a}, {b}) out of range for {n_nodes} nodes")
        if a == b:
            raise ConfigError(f"self-loop at node {a} not allowed")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise ConfigError(f"duplicate edge {key}")
        seen.add(key)
        adj[a, b] = 1.0
        adj[b, a] = 1.0
    if not normalize:
        return adj
    deg = adj.sum(axis=1) + 1.0
    return adj / np.sqrt(np.outer(deg, deg))


class DenseLayer:
    """y = act(x @ W.T + b), applied node-locally for per-node inputs."""

    def __init__(self, w: np.ndarray, b: np.ndarray, activation: str = "tanh"):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.w = np.asarray(w, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ShapeError("dense layer: W must be (out, in), b (out,)")
        self.activation = activation
        self._x = None
        self._y = None

    @property
    def n_params(self) -> int:
        return self.w.size + self.b.size

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.w.shape[1]:
            raise ShapeError(
                f"dense layer expects input dim {self.w.shape[1]}, "
                f"got {x.shape[-1]}")
        y = _act(self.activation, x @ self.w.T + self.b)
        self._x, self._y = x, y
        return y

    def backward(self, g: np.ndarray):
        if self._y is None:
            raise StateError("backward before forward")
        gz = g * _act_grad_from_output(self.activation, self._y)
        flat_gz = gz.reshape(-1, gz.shape[-1])
        flat_x = self._x.reshape(-1, self._x.shape[-1])
        gw = flat_gz.T @ flat_x
        gb = flat_gz.sum(axis=0)
        gx = gz @ self.w
        return [gw, gb], gx


class GraphConvLayer:
    """Message passing: y_i = act((h_i + sum_j c_ij h_j) @ W.T + b)."""

    def __init__(self, w: np.ndarray, b: np.ndarray, coeffs: np.ndarray,
                 activation: str = "tanh"):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.w = np.asarray(w, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.coeffs.shape[1]:
            raise ShapeError("adjacency coefficients must be square")
        self.activation = activation
        self._h = None
        self._agg = None
        self._y = None

    @property
    def n_params(self) -> int:
        return self.w.size + self.b.size

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        n = self.coeffs.shape[0]
        if h.ndim < 2 or h.shape[-2] != n:
            raise ShapeError(f"graph conv expects {n} nodes, got shape {h.shape}")
        if h.shape[-1] != self.w.shape[1]:
            raise ShapeError(
                f"graph conv expects feature dim {self.w.shape[1]}, "
                f"got {h.shape[-1]}")
        agg = h + np.einsum("ij,...jf->...if", self.coeffs, h)
        y = _act(self.activation, agg @ self.w.T + self.b)
        self._h, self._agg, self._y = h, agg, y
        return y

    def backward(self, g: np.ndarray):
        if self._y is None:
            raise StateError("backward before forward")
        gz = g * _act_grad_from_output(self.activation, self._y)
        flat_gz = gz.reshape(-1, gz.shape[-1])
        flat_agg = self._agg.reshape(-1, self._agg.shape[-1])
        gw = flat_gz.T @ flat_agg
        gb = flat_gz.sum(axis=0)
        gagg = gz @ self.w
        gh = gagg + np.einsum("ji,...jf->...if", self.coeffs, gagg)
        return [gw, gb], gh


class GraphAverage:
    """Arithmetic mean over the node axis."""

    def __init__(self):
        self._n = None

    n_params = 0

    def params(self):
        return []

    def forward(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if h.ndim < 2 or h.shape[-2] < 1:
            raise ValueError("graph average requires at least one node")
        self._n = h.shape[-2]
        return h.mean(axis=-2)

    def backward(self, g: np.ndarray):
        if self._n is None:
            raise StateError("backward before forward")
        gh = np.repeat(np.expand_dims(g, -2), self._n, axis=-2) / self._n
        return [], gh


class ScaleLayer:
    """y = s * x with a single learnable scale."""

    def __init__(self, s: float):
        self.s = np.array([float(s)])
        self._x = None

    @property
    def n_params(self) -> int:
        return 1

    def params(self):
        return [("s", self.s)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._x = x
        return self.s[0] * x

    def backward(self, g: np.ndarray):
        if self._x is None:
            raise StateError("backward before forward")
        gs = np.array([float(np.sum(g * self._x))])
        gx = g * self.s[0]
        return [gs], gx


class Network:
    """A plain sequence of layers with flat-parameter plumbing.

    The flat layout maps every parameter array to a contiguous slice; the
    round trip layers <-> flat vector is lossless and bit-identical.
    """

    def __init__(self, layers: list):
        self.layers = layers
        self._slices: dict[tuple[int, str], slice] = {}
        offset = 0
        for li, layer in enumerate(self.layers):
            for name, arr in layer.params():
                self._slices[(li, name)] = slice(offset, offset + arr.size)
                offset += arr.size
        self.n_params = offset

    def layer_param_counts(self) -> list[int]:
        return [layer.n_params for layer in self.layers if layer.n_params]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g: np.ndarray):
        """Reverse pass; returns (flat parameter gradient, input gradient)."""
        flat = np.zeros(self.n_params)
        for li in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[li]
            grads, g = layer.backward(g)
            for (name, _), garr in zip(layer.params(), grads):
                flat[self._slices[(li, name)]] += garr.ravel()
        return flat, g

    def get_flat(self) -> np.ndarray:
        flat = np.empty(self.n_params)
        for li, layer in enumerate(self.layers):
            for name, arr in layer.params():
                flat[self._slices[(li, name)]] = arr.ravel()
        return flat

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ShapeError(
                f"expected flat vector of length {self.n_params}, "
                f"got {flat.shape}")
        for li, layer in enumerate(self.layers):
            for name, arr in layer.params():
                arr[...] = flat[self._slices[(li, name)]].reshape(arr.shape)


def flat_to_bytes(flat: np.ndarray) -> bytes:
    return np.ascontiguousarray(flat, dtype="<f8").tobytes()


def bytes_to_flat(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype="<f8").copy()


def orthogonal_init(rng: np.random.Generator, n_out: int, n_in: int,
                    gain: float = 1.0) -> np.ndarray:
    """Orthogonal-style initialization (QR of a Gaussian), sign-fixed."""
    a = rng.standard_normal((max(n_out, n_in), min(n_out, n_in)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_out < n_in:
        q = q.T
    return gain * q[:n_out, :n_in]
