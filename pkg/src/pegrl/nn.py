"""Minimal neural-network substrate: layers with explicit backward passes,
Adam/SGD, and a versioned binary checkpoint format.

Parameters are float32; numerically delicate accumulations (optimizer
moments, loss sums) run in float64.  Layers are functional --
``forward(x) -> (y, cache)`` and ``backward(cache, dy) -> (dx, grads)`` -- so
composite nets (the two-view encoder, policies) can share weights across
multiple forward passes and sum the gradients.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ConfigError, CorruptCheckpointError, TopologyMismatchError

F32 = np.float32


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    """Stateless-apart-from-parameters building block."""

    params: dict

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


class Dense(Layer):
    """Affine layer; the matmul accumulates in float64 so that zero-padded
    inputs (stage-2 surgery) reproduce the narrower layer's float32 outputs
    bit-identically."""

    def __init__(self, n_in: int, n_out: int, rng=None):
        self.n_in, self.n_out = n_in, n_out
        if rng is None:
            W = np.zeros((n_out, n_in), dtype=F32)
        else:
            W = (rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)).astype(F32)
        self.params = {"W": W, "b": np.zeros(n_out, dtype=F32)}

    def forward(self, x):
        y = x.astype(np.float64) @ self.params["W"].T.astype(np.float64)
        y = (y + self.params["b"]).astype(F32)
        return y, x

    def backward(self, cache, dy):
        x = cache
        grads = {"W": (dy.T @ x).astype(F32), "b": dy.sum(axis=0).astype(F32)}
        return dy @ self.params["W"], grads

    def spec(self):
        return {"type": "dense", "n_in": self.n_in, "n_out": self.n_out}


class Conv2d(Layer):
    """k x k convolution via im2col; input (B, C, H, W)."""

    def __init__(self, c_in, c_out, k=3, stride=1, pad=1, rng=None):
        self.c_in, self.c_out, self.k, self.stride, self.pad = (
            c_in, c_out, k, stride, pad,
        )
        fan_in = c_in * k * k
        if rng is None:
            W = np.zeros((c_out, fan_in), dtype=F32)
        else:
            W = (rng.standard_normal((c_out, fan_in)) * np.sqrt(2.0 / fan_in)).astype(
                F32
            )
        self.params = {"W": W, "b": np.zeros(c_out, dtype=F32)}

    def _cols(self, x):
        B, C, H, W = x.shape
        p, k, s = self.pad, self.k, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        Ho = (H + 2 * p - k) // s + 1
        Wo = (W + 2 * p - k) // s + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]  # (B, C, Ho, Wo, k, k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        return np.ascontiguousarray(cols), (B, C, H, W, Ho, Wo)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ConfigError(
                f"conv expects {self.c_in} input channels, got {x.shape[1]}"
            )
        cols, dims = self._cols(x)
        B, C, H, W, Ho, Wo = dims
        y = cols @ self.params["W"].T + self.params["b"]
        y = y.reshape(B, Ho, Wo, self.c_out).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, dims)

    def backward(self, cache, dy):
        cols, (B, C, H, W, Ho, Wo) = cache
        p, k, s = self.pad, self.k, self.stride
        dyf = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, self.c_out)
        grads = {
            "W": (dyf.T @ cols).astype(F32),
            "b": dyf.sum(axis=0).astype(F32),
        }
        dcols = (dyf @ self.params["W"]).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + s * Ho : s, kj : kj + s * Wo : s] += (
                    dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
        return dx, grads

    def spec(self):
        return {
            "type": "conv2d", "c_in": self.c_in, "c_out": self.c_out,
            "k": self.k, "stride": self.stride, "pad": self.pad,
        }


class ReLU(Layer):
    params: dict = {}

    def __init__(self):
        self.params = {}

    def forward(self, x):
        y = np.maximum(x, 0)
        return y, x

    def backward(self, cache, dy):
        return dy * (cache > 0), {}

    def spec(self):
        return {"type": "relu"}


class Tanh(Layer):
    def __init__(self):
        self.params = {}

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, dy):
        return dy * (1.0 - cache * cache), {}

    def spec(self):
        return {"type": "tanh"}


class GlobalAvgPool(Layer):
    """(B, C, H, W) -> (B, C)."""

    def __init__(self):
        self.params = {}

    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, cache, dy):
        B, C, H, W = cache
        return np.broadcast_to(
            dy[:, :, None, None] / (H * W), (B, C, H, W)
        ).astype(dy.dtype), {}

    def spec(self):
        return {"type": "gap"}


def concat_forward(parts):
    """Concatenate along the feature axis; returns (y, split sizes)."""
    return np.concatenate(parts, axis=1), [p.shape[1] for p in parts]


def concat_backward(sizes, dy):
    out = []
    k = 0
    for n in sizes:
        out.append(dy[:, k : k + n])
        k += n
    return out


_LAYER_TYPES = {
    "dense": lambda s: Dense(s["n_in"], s["n_out"]),
    "conv2d": lambda s: Conv2d(s["c_in"], s["c_out"], s["k"], s["stride"], s["pad"]),
    "relu": lambda s: ReLU(),
    "tanh": lambda s: Tanh(),
    "gap": lambda s: GlobalAvgPool(),
}


def layer_from_spec(spec: dict) -> Layer:
    try:
        return _LAYER_TYPES[spec["type"]](spec)
    except KeyError as e:
        raise ConfigError(f"unknown layer spec {spec!r}") from e


# ---------------------------------------------------------------------------
# network container
# ---------------------------------------------------------------------------

class Network:
    """Ordered layer chain with named parameters and a topology fingerprint."""

    kind = "sequential"

    def __init__(self, layers: list[Layer]):
        self.layers = layers
        self._cache = None

    @classmethod
    def mlp(cls, sizes, hidden=Tanh, rng=None) -> "Network":
        layers: list[Layer] = []
        for i in range(len(sizes) - 1):
            layers.append(Dense(sizes[i], sizes[i + 1], rng=rng))
            if i < len(sizes) - 2:
                layers.append(hidden())
        return cls(layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        self._cache = caches
        return x

    def backward(self, dy):
        if self._cache is None:
            raise ConfigError("backward called before forward")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(self._cache[i], dy)
            for name, val in g.items():
                grads[f"{i}.{name}"] = val
        return grads, dy

    def params(self) -> dict:
        return {
            f"{i}.{name}": p
            for i, layer in enumerate(self.layers)
            for name, p in layer.params.items()
        }

    def spec(self) -> dict:
        return {"kind": self.kind, "layers": [l.spec() for l in self.layers]}

    def fingerprint(self) -> str:
        return topology_fingerprint(self.spec())

    def copy(self) -> "Network":
        net = network_from_spec(self.spec())
        load_params(net, {k: v.copy() for k, v in self.params().items()})
        return net


def topology_fingerprint(spec: dict) -> str:
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


_NETWORK_KINDS = {}


def register_network_kind(kind: str, builder):
    _NETWORK_KINDS[kind] = builder


def network_from_spec(spec: dict):
    kind = spec.get("kind")
    if kind == "sequential":
        return Network([layer_from_spec(s) for s in spec["layers"]])
    if kind in _NETWORK_KINDS:
        return _NETWORK_KINDS[kind](spec)
    raise ConfigError(f"unknown network kind {kind!r}")


def load_params(net, values: dict) -> None:
    params = net.params()
    if set(params) != set(values):
        raise TopologyMismatchError("parameter names do not match topology")
    for name, p in params.items():
        v = values[name]
        if p.shape != v.shape:
            raise TopologyMismatchError(f"shape mismatch for {name}")
        p[...] = v


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, lr=0.01):
        self.lr = lr
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for name, p in params.items():
            if name in grads:
                p -= (self.lr * grads[name].astype(np.float64)).astype(F32)

    def state_blocks(self):
        return {"t": np.array([self.t], dtype=np.float64)}

    def load_state_blocks(self, blocks):
        self.t = int(blocks["t"][0])


class Adam:
    """Adaptive-moment optimizer with bias correction (moments in float64)."""

    kind = "adam"

    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            if name not in grads:
                continue
            g = grads[name].astype(np.float64)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(F32)

    def state_blocks(self):
        blocks = {"t": np.array([self.t], dtype=np.float64)}
        for name, m in self.m.items():
            blocks[f"m/{name}"] = m
            blocks[f"v/{name}"] = self.v[name]
        return blocks

    def load_state_blocks(self, blocks):
        self.t = int(blocks["t"][0])
        self.m = {}
        self.v = {}
        for name, arr in blocks.items():
            if name.startswith("m/"):
                self.m[name[2:]] = arr.astype(np.float64)
            elif name.startswith("v/"):
                self.v[name[2:]] = arr.astype(np.float64)


def optimizer_step(opt, params: dict, grads: dict) -> None:
    opt.step(params, grads)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"PEGN"
_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _write_block(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype, copy=False).tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CorruptCheckpointError("truncated checkpoint")
    return b


def _read_block(f):
    (nlen,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, nlen).decode()
    (tag,) = struct.unpack("<B", _read_exact(f, 1))
    if tag not in _DTYPES:
        raise CorruptCheckpointError("bad dtype tag")
    dtype = np.dtype(_DTYPES[tag]).newbyteorder("<")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(
        struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim)
    )
    count = int(np.prod(shape)) if shape else 1
    data = _read_exact(f, count * dtype.itemsize)
    arr = np.frombuffer(data, dtype=dtype).reshape(shape)
    return name, arr.astype(_DTYPES[tag])


def save_checkpoint(net, path, opt=None) -> None:
    spec = net.spec()
    topo = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    fp = topology_fingerprint(spec).encode()
    params = net.params()
    opt_blocks = (
        {} if opt is None else {f"opt/{k}": v for k, v in opt.state_blocks().items()}
    )
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(fp)
        f.write(struct.pack("<I", len(topo)))
        f.write(topo)
        meta = b"" if opt is None else opt.kind.encode()
        f.write(struct.pack("<H", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(params) + len(opt_blocks)))
        for name, p in params.items():
            _write_block(f, name, p)
        for name, p in opt_blocks.items():
            _write_block(f, name, p)


def load_checkpoint(path, expect_fingerprint: str | None = None):
    """Returns (net, opt or None); raises on corruption or topology mismatch."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise CorruptCheckpointError("bad magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != _VERSION:
            raise CorruptCheckpointError(f"unsupported version {version}")
        fp = _read_exact(f, 64).decode()
        (tlen,) = struct.unpack("<I", _read_exact(f, 4))
        spec = json.loads(_read_exact(f, tlen).decode())
        if topology_fingerprint(spec) != fp:
            raise CorruptCheckpointError("fingerprint does not match topology")
        if expect_fingerprint is not None and fp != expect_fingerprint:
            raise TopologyMismatchError(
                f"checkpoint fingerprint {fp[:12]}.. != expected "
                f"{expect_fingerprint[:12]}.."
            )
        (mlen,) = struct.unpack("<H", _read_exact(f, 2))
        opt_kind = _read_exact(f, mlen).decode() if mlen else ""
        (nblocks,) = struct.unpack("<I", _read_exact(f, 4))
        blocks = {}
        for _ in range(nblocks):
            name, arr = _read_block(f)
            blocks[name] = arr
    net = network_from_spec(spec)
    param_blocks = {
        k: v.astype(F32) for k, v in blocks.items() if not k.startswith("opt/")
    }
    load_params(net, param_blocks)
    opt = None
    if opt_kind:
        opt = {"adam": Adam, "sgd": SGD}[opt_kind]()
        opt.load_state_blocks(
            {k[4:]: v for k, v in blocks.items() if k.startswith("opt/")}
        )
    return net, opt
