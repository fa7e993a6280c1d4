"""A small numpy network stack: dense layers, ReLU, batch norm, softmax cross-entropy, Adam.

Two architectures sit on top of it:

* ``classification``: input batch norm, a pixel reducer (DRP), one cluster-difference
  reducer (DRC) shared by all Q candidates, and a fully connected classifier (FC).
* ``regression_distance``: one distance module shared by all candidates, fed with the
  squared feature differences and the squared normalised spatial distance; the
  logits are the negated distances.

Input rows follow the candidate layout ``[pixel (M)] + [D_q (Q)] + [diffs (Q*M)]``.
Parameters are kept float32-representable so that SPNN files round-trip exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from superpix.errors import (
    BadDepth,
    BadDims,
    BadMagic,
    EmptyDataset,
    NonFiniteLoss,
    ShapeMismatch,
    SpecMismatch,
    TruncatedData,
    VersionMismatch,
)

SENTINEL_DROPPED = -1
MISSING = -1
LARGE_DISTANCE = 1e4


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Single rows would take BLAS's gemv path, whose rounding differs from gemm;
    # padding keeps each row's result independent of the batch size.
    if x.shape[0] == 1:
        return (np.vstack([x, x]) @ w)[:1]
    return x @ w


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    def params(self) -> list[tuple[str, np.ndarray]]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def zero_grad(self) -> None:
        for g in self.grads():
            g[...] = 0.0


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, bias: bool = True, rng=None, init: str = "he"):
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "he":
            lim = math.sqrt(6.0 / n_in)
        elif init == "glorot":
            lim = math.sqrt(6.0 / (n_in + n_out))
        elif init == "zero":
            lim = 0.0
        else:
            raise ValueError(f"unknown init {init!r}")
        self.W = _f32(rng.uniform(-lim, lim, size=(n_in, n_out)))
        self.b = np.zeros(n_out) if bias else None
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros(n_out) if bias else None
        self._x = None

    def params(self):
        return [("W", self.W)] + ([("b", self.b)] if self.b is not None else [])

    def grads(self):
        return [self.dW] + ([self.db] if self.b is not None else [])

    def forward(self, x, train=False):
        self._x = x
        y = _matmul(x, self.W)
        return y + self.b if self.b is not None else y

    def backward(self, g):
        self.dW += self._x.T @ g
        if self.b is not None:
            self.db += g.sum(axis=0)
        return g @ self.W.T


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return np.where(self._mask, g, 0.0)


class Square(Layer):
    def forward(self, x, train=False):
        self._x = x
        return x * x

    def backward(self, g):
        return 2.0 * self._x * g


class BatchNorm(Layer):
    """Per-feature batch normalisation; running statistics use momentum 0.9."""

    def __init__(self, n: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.dgamma = np.zeros(n)
        self.dbeta = np.zeros(n)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def grads(self):
        return [self.dgamma, self.dbeta]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, train=False):
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.running_mean[...] = _f32(m * self.running_mean + (1 - m) * mean)
            self.running_var[...] = _f32(m * self.running_var + (1 - m) * var)
        else:
            mean, var = self.running_mean, self.running_var
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._inv
        self._train = train
        return self.gamma * self._xhat + self.beta

    def backward(self, g):
        self.dgamma += (g * self._xhat).sum(axis=0)
        self.dbeta += g.sum(axis=0)
        gx = g * self.gamma
        if not self._train:
            return gx * self._inv
        n = g.shape[0]
        return (
            self._inv
            / n
            * (n * gx - gx.sum(axis=0) - self._xhat * (gx * self._xhat).sum(axis=0))
        )


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [(f"{i}.{n}", p) for i, l in enumerate(self.layers) for n, p in l.params()]

    def grads(self):
        return [g for l in self.layers for g in l.grads()]

    def buffers(self):
        return [(f"{i}.{n}", b) for i, l in enumerate(self.layers) for n, b in l.buffers()]

    def forward(self, x, train=False):
        for l in self.layers:
            x = l.forward(x, train)
        return x

    def backward(self, g):
        for l in reversed(self.layers):
            g = l.backward(g)
        return g


def mlp(sizes, rng, relu_last: bool = True, bias: bool = True, last_init: str = "he") -> Sequential:
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(Dense(a, b, bias=bias, rng=rng, init=last_init if last else "he"))
        if not last or relu_last:
            layers.append(ReLU())
    return Sequential(layers)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean loss and d(loss)/d(logits)."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


@dataclass
class NetworkSpec:
    kind: str
    M: int
    Q: int
    depth: int = 0
    drp: tuple[int, ...] = (100, 15)
    drc: tuple[int, ...] = (100, 15)
    fc: tuple[int, ...] = (120, 105, 15)
    reg_hidden: tuple[int, ...] = (32, 16)

    @property
    def input_size(self) -> int:
        return self.M + self.Q + self.Q * self.M

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "NetworkSpec":
        d = json.loads(s)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def build_classifier(M: int, Q: int = 7, **sizes) -> NetworkSpec:
    if M < 1 or Q < 1:
        raise BadDims(f"M and Q must be >= 1, got M={M}, Q={Q}")
    return NetworkSpec("classification", M, Q, **sizes)


def build_regression(M: int, Q: int, depth: int = 1, **sizes) -> NetworkSpec:
    if depth not in (1, 3):
        raise BadDepth(f"regression depth must be 1 or 3, got {depth}")
    if M < 1 or Q < 1:
        raise BadDims(f"M and Q must be >= 1, got M={M}, Q={Q}")
    return NetworkSpec("regression_distance", M, Q, depth=depth, **sizes)


class Network:
    """Forward/backward over the candidate-layout input; see the module docstring."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        M, Q = spec.M, spec.Q
        if spec.kind == "classification":
            self.bn = BatchNorm(spec.input_size)
            self.drp = mlp((M,) + spec.drp, rng)
            self.drc = mlp((M,) + spec.drc, rng)
            fc_in = spec.drp[-1] + Q + Q * spec.drc[-1]
            self.fc = mlp((fc_in,) + spec.fc + (Q,), rng, relu_last=False, last_init="zero")
            self.modules = [("bn", self.bn), ("drp", self.drp), ("drc", self.drc), ("fc", self.fc)]
        elif spec.kind == "regression_distance":
            if spec.depth == 1:
                self.dist = Sequential([Dense(M + 1, 1, bias=False, rng=rng, init="zero")])
            elif spec.depth == 3:
                self.dist = mlp((M + 1,) + spec.reg_hidden + (1,), rng, relu_last=False, last_init="zero")
            else:
                raise BadDepth(f"regression depth must be 1 or 3, got {spec.depth}")
            self.modules = [("dist", self.dist)]
        else:
            raise BadDims(f"unknown network kind {spec.kind!r}")

    # -- parameter plumbing ------------------------------------------------
    def params(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{m}.{n}", p) for m, mod in self.modules for n, p in mod.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for _, mod in self.modules for g in mod.grads()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{m}.{n}", b) for m, mod in self.modules for n, b in mod.buffers()]

    def zero_grad(self) -> None:
        for _, mod in self.modules:
            mod.zero_grad()

    def n_params(self) -> int:
        return sum(p.size for _, p in self.params())

    # -- computation -------------------------------------------------------
    def _split(self, x):
        M, Q = self.spec.M, self.spec.Q
        return x[:, :M], x[:, M : M + Q], x[:, M + Q :].reshape(-1, Q, M)

    def missing_mask(self, x: np.ndarray) -> np.ndarray:
        _, dq, _ = self._split(x)
        return dq >= LARGE_DISTANCE

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Logits (N, Q); candidates flagged missing get -inf."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_size:
            raise ShapeMismatch(f"expected input (N, {self.spec.input_size}), got {x.shape}")
        missing = self.missing_mask(x)
        self._x = x
        n, M, Q = x.shape[0], self.spec.M, self.spec.Q
        if self.spec.kind == "classification":
            xn = self.bn.forward(x, train)
            pix, dq, diffs = self._split(xn)
            hp = self.drp.forward(pix, train)
            hc = self.drc.forward(diffs.reshape(n * Q, M), train).reshape(n, -1)
            logits = self.fc.forward(np.concatenate([hp, dq, hc], axis=1), train)
        else:
            _, dq, diffs = self._split(x)
            feats = np.concatenate([diffs * diffs, (dq * dq)[:, :, None]], axis=2)
            logits = -self.dist.forward(feats.reshape(n * Q, M + 1), train).reshape(n, Q)
        self._missing = missing
        return np.where(missing, -np.inf, logits)

    def distances(self, x: np.ndarray) -> np.ndarray:
        """Regression nets only: the per-candidate module outputs."""
        if self.spec.kind != "regression_distance":
            raise BadDims("distances() is defined for regression networks only")
        return -self.forward(x)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns d(loss)/d(input)."""
        g = np.where(self._missing, 0.0, grad_logits)
        n, M, Q = g.shape[0], self.spec.M, self.spec.Q
        if self.spec.kind == "classification":
            gin = self.fc.backward(g)
            hp_w = self.spec.drp[-1]
            g_hp, g_dq, g_hc = gin[:, :hp_w], gin[:, hp_w : hp_w + Q], gin[:, hp_w + Q :]
            g_pix = self.drp.backward(g_hp)
            g_diff = self.drc.backward(g_hc.reshape(n * Q, -1)).reshape(n, Q * M)
            return self.bn.backward(np.concatenate([g_pix, g_dq, g_diff], axis=1))
        gf = self.dist.backward(-g.reshape(n * Q, 1)).reshape(n, Q, M + 1)
        _, dq, diffs = self._split(self._x)
        g_diff = (2.0 * diffs * gf[:, :, :M]).reshape(n, Q * M)
        g_dq = 2.0 * dq * gf[:, :, M]
        return np.concatenate([np.zeros((n, M)), g_dq, g_diff], axis=1)

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray, train: bool = True) -> float:
        logits = self.forward(x, train)
        loss, g = softmax_cross_entropy(logits, y)
        self.backward(g)
        return loss

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def bind(self, net: Network) -> "Adam":
        self.m = [np.zeros_like(p) for _, p in net.params()]
        self.v = [np.zeros_like(p) for _, p in net.params()]
        return self

    def step(self, net: Network) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for (_, p), g, m, v in zip(net.params(), net.grads(), self.m, self.v):
            m[...] = _f32(self.beta1 * m + (1 - self.beta1) * g)
            v[...] = _f32(self.beta2 * v + (1 - self.beta2) * g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p[...] = _f32(p)


@dataclass
class SampleSet:
    """Classifier inputs (N, M + Q + Q*M) and targets in [0, Q)."""

    X: np.ndarray
    y: np.ndarray
    M: int
    Q: int
    coords: np.ndarray | None = None  # (N, 3): image index, x, y

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "SampleSet":
        c = None if self.coords is None else self.coords[idx]
        return SampleSet(self.X[idx], self.y[idx], self.M, self.Q, c)


def train_epoch(
    net: Network, opt: Adam, samples: SampleSet, rng: np.random.Generator, batch_size: int = 256
) -> float:
    """One pass of shuffled minibatches; returns the sample-weighted mean loss."""
    keep = samples.y != SENTINEL_DROPPED
    X, y = samples.X[keep], samples.y[keep]
    if len(y) == 0:
        raise EmptyDataset("no training samples")
    order = rng.permutation(len(y))
    total = 0.0
    for s in range(0, len(y), batch_size):
        idx = order[s : s + batch_size]
        net.zero_grad()
        loss = net.loss_and_grad(X[idx], y[idx], train=True)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at step {opt.step_count}")
        opt.step(net)
        total += loss * len(idx)
    return total / len(y)


def evaluate_loss(net: Network, samples: SampleSet, batch_size: int = 4096) -> tuple[float, float]:
    """Inference-mode (loss, accuracy)."""
    if len(samples) == 0:
        raise EmptyDataset("no samples to evaluate")
    total = 0.0
    correct = 0
    for s in range(0, len(samples), batch_size):
        x = samples.X[s : s + batch_size]
        y = samples.y[s : s + batch_size]
        logits = net.forward(x)
        loss, _ = softmax_cross_entropy(logits, y)
        total += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return total / len(samples), correct / len(samples)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def gradient_check(layer, x: np.ndarray, h: float = 1e-4, train: bool = True, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``layer`` is any object with forward/backward/params/grads (a Layer or a
    Network). The scalar checked is sum(out * r) for a fixed random r, so every
    output coordinate contributes.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)

    def run(inp):
        return layer.forward(inp, train)

    out = run(x)
    finite = np.isfinite(out)
    r = np.where(finite, rng.normal(size=out.shape), 0.0)

    def f(inp):
        o = run(inp)
        return float(np.sum(np.where(finite, o, 0.0) * r))

    layer.zero_grad()
    run(x)
    gx = layer.backward(r)
    analytic = [g.copy() for g in layer.grads()]
    # Running statistics must not drift during the probe evaluations.
    saved = [b.copy() for _, b in layer.buffers()]

    def restore():
        for (_, b), s in zip(layer.buffers(), saved):
            b[...] = s

    num_x = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        restore()
        num_x[i] = (fp - fm) / (2 * h)
    errs = [_rel_err(gx, num_x)]
    for (_, p), g in zip(layer.params(), analytic):
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            fp = f(x)
            p[i] = old - h
            fm = f(x)
            p[i] = old
            restore()
            num[i] = (fp - fm) / (2 * h)
        errs.append(_rel_err(g, num))
    return max(errs)


def _jitter(obj, rng) -> None:
    # Zero biases park dead ReLU units exactly on the kink, where central
    # differences are meaningless, and a zero output layer hides every
    # upstream gradient; both are replaced by small random values.
    for name, p in obj.params():
        if name.endswith(".b") or name == "b" or not p.any():
            p[...] = rng.normal(scale=0.1, size=p.shape)


def gradient_report(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error for each layer type and both network kinds."""
    rng = np.random.default_rng(seed)
    cases = {
        "dense": (Dense(6, 4, rng=rng), rng.normal(size=(5, 6)), False),
        "dense+relu": (mlp((6, 5, 4), rng), rng.normal(size=(5, 6)), False),
        "batchnorm": (BatchNorm(4), rng.normal(size=(8, 4)), True),
        "square": (Square(), rng.normal(size=(3, 4)), False),
    }
    out = {}
    for name, (layer, x, train) in cases.items():
        _jitter(layer, rng)
        out[name] = gradient_check(layer, x, train=train, seed=seed)
    small = dict(drp=(6, 5), drc=(6, 5), fc=(7, 6, 5), reg_hidden=(5, 4))
    for name, spec in (
        ("classifier", build_classifier(3, 4, **small)),
        ("regression1", build_regression(3, 4, 1, **small)),
        ("regression3", build_regression(3, 4, 3, **small)),
    ):
        net = Network(spec, seed)
        _jitter(net, rng)
        out[name] = gradient_check(net, rng.normal(size=(6, spec.input_size)), seed=seed)
    return out


# ---------------------------------------------------------------------------
# SPNN files
# ---------------------------------------------------------------------------


def save_network(path, net: Network, opt: Adam | None = None) -> None:
    """``b"SPNN"``, u32 version, u32 json length, spec json, u32 Adam step,
    then float32 LE buffers: parameters, batch-norm statistics, Adam m, Adam v."""
    spec = net.spec.to_json().encode()
    opt = opt if opt is not None else Adam().bind(net)
    parts = [b"SPNN", struct.pack("<2I", 1, len(spec)), spec, struct.pack("<I", opt.step_count)]
    for arr in _state_arrays(net, opt):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _state_arrays(net: Network, opt: Adam):
    return [p for _, p in net.params()] + [b for _, b in net.buffers()] + list(opt.m) + list(opt.v)


def load_network(path, expect: NetworkSpec | None = None) -> tuple[Network, Adam]:
    buf = Path(path).read_bytes()
    if buf[:4] != b"SPNN":
        raise BadMagic(f"expected magic b'SPNN', found {buf[:4]!r}")
    if len(buf) < 12:
        raise TruncatedData("file shorter than its header")
    version, n = struct.unpack("<2I", buf[4:12])
    if version != 1:
        raise VersionMismatch(f"SPNN version {version} not supported")
    if len(buf) < 16 + n:
        raise TruncatedData("truncated network spec")
    spec = NetworkSpec.from_json(buf[12 : 12 + n].decode())
    if expect is not None and spec != expect:
        raise SpecMismatch(f"file holds {spec}, expected {expect}")
    (step,) = struct.unpack("<I", buf[12 + n : 16 + n])
    net = Network(spec)
    opt = Adam().bind(net)
    opt.step_count = step
    pos = 16 + n
    for arr in _state_arrays(net, opt):
        size = 4 * arr.size
        if len(buf) < pos + size:
            raise TruncatedData("truncated weight buffers")
        arr[...] = np.frombuffer(buf[pos : pos + size], dtype="<f4").reshape(arr.shape)
        pos += size
    if pos != len(buf):
        raise SpecMismatch(f"{len(buf) - pos} trailing bytes after weight buffers")
    return net, opt
