"""Model definitions, parameter init, optimizers, and checkpoint IO.

Two model families:

* :class:`CnnClassifier` -- two conv layers with relu, one average pooling
  layer, two linear layers. Used both as the image learner and as the
  critic that classifies explanation maps.
* :class:`ConceptPredictor` -- an MLP head over flattened concept
  matrices (hidden width 0 degrades to a single linear layer).

Parameters live as plain float64 arrays in ``model.params``; each training
step binds them as graph leaves, so the tape is rebuilt per minibatch.
Optimizer steps replace arrays instead of mutating them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _seed_rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)]))


class _Model:
    """Shared plumbing: params dict, leaf binding, fast untracked predict."""

    params: dict[str, np.ndarray]

    def bind(self, graph: ad.Graph) -> dict[str, ad.Tensor]:
        return {name: graph.leaf(value) for name, value in self.params.items()}

    def wrap(self) -> dict[str, ad.Tensor]:
        return {name: ad.Tensor(value) for name, value in self.params.items()}

    def logits(self, x: ad.Tensor, p: dict[str, ad.Tensor]) -> ad.Tensor:
        raise NotImplementedError

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Untracked forward pass; no graph is recorded."""
        outs = []
        for i in range(0, x.shape[0], batch_size):
            outs.append(self.logits(ad.Tensor(x[i:i + batch_size]), self.wrap()).data)
        return np.concatenate(outs, axis=0)

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return ad.softmax(ad.Tensor(self.predict_logits(x, batch_size))).data

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        pred = np.argmax(self.predict_logits(x), axis=1)
        return float(np.mean(pred == y) * 100.0)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


@dataclass
class CnnSpec:
    in_channels: int = 1
    num_classes: int = 10
    height: int = 28
    width: int = 28
    conv1: int = 8
    conv2: int = 16
    kernel: int = 5
    pool: int = 2
    fc1: int = 128

    def validate(self):
        h = self.height - 2 * (self.kernel - 1)
        w = self.width - 2 * (self.kernel - 1)
        if h <= 0 or w <= 0 or h % self.pool or w % self.pool:
            raise ValueError(f"CnnSpec: {self.height}x{self.width} input does not fit "
                             f"kernel {self.kernel} + pool {self.pool}")
        if min(self.in_channels, self.num_classes, self.conv1, self.conv2, self.fc1) < 1:
            raise ValueError("CnnSpec: all dimensions must be positive")


class CnnClassifier(_Model):
    """conv-relu-conv-relu-avgpool-fc-relu-fc image classifier."""

    def __init__(self, spec: CnnSpec, seed: int):
        spec.validate()
        self.spec = spec
        self.seed = seed
        ho = (spec.height - 2 * (spec.kernel - 1)) // spec.pool
        wo = (spec.width - 2 * (spec.kernel - 1)) // spec.pool
        self.flat = spec.conv2 * ho * wo
        self.reinit(seed)

    def reinit(self, seed: int):
        s, rng = self.spec, _seed_rng(seed, 0xC0)
        k2 = s.kernel * s.kernel
        self.params = {
            "conv1.w": _uniform_fan_in(rng, (s.conv1, s.in_channels, s.kernel, s.kernel), s.in_channels * k2),
            "conv1.b": _uniform_fan_in(rng, (s.conv1,), s.in_channels * k2),
            "conv2.w": _uniform_fan_in(rng, (s.conv2, s.conv1, s.kernel, s.kernel), s.conv1 * k2),
            "conv2.b": _uniform_fan_in(rng, (s.conv2,), s.conv1 * k2),
            "fc1.w": _uniform_fan_in(rng, (self.flat, s.fc1), self.flat),
            "fc1.b": _uniform_fan_in(rng, (s.fc1,), self.flat),
            "fc2.w": _uniform_fan_in(rng, (s.fc1, s.num_classes), s.fc1),
            "fc2.b": _uniform_fan_in(rng, (s.num_classes,), s.fc1),
        }

    def _trunk(self, x: ad.Tensor, p: dict[str, ad.Tensor]) -> ad.Tensor:
        s = self.spec
        h = ad.relu(ad.add(ad.conv2d(x, p["conv1.w"]), ad.reshape(p["conv1.b"], (1, s.conv1, 1, 1))))
        h = ad.relu(ad.add(ad.conv2d(h, p["conv2.w"]), ad.reshape(p["conv2.b"], (1, s.conv2, 1, 1))))
        h = ad.avgpool2d(h, s.pool)
        h = ad.reshape(h, (x.shape[0], self.flat))
        return ad.relu(ad.add(ad.matmul(h, p["fc1.w"]), p["fc1.b"]))

    def logits(self, x: ad.Tensor, p: dict[str, ad.Tensor]) -> ad.Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ad.ShapeError(f"CnnClassifier: expected [N,{self.spec.in_channels},H,W], got {x.shape}")
        h = self._trunk(x, p)
        return ad.add(ad.matmul(h, p["fc2.w"]), p["fc2.b"])

    def encode(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Penultimate-layer embedding, used as the metric encoding space."""
        outs = []
        for i in range(0, x.shape[0], batch_size):
            outs.append(self._trunk(ad.Tensor(x[i:i + batch_size]), self.wrap()).data)
        return np.concatenate(outs, axis=0)


@dataclass
class ConceptPredictorSpec:
    n_slots: int
    n_attrs: int
    num_classes: int
    hidden: int = 64

    def validate(self):
        if min(self.n_slots, self.n_attrs, self.num_classes) < 1 or self.hidden < 0:
            raise ValueError("ConceptPredictorSpec: invalid dimensions")


class ConceptPredictor(_Model):
    """MLP over flattened concept matrices; hidden=0 gives a linear head."""

    def __init__(self, spec: ConceptPredictorSpec, seed: int):
        spec.validate()
        self.spec = spec
        self.seed = seed
        self.flat = spec.n_slots * spec.n_attrs
        self.reinit(seed)

    def reinit(self, seed: int):
        s, rng = self.spec, _seed_rng(seed, 0xCE)
        if s.hidden:
            self.params = {
                "fc1.w": _uniform_fan_in(rng, (self.flat, s.hidden), self.flat),
                "fc1.b": _uniform_fan_in(rng, (s.hidden,), self.flat),
                "fc2.w": _uniform_fan_in(rng, (s.hidden, s.num_classes), s.hidden),
                "fc2.b": _uniform_fan_in(rng, (s.num_classes,), s.hidden),
            }
        else:
            self.params = {
                "fc2.w": _uniform_fan_in(rng, (self.flat, s.num_classes), self.flat),
                "fc2.b": _uniform_fan_in(rng, (s.num_classes,), self.flat),
            }

    def _flatten(self, x: ad.Tensor) -> ad.Tensor:
        if x.data.ndim == 3:
            return ad.reshape(x, (x.shape[0], self.flat))
        if x.data.ndim == 2 and x.shape[1] == self.flat:
            return x
        raise ad.ShapeError(f"ConceptPredictor: expected [N,{self.spec.n_slots},{self.spec.n_attrs}], got {x.shape}")

    def hidden_out(self, x: ad.Tensor, p: dict[str, ad.Tensor]) -> ad.Tensor:
        h = self._flatten(x)
        if self.spec.hidden:
            h = ad.relu(ad.add(ad.matmul(h, p["fc1.w"]), p["fc1.b"]))
        return h

    def logits(self, x: ad.Tensor, p: dict[str, ad.Tensor]) -> ad.Tensor:
        h = self.hidden_out(x, p)
        return ad.add(ad.matmul(h, p["fc2.w"]), p["fc2.b"])

    def encode(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        outs = []
        for i in range(0, x.shape[0], batch_size):
            outs.append(self.hidden_out(ad.Tensor(x[i:i + batch_size]), self.wrap()).data)
        return np.concatenate(outs, axis=0)


def cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    return ad.mean(ad.softmax_cross_entropy(logits, labels))


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class Optimizer:
    """SGD or Adam. A step strictly applies param <- param - update."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.step_count += 1
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name}")
            if self.kind == "sgd":
                params[name] = params[name] - self.lr * g
            elif self.kind == "adam":
                m, v = self.moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
                m = self.beta1 * m + (1 - self.beta1) * g
                v = self.beta2 * v + (1 - self.beta2) * (g * g)
                self.moments[name] = (m, v)
                mhat = m / (1 - self.beta1 ** self.step_count)
                vhat = v / (1 - self.beta2 ** self.step_count)
                params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                raise ValueError(f"unknown optimizer kind {self.kind!r}")


def train_step(model: _Model, optimizer: Optimizer, graph: ad.Graph,
               loss: ad.Tensor, leaves: dict[str, ad.Tensor]) -> float:
    """Backprop `loss` to the bound parameter leaves and apply one step.

    Returns the pre-step loss value; aborts on non-finite loss.
    """
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}; aborting (step {optimizer.step_count})")
    grad_map = ad.backward(graph, loss, [t.node for t in leaves.values()])
    grads = {name: grad_map[t.node].data for name, t in leaves.items()}
    optimizer.step(model.params, grads)
    return value


# ---------------------------------------------------------------------------
# checkpoint format: magic "LSXCKPT1", then per parameter
# (u32 name length, name bytes, u32 rank, u32 dims..., f64 row-major payload),
# everything little-endian.

_MAGIC = b"LSXCKPT1"


def save_params(path, params: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for name, value in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise ValueError(f"{path}: truncated payload for {name!r}")
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return params
