"""Small dense networks with hand-written backprop, Adam, and loss helpers.

Parameters live in a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` shaped
``(fan_in, fan_out)``, so optimizers and soft updates can zip over them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CHECKPOINT_SCHEMA = 1
ACTIVATIONS = ("tanh", "relu", "linear", "sigmoid")


class TrainingError(RuntimeError):
    """Raised when training produces non-finite values."""


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (np.tanh(0.5 * z) + 1)  # overflow-free logistic
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1 - a * a)
    if name == "sigmoid":
        return g * a * (1 - a)
    return g


class DenseNet:
    def __init__(
        self,
        widths: Sequence[int],
        activations: Sequence[str],
        seed: int | None = 0,
        dtype=np.float64,
    ):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer (len(widths) - 1)")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = widths
        self.activations = list(activations)
        self.dtype = np.dtype(dtype)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.params.append(np.zeros((fan_in, fan_out), dtype=self.dtype))
            self.params.append(np.zeros(fan_out, dtype=self.dtype))
        self._cache = None
        if seed is not None:
            kaiming_init(self, seed)

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: np.ndarray, keep_cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (batch, {self.in_dim}), got {x.shape}")
        inputs, pre, post = [], [], []
        a = x
        for k, act in enumerate(self.activations):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            z = a @ W
            z += b
            inputs.append(a)
            # relu runs in place: its gradient only needs the sign, which survives
            a = np.maximum(z, 0, out=z) if act == "relu" else _act(act, z)
            pre.append(z)
            post.append(a)
        if keep_cache:
            self._cache = (inputs, pre, post)
        return a

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, keep_cache=False)

    def backward(self, grad_out: np.ndarray, cache=None, input_grad: bool = True,
                 param_grads: bool = True) -> tuple[list[np.ndarray], np.ndarray]:
        """Reverse-mode pass. Returns (parameter gradients, input gradient).

        Gradients that are switched off come back as None.
        """
        cache = cache if cache is not None else self._cache
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        inputs, pre, post = cache
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = np.asarray(grad_out, dtype=self.dtype)
        for k in reversed(range(self.n_layers)):
            if self.activations[k] == "relu" and k < self.n_layers - 1:
                # g was produced by this pass, so it can be masked in place
                np.multiply(g, post[k] > 0, out=g)
            else:
                g = _act_grad(self.activations[k], pre[k], post[k], g)
            if param_grads:
                grads[2 * k] = inputs[k].T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            if k == 0 and not input_grad:
                return grads, None
            W = self.params[2 * k]
            # a one-column gradient is an outer product; BLAS is slow at those
            g = g * W[:, 0] if W.shape[1] == 1 else g @ W.T
        return grads, g

    @property
    def cache(self):
        return self._cache

    def copy(self) -> "DenseNet":
        net = DenseNet(self.widths, self.activations, seed=None, dtype=self.dtype)
        net.params = [p.copy() for p in self.params]
        return net

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "activations": self.activations,
            "dtype": self.dtype.name,
            "params": [p.tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNet":
        net = cls(doc["widths"], doc["activations"], seed=None, dtype=np.dtype(doc["dtype"]))
        params = [np.asarray(p, dtype=net.dtype) for p in doc["params"]]
        for have, want in zip(params, net.params):
            if have.shape != want.shape:
                raise ValueError(f"parameter shape {have.shape} does not match {want.shape}")
        net.params = params
        return net


def mlp(in_dim: int, out_dim: int, out_act: str, hidden: Sequence[int] = (256, 256),
        seed: int = 0, dtype=np.float64) -> DenseNet:
    widths = [in_dim, *hidden, out_dim]
    return DenseNet(widths, ["relu"] * len(hidden) + [out_act], seed=seed, dtype=dtype)


def kaiming_init(net: DenseNet, seed: int) -> DenseNet:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    for k in range(net.n_layers):
        W = net.params[2 * k]
        net.params[2 * k] = rng.normal(0.0, np.sqrt(2.0 / W.shape[0]), size=W.shape).astype(net.dtype)
        net.params[2 * k + 1] = np.zeros_like(net.params[2 * k + 1])
    return net


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float = 4e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update ``params`` in place."""
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient passed to Adam")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in enumerate(grads):
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "betas": [self.b1, self.b2], "eps": self.eps, "t": self.t,
                "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}


def adam_step(opt: Adam, net: DenseNet, grads: Sequence[np.ndarray]) -> DenseNet:
    opt.step(net.params, grads)
    return net


def soft_update(target: DenseNet, online: DenseNet, delta: float) -> DenseNet:
    """target <- delta * online + (1 - delta) * target."""
    for t, o in zip(target.params, online.params):
        if t.shape != o.shape:
            raise ValueError("soft_update on networks of different shapes")
        t *= 1 - delta
        t += delta * o
    return target


def loss_mse(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all components and its gradient w.r.t. ``a``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff)), 2 * diff / diff.size


BCE_CLAMP = 1e-7


def loss_bce(p: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy (mean) and its gradient w.r.t. ``p``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the gradient is zero
    where the clamp is active.
    """
    p = np.asarray(p)
    target = np.broadcast_to(np.asarray(target, dtype=p.dtype), p.shape)
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    loss = -(target * np.log(pc) + (1 - target) * np.log(1 - pc))
    grad = (pc - target) / (pc * (1 - pc)) / p.size
    grad = np.where((p > BCE_CLAMP) & (p < 1 - BCE_CLAMP), grad, 0.0)
    return float(np.mean(loss)), grad.astype(p.dtype)


@dataclass
class Checkpoint:
    """Named networks plus free-form metadata, stored as versioned JSON."""

    kind: str
    nets: dict[str, DenseNet]
    meta: dict

    def to_json(self) -> str:
        doc = {
            "schema_version": CHECKPOINT_SCHEMA,
            "kind": self.kind,
            "meta": self.meta,
            "nets": {k: v.to_dict() for k, v in self.nets.items()},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
        return cls(doc["kind"], {k: DenseNet.from_dict(v) for k, v in doc["nets"].items()}, doc["meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    from .scenario import atomic_write_text

    atomic_write_text(path, ckpt.to_json())


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        return Checkpoint.from_json(fh.read())
