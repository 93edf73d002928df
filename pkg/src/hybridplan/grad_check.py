"""Toy-scale numeric checks of the training mathematics.

* data-parallel gradient decomposition: the batch-mean gradient equals the
  mean of per-shard mean gradients when shards have equal size;
* backpropagation against central finite differences;
* a pipelined, delayed-gradient trainer emulated with explicit buffers.

Everything is dense float64 numpy; no threads are involved, so results are
reproducible bit for bit.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import DivergenceError, NumericError

ACTIVATIONS = ("identity", "tanh", "relu")
LOSSES = ("squared_error", "cross_entropy")


def _activate(name, z):
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_grad(name, z):
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return (z > 0).astype(z.dtype)


@dataclass
class Stage:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=float)
        if self.weight.ndim != 2:
            raise ValueError("stage weight must be a matrix")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=float)

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


@dataclass
class TinyNet:
    stages: list
    loss: str = "squared_error"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("consecutive stage dimensions do not compose")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise NumericError("network parameters must be finite")

    @classmethod
    def random(cls, dims, rng, activation="tanh", last_activation="identity", loss="squared_error",
               bias=True, scale=1.0):
        stages = []
        for k, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            w = rng.normal(0.0, scale / np.sqrt(d_in), size=(d_in, d_out))
            b = rng.normal(0.0, 0.1, size=d_out) if bias else None
            act = last_activation if k == len(dims) - 2 else activation
            stages.append(Stage(w, b, act))
        return cls(stages, loss)

    def params(self):
        return [p for s in self.stages for p in s.params()]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat):
        offset = 0
        for p in self.params():
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def copy(self) -> "TinyNet":
        return copy.deepcopy(self)

    def forward(self, x):
        for s in self.stages:
            x = stage_forward(s, x)
        return x


@dataclass
class ShardedDataset:
    """Inputs ``x`` (V x d) and targets ``y`` split into ``m`` equal contiguous shards."""

    x: np.ndarray
    y: np.ndarray
    m: int = 1

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have the same number of points")
        if self.m < 1 or len(self.x) % self.m:
            raise ValueError(f"{len(self.x)} points cannot be split into {self.m} equal shards")

    @property
    def shard_size(self) -> int:
        return len(self.x) // self.m

    def shards(self):
        b = self.shard_size
        for k in range(self.m):
            yield ShardedDataset(self.x[k * b : (k + 1) * b], self.y[k * b : (k + 1) * b], 1)


def stage_forward(stage: Stage, x):
    z = x @ stage.weight
    if stage.bias is not None:
        z = z + stage.bias
    return _activate(stage.activation, z)


def stage_backward(stage: Stage, x_in, g_out):
    """Gradients of one stage given its stored input and the upstream gradient.

    Returns (grads in ``stage.params()`` order, gradient w.r.t. the stage input).
    """
    z = x_in @ stage.weight
    if stage.bias is not None:
        z = z + stage.bias
    delta = g_out * _activate_grad(stage.activation, z)
    grads = [x_in.T @ delta]
    if stage.bias is not None:
        grads.append(delta.sum(axis=0))
    return grads, delta @ stage.weight.T


def _targets(y, out, loss):
    if loss == "squared_error":
        return np.asarray(y, dtype=float).reshape(out.shape)
    return np.asarray(y, dtype=int).reshape(len(out))


def loss_and_grad(out, y, loss="squared_error"):
    """Batch-mean loss and its gradient w.r.t. the network output."""
    n = len(out)
    y = _targets(y, out, loss)
    if loss == "squared_error":
        r = out - y
        return float(np.sum(r * r) / n), 2.0 * r / n
    shifted = out - out.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = float(-logp[np.arange(n), y].sum() / n)
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return value, g / n


def _xy(data):
    if isinstance(data, ShardedDataset):
        return data.x, data.y
    x, y = data
    x = np.asarray(x, dtype=float)
    return (x[:, None] if x.ndim == 1 else x), np.asarray(y)


def batch_loss(net: TinyNet, data) -> float:
    x, y = _xy(data)
    return loss_and_grad(net.forward(x), y, net.loss)[0]


def _backprop(net: TinyNet, x, y):
    inputs = []
    h = x
    for s in net.stages:
        inputs.append(h)
        h = stage_forward(s, h)
    value, g = loss_and_grad(h, y, net.loss)
    grads = [None] * len(net.stages)
    for k in range(len(net.stages) - 1, -1, -1):
        grads[k], g = stage_backward(net.stages[k], inputs[k], g)
    return value, grads


def _check_finite(vec, what):
    if not np.all(np.isfinite(vec)):
        raise NumericError(f"non-finite value in {what}")
    return vec


def full_gradient(net: TinyNet, data) -> np.ndarray:
    """Mean over all points of d loss / d params, by backpropagation."""
    x, y = _xy(data)
    _, grads = _backprop(net, x, y)
    return _check_finite(np.concatenate([g.ravel() for gs in grads for g in gs]), "gradient")


def sharded_gradient(net: TinyNet, data: ShardedDataset) -> np.ndarray:
    """Average of the per-shard mean gradients, each shard computed on its own."""
    per_shard = [full_gradient(net, shard) for shard in data.shards()]
    return sum(per_shard) / data.m


def finite_diff_gradient(net: TinyNet, data, eps: float = 1e-6) -> np.ndarray:
    if not eps > 0:
        raise ValueError("eps must be positive")
    probe = net.copy()
    theta = net.flat_params()
    out = np.empty_like(theta)
    for k in range(theta.size):
        shifted = theta.copy()
        shifted[k] = theta[k] + eps
        probe.set_flat_params(shifted)
        up = batch_loss(probe, data)
        shifted[k] = theta[k] - eps
        probe.set_flat_params(shifted)
        down = batch_loss(probe, data)
        out[k] = (up - down) / (2.0 * eps)
    return out


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def _apply(stage: Stage, grads, lr):
    for p, g in zip(stage.params(), grads):
        p -= lr * g


def sgd_step(net: TinyNet, data, lr: float) -> float:
    """Plain full-batch SGD step in place; returns the pre-update loss."""
    x, y = _xy(data)
    value, grads = _backprop(net, x, y)
    for s, g in zip(net.stages, grads):
        _apply(s, g, lr)
    return value


LearningRate = Union[float, Callable[[int], float]]


@dataclass
class TickResult:
    tick: int
    ready: bool
    updated_stages: list
    completed_microbatch: Optional[int] = None
    loss: Optional[float] = None


@dataclass
class PipelineState:
    """Buffers of a pipelined network with one stage per partition.

    Stage ``i`` (1-based) runs the forward pass of micro-batch ``t - i + 1`` at
    tick ``t``. Activations and gradients move one stage per tick, so stage
    ``i`` receives the gradient for a micro-batch ``2 (n - i)`` ticks after its
    forward pass and keeps that many stored inputs. Updates of micro-batch
    ``k`` use learning rate ``lr(k)``.
    """

    n_stages: int
    lr: LearningRate = 0.01
    tick: int = 0
    stash: list = field(default_factory=list)
    fwd_inbox: dict = field(default_factory=dict)
    bwd_inbox: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stash:
            self.stash = [dict() for _ in range(self.n_stages)]

    def learning_rate(self, k: int) -> float:
        return self.lr(k) if callable(self.lr) else self.lr

    def delay(self, stage: int) -> int:
        return 2 * (self.n_stages - stage)

    @property
    def in_flight(self) -> int:
        return sum(len(s) for s in self.stash) + len(self.fwd_inbox) + len(self.bwd_inbox)


def delayed_gradient_step(state: PipelineState, net: TinyNet, minibatch=None):
    """Advance the pipeline by one tick, updating ``net`` in place.

    ``minibatch`` is an (x, y) pair entering stage 1, or None while draining.
    The result's ``ready`` flag stays False until some stage has a gradient
    to apply, i.e. during pipeline fill.
    """
    n = len(net.stages)
    if n != state.n_stages:
        raise ValueError("pipeline state and network disagree on the number of stages")
    state.tick += 1
    t = state.tick
    fwd_out, bwd_out = {}, {}
    updated = []
    result = TickResult(tick=t, ready=False, updated_stages=updated)
    if minibatch is not None:
        x, y = _xy(minibatch)
        state.fwd_inbox[0] = (t, x)
        state.targets[t] = y

    for i in range(n):
        stage = net.stages[i]
        if i in state.fwd_inbox:
            k, a_in = state.fwd_inbox.pop(i)
            state.stash[i][k] = a_in
            a_out = stage_forward(stage, a_in)
            if i == n - 1:
                value, g = loss_and_grad(a_out, state.targets.pop(k), net.loss)
                result.loss, result.completed_microbatch = value, k
                state.bwd_inbox[i] = (k, g)
            else:
                fwd_out[i + 1] = (k, a_out)
        if i in state.bwd_inbox:
            k, g = state.bwd_inbox.pop(i)
            a_in = state.stash[i].pop(k)
            grads, g_in = stage_backward(stage, a_in, g)
            _apply(stage, grads, state.learning_rate(k))
            updated.append(i + 1)
            if i > 0:
                bwd_out[i - 1] = (k, g_in)

    state.fwd_inbox.update(fwd_out)
    state.bwd_inbox.update(bwd_out)
    result.ready = bool(updated)
    return net, state, result


@dataclass(frozen=True)
class ToyConfig:
    n_samples: int = 64
    n_features: int = 4
    hidden: int = 4
    n_stages: int = 2
    shards: int = 2
    steps: int = 200
    lr: float = 0.02
    noise: float = 0.1
    seed: int = 0
    divergence_threshold: float = 1e6


def toy_problem(cfg: ToyConfig):
    """Seeded linear-regression data and a matching linear ``n_stages`` network."""
    rng = np.random.default_rng(cfg.seed)
    x = rng.normal(size=(cfg.n_samples, cfg.n_features))
    w_true = rng.normal(size=(cfg.n_features, 1))
    y = x @ w_true + cfg.noise * rng.normal(size=(cfg.n_samples, 1))
    dims = [cfg.n_features] + [cfg.hidden] * (cfg.n_stages - 1) + [1]
    net = TinyNet.random(dims, rng, activation="identity", last_activation="identity", bias=False)
    return ShardedDataset(x, y, cfg.shards), net


@dataclass
class ToyTrajectories:
    initial_loss: float
    sequential: list
    pipelined: list
    sharded: list


def _guard(traj, name, cfg, trajectories):
    last = traj[-1]
    if not np.isfinite(last) or last > cfg.divergence_threshold:
        raise DivergenceError(f"{name} training diverged (loss {last:g})", trajectories)


def train_toy(cfg: ToyConfig = ToyConfig()) -> ToyTrajectories:
    """Full-batch training on constant data three ways: sequential SGD,
    pipelined delayed-gradient SGD and sharded-gradient SGD.

    Each trajectory holds the full-data loss after every step (tick for the
    pipeline).
    """
    data, net0 = toy_problem(cfg)
    trajectories = {"sequential": [], "pipelined": [], "sharded": []}
    initial = batch_loss(net0, data)

    seq = net0.copy()
    for _ in range(cfg.steps):
        sgd_step(seq, data, cfg.lr)
        trajectories["sequential"].append(batch_loss(seq, data))
        _guard(trajectories["sequential"], "sequential", cfg, trajectories)

    sharded = net0.copy()
    for _ in range(cfg.steps):
        sharded.set_flat_params(sharded.flat_params() - cfg.lr * sharded_gradient(sharded, data))
        trajectories["sharded"].append(batch_loss(sharded, data))
        _guard(trajectories["sharded"], "sharded", cfg, trajectories)

    piped = net0.copy()
    state = PipelineState(len(piped.stages), lr=cfg.lr)
    for _ in range(cfg.steps):
        delayed_gradient_step(state, piped, (data.x, data.y))
        trajectories["pipelined"].append(batch_loss(piped, data))
        _guard(trajectories["pipelined"], "pipelined", cfg, trajectories)

    return ToyTrajectories(initial, **trajectories)
