"""Pointwise voting network with explicit forward and reverse passes.

Layout: a per-point MLP backbone (9 -> ... -> feature_dim), then two voting
layers (feature_dim -> 3 -> 3), each followed by a nonlinearity, and a batch
normalization over the point dimension whose output is the vote.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError

IN_DIM = 9
VOTE_DIM = 3


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "leaky_relu":
        return np.where(x > 0, x, 0.01 * x)
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x
    raise InputError(f"unknown activation {name!r}")


def _act_grad(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (x > 0).astype(x.dtype)
    if name == "leaky_relu":
        return np.where(x > 0, 1.0, 0.01)
    if name == "tanh":
        return 1.0 - y * y
    return np.ones_like(x)


@dataclass
class VotingNet:
    """Parameters and running statistics of the voting network.

    ``params`` holds every trainable tensor, ``buffers`` the batch-norm
    running mean/variance. Names are stable and used for serialization.
    """

    hidden: tuple = (64, 128)
    backbone_act: str = "relu"
    head_act: str = "tanh"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    epochs_trained: int = 0

    @classmethod
    def create(cls, hidden=(64, 128), seed: int = 0, backbone_act="relu", head_act="tanh") -> "VotingNet":
        rng = np.random.default_rng(seed)
        net = cls(tuple(int(h) for h in hidden), backbone_act, head_act)
        dims = [IN_DIM, *net.hidden]
        for i in range(len(net.hidden)):
            net.params[f"backbone.{i}.W"], net.params[f"backbone.{i}.b"] = _init_linear(rng, dims[i], dims[i + 1])
        feat = dims[-1]
        net.params["head.0.W"], net.params["head.0.b"] = _init_linear(rng, feat, VOTE_DIM)
        net.params["head.1.W"], net.params["head.1.b"] = _init_linear(rng, VOTE_DIM, VOTE_DIM)
        net.params["bn.gamma"] = np.ones(VOTE_DIM)
        net.params["bn.beta"] = np.zeros(VOTE_DIM)
        net.buffers["bn.running_mean"] = np.zeros(VOTE_DIM)
        net.buffers["bn.running_var"] = np.ones(VOTE_DIM)
        return net

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    def linear_names(self) -> list:
        return [f"backbone.{i}" for i in range(len(self.hidden))] + ["head.0", "head.1"]

    def copy(self) -> "VotingNet":
        return VotingNet(
            self.hidden, self.backbone_act, self.head_act, self.bn_eps, self.bn_momentum,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.epochs_trained,
        )

    def forward(self, x, training: bool = False, update_stats: bool = True):
        """Votes for an (N, 9) feature array; returns (votes, cache).

        In training mode the normalization uses batch statistics and, when
        ``update_stats`` is set, folds them into the running estimates.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != IN_DIM:
            raise InputError(f"expected (N, {IN_DIM}) input, got {x.shape}")
        if len(x) == 0:
            raise InputError("empty input")
        if not np.all(np.isfinite(x)):
            raise InputError("non-finite network input")

        cache = {"training": training, "layers": []}
        h = x
        names = self.linear_names()
        for i, name in enumerate(names):
            act = self.backbone_act if name.startswith("backbone") else self.head_act
            z = h @ self.params[f"{name}.W"] + self.params[f"{name}.b"]
            a = _act(act, z)
            cache["layers"].append((name, act, h, z, a))
            h = a

        gamma, beta = self.params["bn.gamma"], self.params["bn.beta"]
        if training:
            mu = h.mean(axis=0)
            var = h.var(axis=0)
            if update_stats:
                n = len(h)
                unbiased = var * n / (n - 1) if n > 1 else var
                m = self.bn_momentum
                self.buffers["bn.running_mean"] = (1 - m) * self.buffers["bn.running_mean"] + m * mu
                self.buffers["bn.running_var"] = (1 - m) * self.buffers["bn.running_var"] + m * unbiased
        else:
            mu = self.buffers["bn.running_mean"]
            var = self.buffers["bn.running_var"]
        inv_std = 1.0 / np.sqrt(var + self.bn_eps)
        xhat = (h - mu) * inv_std
        cache["bn"] = (xhat, inv_std)
        return gamma * xhat + beta, cache

    def backward(self, cache, dvotes) -> dict:
        """Parameter gradients given dL/dvotes for the cached forward pass."""
        dvotes = np.asarray(dvotes, dtype=np.float64)
        xhat, inv_std = cache["bn"]
        grads = {
            "bn.gamma": np.sum(dvotes * xhat, axis=0),
            "bn.beta": np.sum(dvotes, axis=0),
        }
        dxhat = dvotes * self.params["bn.gamma"]
        if cache["training"]:
            n = len(dxhat)
            dh = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dh = dxhat * inv_std
        for name, act, h_in, z, a in reversed(cache["layers"]):
            dz = dh * _act_grad(act, z, a)
            grads[f"{name}.W"] = h_in.T @ dz
            grads[f"{name}.b"] = dz.sum(axis=0)
            dh = dz @ self.params[f"{name}.W"].T
        return grads

    def predict(self, x) -> np.ndarray:
        return self.forward(x, training=False)[0]


def _init_linear(rng, fan_in: int, fan_out: int):
    # He-normal keeps activation scale through the rectifier stack
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), np.zeros(fan_out)
