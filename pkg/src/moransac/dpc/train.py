"""Self-supervised training of the voting network on RANSAC pseudo-labels."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from ..geom import PointCloud, downsample_to_count, estimate_normals, farthest_point_sample
from ..plane_ransac import RansacParams
from .loss import assign_clusters, loss_and_vote_grad, pseudo_labels
from .net import VotingNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-5
    weight_decay: float = 1e-5
    k_range: tuple = (8, 196)
    alpha: float = 3.0
    points_per_cloud: int = 32768
    seed: int = 0
    norm: str = "l1"
    pseudo_threshold: float = 0.005
    pseudo_iterations: int = 100
    pseudo_min_inliers: int = 3
    normal_k: int = 30

    def __post_init__(self):
        lo, hi = self.k_range
        if not 1 <= lo <= hi:
            raise InputError("k_range must satisfy 1 <= low <= high")
        if self.alpha <= 0:
            raise InputError("alpha must be positive")
        if self.epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise InputError("epochs, learning_rate and weight_decay must be non-negative")
        if self.points_per_cloud < 1:
            raise InputError("points_per_cloud must be positive")


def prepare_cloud(cloud: PointCloud, points: int, normal_k: int = 30) -> PointCloud:
    """Downsample to roughly ``points`` and make sure normals exist."""
    out = downsample_to_count(cloud, points)
    if out.normals is None:
        out = estimate_normals(out, min(normal_k, len(out)))
    return out


def sgd_step(net: VotingNet, grads: dict, lr: float, weight_decay: float) -> None:
    """Plain gradient descent with decoupled decay on the linear weights."""
    for name, g in grads.items():
        p = net.params[name]
        if weight_decay and name.endswith(".W"):
            p *= 1.0 - lr * weight_decay
        p -= lr * g


def train_step(net: VotingNet, cloud: PointCloud, k: int, config: TrainConfig, seed: int) -> float:
    x = cloud.features9d()
    sample = farthest_point_sample(cloud.positions, k, seed)
    votes, cache = net.forward(x, training=True)
    clustering = assign_clusters(cloud.positions + votes, sample)
    params = RansacParams(config.pseudo_threshold, config.pseudo_iterations, config.pseudo_min_inliers, seed)
    labels = pseudo_labels(cloud, clustering, params)
    loss, _, dvoted = loss_and_vote_grad(clustering.voted, sample, labels, config.alpha, config.norm)
    sgd_step(net, net.backward(cache, dvoted), config.learning_rate, config.weight_decay)
    return loss


def train(net: VotingNet, dataset, config: TrainConfig = TrainConfig()):
    """Train a copy of ``net``; returns (trained net, loss log).

    Log rows are (epoch, step, K, loss). Epoch numbers continue from the
    network's ``epochs_trained`` so resumed runs append cleanly.
    """
    dataset = list(dataset)
    if not dataset:
        raise InputError("empty training dataset")
    net = net.copy()
    clouds = [prepare_cloud(c, config.points_per_cloud, config.normal_k) for c in dataset]
    rng = np.random.default_rng([config.seed, net.epochs_trained])
    lo, hi = config.k_range
    rows = []
    for _ in range(config.epochs):
        epoch = net.epochs_trained
        for step, ci in enumerate(rng.permutation(len(clouds))):
            cloud = clouds[ci]
            k = min(int(rng.integers(lo, hi + 1)), len(cloud))
            loss = train_step(net, cloud, k, config, int(rng.integers(2**31)))
            rows.append((epoch, step, k, loss))
        net.epochs_trained += 1
        log.info("epoch %d mean loss %.5f", epoch, epoch_means(rows)[epoch])
    return net, rows


def calibrate_running_stats(net: VotingNet, clouds) -> VotingNet:
    """Copy of ``net`` whose normalization statistics are the exact average of
    per-cloud batch statistics (no parameter change)."""
    mus, vs = [], []
    for c in clouds:
        _, cache = net.forward(c.features9d(), training=True, update_stats=False)
        h = cache["layers"][-1][4]
        mus.append(h.mean(axis=0))
        vs.append(h.var(axis=0))
    out = net.copy()
    out.buffers["bn.running_mean"] = np.mean(mus, axis=0)
    out.buffers["bn.running_var"] = np.mean(vs, axis=0)
    return out


def pseudo_inlier_spread(net: VotingNet, cloud: PointCloud, k: int = 32, seeds=(0, 1, 2),
                         threshold: float = 0.005, iterations: int = 100) -> float:
    """Mean L1 distance from pseudo-inliers to their representative after voting.

    Averaged over one FPS draw per seed; evaluation-mode forward pass.
    """
    votes = net.predict(cloud.features9d())
    out = []
    for seed in seeds:
        sample = farthest_point_sample(cloud.positions, min(k, len(cloud)), seed)
        clustering = assign_clusters(cloud.positions + votes, sample)
        labels = pseudo_labels(cloud, clustering, RansacParams(threshold, iterations, 3, seed))
        d = [np.abs(clustering.voted[c.inliers] - clustering.representatives[i]).sum(axis=1)
             for i, c in enumerate(labels.clusters) if not c.skipped and len(c.inliers)]
        if d:
            out.append(np.concatenate(d).mean())
    return float(np.mean(out)) if out else 0.0


def epoch_means(rows) -> dict:
    out = {}
    for epoch, _, _, loss in rows:
        out.setdefault(epoch, []).append(loss)
    return {e: float(np.mean(v)) for e, v in out.items()}


def write_loss_csv(path, rows, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if not append:
            w.writerow(["epoch", "step", "K", "loss"])
        for epoch, step, k, loss in rows:
            w.writerow([epoch, step, k, f"{loss:.8f}"])
