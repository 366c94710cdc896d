"""Deep plane clustering: voting network, pseudo-labels, loss, training, inference."""

from .infer import DEFAULT_K, N_SPLITS, infer_subplanes
from .loss import (
    ClusterLabel,
    PseudoLabels,
    SubplaneClustering,
    assign_clusters,
    contrastive_loss,
    loss_and_vote_grad,
    loss_gradients,
    pseudo_labels,
)
from .net import VotingNet
from .serialize import load_net, save_net
from .train import TrainConfig, calibrate_running_stats, epoch_means, pseudo_inlier_spread, train, write_loss_csv

__all__ = [
    "DEFAULT_K", "N_SPLITS", "infer_subplanes", "ClusterLabel", "PseudoLabels", "SubplaneClustering",
    "assign_clusters", "contrastive_loss", "loss_and_vote_grad", "loss_gradients", "pseudo_labels",
    "VotingNet", "load_net", "save_net", "TrainConfig", "calibrate_running_stats", "epoch_means",
    "pseudo_inlier_spread", "train", "write_loss_csv",
]
