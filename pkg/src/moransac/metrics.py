"""Partition comparison metrics on voxelized label maps.

All three metrics work from the joint contingency table of two labelings.
VOI is reported in nats. Segmentation covering is directional: by default
ground-truth regions are covered by predicted ones.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError
from .geom import PointCloud, voxel_keys


@dataclass
class MetricsReport:
    voi: float
    ri: float
    sc: float
    voxel_size: float
    voxel_count: int


def _pair(a, b):
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    b = np.asarray(b, dtype=np.int64).reshape(-1)
    if len(a) != len(b):
        raise InputError(f"label lengths differ: {len(a)} vs {len(b)}")
    return a, b


def contingency(a, b):
    """Joint counts n_ij plus the row and column marginals."""
    a, b = _pair(a, b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai.reshape(-1), bi.reshape(-1)), 1)
    return table, table.sum(axis=1), table.sum(axis=0)


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def rand_index(a, b) -> float:
    a, b = _pair(a, b)
    n = len(a)
    if n < 2:
        raise InputError("rand index needs at least 2 elements")
    table, ra, cb = contingency(a, b)
    total = n * (n - 1) // 2
    same_both = int(_comb2(table).sum())
    same_a = int(_comb2(ra).sum())
    same_b = int(_comb2(cb).sum())
    agree = total + 2 * same_both - same_a - same_b
    return agree / total


def _entropy(counts, n) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def variation_of_information(a, b) -> float:
    a, b = _pair(a, b)
    n = len(a)
    if n == 0:
        raise InputError("empty labelings")
    table, ra, cb = contingency(a, b)
    h_a, h_b = _entropy(ra, n), _entropy(cb, n)
    nz = table > 0
    pij = table[nz] / n
    outer = (ra[:, None] * cb[None, :])[nz] / (n * n)
    mi = float(np.sum(pij * np.log(pij / outer)))
    return max(0.0, h_a + h_b - 2.0 * mi)


def segmentation_covering(gt, pred, direction: str = "gt_by_pred") -> float:
    """Size-weighted best IoU of each reference region against the other labeling.

    -1 is never a region: unlabelled reference points do not count towards
    the total, and unassigned predicted points never cover anything (an
    all-unassigned prediction scores 0). ``direction="pred_by_gt"`` swaps
    the roles.
    """
    gt, pred = _pair(gt, pred)
    if direction == "pred_by_gt":
        gt, pred = pred, gt
    elif direction != "gt_by_pred":
        raise InputError(f"unknown covering direction {direction!r}")
    total = int(np.count_nonzero(gt >= 0))
    if total == 0:
        return 0.0
    table, size_g, size_p = contingency(gt, pred)
    keep_g = np.unique(gt) >= 0
    keep_p = np.unique(pred) >= 0
    if not np.any(keep_p):
        return 0.0
    inter = table[keep_g][:, keep_p]
    union = size_g[keep_g, None] + size_p[None, keep_p] - inter
    iou = inter / union
    return float(np.sum(size_g[keep_g] * iou.max(axis=1)) / total)


def voxelize_labels(cloud, labels, voxel: float, origin=None):
    """Majority label per occupied voxel.

    Unassigned points do not vote unless a voxel holds nothing else, in which
    case it is -1. Ties go to the lowest label. Returns (keys, labels) with
    voxels in lexicographic key order.
    """
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(pos):
        raise InputError("labels and cloud lengths differ")
    keys = voxel_keys(pos, voxel, origin)
    uniq, vid = np.unique(keys, axis=0, return_inverse=True)
    vid = vid.reshape(-1)
    out = np.full(len(uniq), -1, dtype=np.int64)
    voting = labels >= 0
    if np.any(voting):
        pairs = np.stack([vid[voting], labels[voting]], axis=1)
        up, cnt = np.unique(pairs, axis=0, return_counts=True)
        # voxel ascending, count descending, label ascending
        order = np.lexsort((up[:, 1], -cnt, up[:, 0]))
        up = up[order]
        first = np.ones(len(up), dtype=bool)
        first[1:] = up[1:, 0] != up[:-1, 0]
        out[up[first, 0]] = up[first, 1]
    return uniq, out


def evaluate(cloud, gt, pred, voxel: float = 0.005, sc_direction: str = "gt_by_pred") -> MetricsReport:
    """Voxelize both labelings on one shared grid and compare them."""
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    gt, pred = _pair(gt, pred)
    if len(gt) != len(pos):
        raise InputError("labels and cloud lengths differ")
    if len(pos) == 0:
        raise InputError("no occupied voxels")
    origin = pos.min(axis=0)
    _, g = voxelize_labels(pos, gt, voxel, origin)
    _, p = voxelize_labels(pos, pred, voxel, origin)
    if len(g) < 2:
        ri = 1.0
    else:
        ri = rand_index(g, p)
    return MetricsReport(
        voi=variation_of_information(g, p),
        ri=ri,
        sc=segmentation_covering(g, p, sc_direction),
        voxel_size=voxel,
        voxel_count=len(g),
    )


def evaluate_sweep(cloud, gt, pred, voxels, sc_direction: str = "gt_by_pred") -> list[MetricsReport]:
    return [evaluate(cloud, gt, pred, v, sc_direction) for v in voxels]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["voxel_size", "voxel_count", "VOI", "RI", "SC"])
    for r in reports:
        w.writerow([f"{r.voxel_size:g}", r.voxel_count, f"{r.voi:.6f}", f"{r.ri:.6f}", f"{r.sc:.6f}"])
    return buf.getvalue()


def reports_to_table(reports) -> str:
    lines = [f"{'voxel (m)':>10} {'voxels':>8} {'VOI':>8} {'RI':>7} {'SC':>7}"]
    for r in reports:
        lines.append(f"{r.voxel_size:>10g} {r.voxel_count:>8d} {r.voi:>8.3f} {r.ri:>7.3f} {r.sc:>7.3f}")
    return "\n".join(lines)


def report_dict(r: MetricsReport) -> dict:
    return asdict(r)
