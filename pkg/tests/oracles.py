"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def brute_knn(targets, queries, k):
    out = []
    for q in queries:
        d = [(float(np.sum((t - q) ** 2)), i) for i, t in enumerate(targets)]
        d.sort()
        out.append([i for _, i in d[:k]])
    return np.array(out, dtype=np.int64)


def brute_fps(points, k, first):
    chosen = [first]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i, p in enumerate(points):
            if i in chosen:
                continue
            d = min(float(np.sum((p - points[c]) ** 2)) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def brute_assign(voted, reps):
    labels = []
    for p in voted:
        d = [float(np.sqrt(np.sum((p - r) ** 2))) for r in reps]
        labels.append(int(np.argmin(d)))
    return np.array(labels)


def pair_scan_rand_index(a, b):
    agree = total = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        agree += (a[i] == a[j]) == (b[i] == b[j])
        total += 1
    return agree / total


def direct_voi(a, b):
    n = len(a)
    ha = hb = mi = 0.0
    pa = {x: sum(1 for v in a if v == x) / n for x in set(a)}
    pb = {y: sum(1 for v in b if v == y) / n for y in set(b)}
    for x, p in pa.items():
        ha -= p * math.log(p)
    for y, p in pb.items():
        hb -= p * math.log(p)
    for x in pa:
        for y in pb:
            pxy = sum(1 for u, v in zip(a, b) if u == x and v == y) / n
            if pxy > 0:
                mi += pxy * math.log(pxy / (pa[x] * pb[y]))
    return ha + hb - 2 * mi


def direct_covering(gt, pred):
    gt, pred = list(gt), list(pred)
    n = len(gt)
    total = 0.0
    for r in set(gt) - {-1}:
        rs = {i for i in range(n) if gt[i] == r}
        best = 0.0
        for q in set(pred) - {-1}:
            qs = {i for i in range(n) if pred[i] == q}
            best = max(best, len(rs & qs) / len(rs | qs))
        total += len(rs) * best
    # unlabelled reference points are not part of any region to cover
    return total / sum(1 for g in gt if g != -1)


def brute_centroid_graph(centroids, ids, u):
    edges = set()
    for i, a in enumerate(ids):
        d = sorted((float(np.sum((centroids[j] - centroids[i]) ** 2)), j) for j in range(len(ids)) if j != i)
        for _, j in d[:u]:
            edges.add(frozenset((a, ids[j])))
    return edges


def brute_min_distance(xa, xb):
    return min(float(np.linalg.norm(p - q)) for p in xa for q in xb)
