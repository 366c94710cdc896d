import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moransac.dpc import (
    ClusterLabel,
    PseudoLabels,
    TrainConfig,
    VotingNet,
    assign_clusters,
    calibrate_running_stats,
    contrastive_loss,
    epoch_means,
    infer_subplanes,
    load_net,
    loss_and_vote_grad,
    loss_gradients,
    pseudo_labels,
    save_net,
    train,
    write_loss_csv,
)
from moransac.errors import InputError, ModelFormatError
from moransac.geom import PointCloud, estimate_normals, farthest_point_sample
from moransac.plane_ransac import RansacParams
from moransac.synth import SceneSpec, gen_scene

from oracles import brute_assign


def cloud9(n, seed=0):
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(rng.random((n, 3)), rng.random((n, 3)), normals)


def fixed_labels(n, k, seed):
    """Random cluster/inlier split that does not come from RANSAC."""
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, k, n)
    out = []
    for c in range(k):
        m = np.nonzero(lab == c)[0]
        inl = rng.random(len(m)) < 0.6
        out.append(ClusterLabel(m[inl], m[~inl]))
    return PseudoLabels(out)


# ------------------------------------------------------------------ network


def test_vote_shape_any_n():
    net = VotingNet.create(seed=0)
    for n in (1, 2, 17):
        assert net.predict(cloud9(n).features9d()).shape == (n, 3)


def test_zero_final_layer_gives_identical_votes():
    net = VotingNet.create(seed=1)
    net.params["head.1.W"][:] = 0.0
    v = net.predict(cloud9(30).features9d())
    assert np.all(v == v[0])


def test_forward_permutation_equivariant():
    net = VotingNet.create(seed=2)
    x = cloud9(50).features9d()
    perm = np.random.default_rng(0).permutation(50)
    np.testing.assert_allclose(net.predict(x)[perm], net.predict(x[perm]), atol=1e-12)


def test_forward_deterministic_eval():
    net = VotingNet.create(seed=3)
    x = cloud9(40).features9d()
    assert np.array_equal(net.predict(x), net.predict(x))


def test_forward_rejects_nonfinite():
    x = cloud9(4).features9d()
    x[1, 4] = np.inf
    with pytest.raises(InputError):
        VotingNet.create().predict(x)


def test_eval_forward_leaves_running_stats():
    net = VotingNet.create(seed=0)
    before = {k: v.copy() for k, v in net.buffers.items()}
    net.predict(cloud9(20).features9d())
    for k in before:
        assert np.array_equal(before[k], net.buffers[k])


# --------------------------------------------------------------- assignment


def test_assign_single_representative():
    c = assign_clusters(np.random.default_rng(0).random((20, 3)), [5])
    assert np.all(c.labels == 0)


def test_assign_nearest():
    voted = np.array([[0.0, 0, 0], [10.0, 0, 0], [1.0, 0, 0]])
    assert assign_clusters(voted, [0, 1]).labels.tolist() == [0, 1, 0]


def test_assign_tie_goes_to_lowest():
    voted = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 0, 0]])
    assert assign_clusters(voted, [1, 0]).labels[2] == 0


def test_assign_rejects_duplicates():
    with pytest.raises(InputError):
        assign_clusters(np.zeros((5, 3)), [1, 1])
    with pytest.raises(InputError):
        assign_clusters(np.zeros((5, 3)), [7])


def test_assign_brute_force_200():
    rng = np.random.default_rng(1)
    voted = rng.random((200, 3))
    s = farthest_point_sample(voted, 8, 0)
    np.testing.assert_array_equal(assign_clusters(voted, s).labels, brute_assign(voted, voted[s]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 300), st.integers(1, 32))
def test_assignment_is_nearest(seed, n, k):
    rng = np.random.default_rng(seed)
    voted = rng.random((n, 3))
    k = min(k, n)
    s = rng.choice(n, k, replace=False)
    c = assign_clusters(voted, s)
    d = np.linalg.norm(voted[:, None] - c.representatives[None], axis=2)
    mine = d[np.arange(n), c.labels]
    assert np.all(mine <= d.min(axis=1))
    assert np.all(c.labels[s] == np.arange(k))


# ------------------------------------------------------------ pseudo labels


def test_planar_cluster_all_inliers():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.random((40, 2)), np.zeros(40)])
    c = assign_clusters(pts, [0])
    lab = pseudo_labels(PointCloud(pts), c, RansacParams(0.005, 50, 3, 0)).clusters[0]
    assert len(lab.inliers) == 40 and len(lab.outliers) == 0


def test_tiny_cluster_skipped():
    pts = np.array([[0.0, 0, 0], [0.01, 0, 0], [5.0, 5, 5], [5.1, 5, 5], [5.0, 5.1, 5], [5.0, 5, 5.1]])
    c = assign_clusters(pts, [0, 2])
    lab = pseudo_labels(PointCloud(pts), c, RansacParams(0.005, 50, 3, 0))
    assert lab.clusters[0].skipped and not lab.clusters[1].skipped


def test_eighty_twenty_split_exact():
    rng = np.random.default_rng(3)
    plane = np.column_stack([rng.random((80, 2)), np.zeros(80)])
    off = np.column_stack([rng.random((20, 2)), np.full(20, 0.05)])
    pts = np.vstack([plane, off])
    c = assign_clusters(pts, [0])
    lab = pseudo_labels(PointCloud(pts), c, RansacParams(0.005, 100, 3, 0)).clusters[0]
    assert sorted(lab.inliers.tolist()) == list(range(80))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pseudo_labels_partition_members(seed):
    cloud = cloud9(150, seed)
    s = farthest_point_sample(cloud.positions, 6, seed)
    c = assign_clusters(cloud.positions, s)
    params = RansacParams(0.05, 30, 3, seed)
    for k, lab in enumerate(pseudo_labels(cloud, c, params).clusters):
        members = set(np.nonzero(c.labels == k)[0].tolist())
        assert set(lab.inliers.tolist()) | set(lab.outliers.tolist()) == members
        assert not set(lab.inliers.tolist()) & set(lab.outliers.tolist())
        if lab.plane is not None:
            assert np.all(lab.plane.distance(cloud.positions[lab.inliers]) < params.inlier_threshold)


# --------------------------------------------------------------------- loss


def test_hand_computed_cluster_loss():
    # inlier and outlier both at L1 distance 1 from the representative
    voted = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0.5, 0.5]])
    labels = PseudoLabels([ClusterLabel(np.array([1]), np.array([2]))])
    L, per, _ = loss_and_vote_grad(voted, [0], labels, alpha=3.0)
    assert abs(per[0] - 3.0) <= 1e-12 and abs(L - 3.0) <= 1e-12


def test_hinge_inactive_beyond_alpha():
    voted = np.array([[0.0, 0, 0], [2.0, 1.5, 0], [-3.0, 0, 0.1]])
    labels = PseudoLabels([ClusterLabel(np.array([0]), np.array([1, 2]))])
    L, per, g = loss_and_vote_grad(voted, [0], labels, alpha=3.0)
    assert L == 0.0 and np.all(g == 0)


def test_zero_loss_when_inliers_coincide():
    voted = np.tile([0.2, 0.3, 0.4], (5, 1))
    labels = PseudoLabels([ClusterLabel(np.arange(5), np.arange(0))])
    assert loss_and_vote_grad(voted, [0], labels)[0] == 0.0


def test_skipped_clusters_give_zero_gradients():
    net = VotingNet.create(hidden=(8,), seed=0)
    cloud = cloud9(10)
    labels = PseudoLabels([ClusterLabel(np.arange(0), np.arange(2), skipped=True)])
    L, grads = loss_gradients(net, cloud.features9d(), [0], labels)
    assert L == 0.0 and all(np.all(g == 0) for g in grads.values())


def test_loss_mean_over_active_clusters():
    voted = np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 5, 5], [5.0, 5, 6]])
    labels = PseudoLabels([ClusterLabel(np.array([1]), np.arange(0)),
                           ClusterLabel(np.array([3]), np.arange(0)),
                           ClusterLabel(np.arange(0), np.arange(0), skipped=True)])
    L, per, _ = loss_and_vote_grad(voted, [0, 2, 1], labels)
    assert L == pytest.approx(1.0) and per.tolist() == [1.0, 1.0, 0.0]


def test_contrastive_loss_wrapper():
    voted = np.random.default_rng(0).random((30, 3))
    c = assign_clusters(voted, [0, 5, 9])
    labels = fixed_labels(30, 3, 0)
    assert contrastive_loss(c, labels)[0] == loss_and_vote_grad(voted, [0, 5, 9], labels)[0]


def test_l2_option():
    voted = np.array([[0.0, 0, 0], [3.0, 4.0, 0]])
    labels = PseudoLabels([ClusterLabel(np.array([1]), np.arange(0))])
    assert loss_and_vote_grad(voted, [0], labels, norm="l2")[0] == pytest.approx(5.0)
    with pytest.raises(InputError):
        loss_and_vote_grad(voted, [0], labels, norm="l3")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0), st.floats(0.0, 5.0))
def test_loss_nonnegative_and_monotone_in_alpha(seed, alpha, extra):
    rng = np.random.default_rng(seed)
    voted = rng.normal(0, 2, (40, 3))
    labels = fixed_labels(40, 4, seed)
    sample = [0, 1, 2, 3]
    for c in labels.clusters:
        c.inliers = c.inliers[~np.isin(c.inliers, sample)]
        c.outliers = c.outliers[~np.isin(c.outliers, sample)]
    a = loss_and_vote_grad(voted, sample, labels, alpha)[0]
    b = loss_and_vote_grad(voted, sample, labels, alpha + extra)[0]
    assert 0.0 <= a <= b + 1e-12


def test_inlier_gradient_unchanged_when_alpha_grows_past_outliers():
    voted = np.array([[0.0, 0, 0], [0.5, 0.2, 0], [4.0, 0, 0]])
    labels = PseudoLabels([ClusterLabel(np.array([1]), np.array([2]))])
    _, _, g1 = loss_and_vote_grad(voted, [0], labels, alpha=3.0)
    _, _, g2 = loss_and_vote_grad(voted, [0], labels, alpha=1.0)
    np.testing.assert_array_equal(g1, g2)


# ---------------------------------------------------------- gradient check


def _kink_margin(net, x, sample, labels, alpha):
    votes, cache = net.forward(x, training=True, update_stats=False)
    voted = x[:, :3] + votes
    m = np.inf
    for name, act, _, z, _ in cache["layers"]:
        if act in ("relu", "leaky_relu"):
            m = min(m, np.abs(z).min())
    for k, c in enumerate(labels.clusters):
        rep = voted[sample[k]]
        for idx in (c.inliers, c.outliers):
            if len(idx):
                m = min(m, np.abs(voted[idx] - rep).min())
        if len(c.outliers):
            m = min(m, np.abs(alpha - np.abs(voted[c.outliers] - rep).sum(axis=1)).min())
    return m


def _numeric_grads(net, x, sample, labels, alpha, h=1e-4):
    out = {}
    for name, p in net.params.items():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            lp = loss_gradients(net, x, sample, labels, alpha)[0]
            p[i] = old - h
            lm = loss_gradients(net, x, sample, labels, alpha)[0]
            p[i] = old
            g[i] = (lp - lm) / (2 * h)
        out[name] = g
    return out


@pytest.mark.parametrize("backbone", ["relu", "tanh"])
def test_gradients_match_finite_differences(backbone):
    # 3 linear layers: one backbone layer plus the two voting layers
    alpha = 3.0
    for seed in range(20):
        net = VotingNet.create(hidden=(16,), seed=seed, backbone_act=backbone, head_act="tanh")
        cloud = cloud9(64, seed)
        x = cloud.features9d()
        sample = np.array([0, 1, 2, 3])
        labels = fixed_labels(64, 4, seed)
        for c in labels.clusters:
            c.inliers = c.inliers[~np.isin(c.inliers, sample)]
            c.outliers = c.outliers[~np.isin(c.outliers, sample)]
        if _kink_margin(net, x, sample, labels, alpha) > 1e-3:
            break
    else:
        pytest.fail("no kink-free configuration found")
    _, analytic = loss_gradients(net, x, sample, labels, alpha)
    numeric = _numeric_grads(net, x, sample, labels, alpha)
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
        worst = max(worst, np.abs(a - n).max() / scale)
    assert worst < 1e-3


def test_eval_mode_gradients_match_finite_differences():
    net = VotingNet.create(hidden=(8,), seed=4, backbone_act="tanh")
    net.buffers["bn.running_mean"] = np.array([0.1, -0.2, 0.05])
    net.buffers["bn.running_var"] = np.array([0.5, 0.3, 0.8])
    x = cloud9(32, 4).features9d()
    labels = fixed_labels(32, 2, 4)
    sample = np.array([0, 1])
    for c in labels.clusters:
        c.inliers = c.inliers[~np.isin(c.inliers, sample)]
        c.outliers = c.outliers[~np.isin(c.outliers, sample)]
    _, a = loss_gradients(net, x, sample, labels, 3.0, training=False)
    h = 1e-5
    p = net.params["head.0.W"]
    for i in [(0, 0), (3, 2), (7, 1)]:
        old = p[i]
        p[i] = old + h
        lp = loss_gradients(net, x, sample, labels, 3.0, training=False)[0]
        p[i] = old - h
        lm = loss_gradients(net, x, sample, labels, 3.0, training=False)[0]
        p[i] = old
        assert (lp - lm) / (2 * h) == pytest.approx(a["head.0.W"][i], rel=1e-4, abs=1e-9)


# ----------------------------------------------------------------- training


@pytest.fixture(scope="module")
def small_scenes():
    return [gen_scene(SceneSpec(seed=100 + i, n_objects=2, points_per_face=100, floor_points=600))[0]
            for i in range(4)]


def test_zero_learning_rate_only_moves_running_stats(small_scenes):
    net = VotingNet.create(seed=0)
    out, rows = train(net, small_scenes, TrainConfig(epochs=1, learning_rate=0.0, points_per_cloud=500))
    for k in net.params:
        assert np.array_equal(net.params[k], out.params[k])
    assert not np.array_equal(net.buffers["bn.running_mean"], out.buffers["bn.running_mean"])
    assert len(rows) == 4


def test_training_deterministic(small_scenes):
    cfg = TrainConfig(epochs=2, learning_rate=0.05, points_per_cloud=500, seed=3)
    _, r1 = train(VotingNet.create(seed=3), small_scenes, cfg)
    _, r2 = train(VotingNet.create(seed=3), small_scenes, cfg)
    assert r1 == r2


def test_training_leaves_input_net_untouched(small_scenes):
    net = VotingNet.create(seed=0)
    w = net.params["head.0.W"].copy()
    out, _ = train(net, small_scenes, TrainConfig(epochs=1, learning_rate=0.05, points_per_cloud=500))
    assert np.array_equal(net.params["head.0.W"], w)
    assert out.epochs_trained == 1 and net.epochs_trained == 0


def test_resume_continues_epoch_numbers(small_scenes, tmp_path):
    cfg = TrainConfig(epochs=1, learning_rate=0.05, points_per_cloud=500)
    a, rows_a = train(VotingNet.create(seed=0), small_scenes, cfg)
    save_net(a, tmp_path / "m.morn")
    b, rows_b = train(load_net(tmp_path / "m.morn"), small_scenes, cfg)
    assert {r[0] for r in rows_a} == {0} and {r[0] for r in rows_b} == {1}
    assert b.epochs_trained == 2
    write_loss_csv(tmp_path / "loss.csv", rows_a)
    write_loss_csv(tmp_path / "loss.csv", rows_b, append=True)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,K,loss" and len(lines) == 1 + len(rows_a) + len(rows_b)


def test_k_capped_by_cloud_size(small_scenes):
    cfg = TrainConfig(epochs=1, learning_rate=0.01, points_per_cloud=50, k_range=(100, 150))
    _, rows = train(VotingNet.create(seed=0), small_scenes[:1], cfg)
    assert rows[0][2] <= 53


def test_empty_dataset():
    with pytest.raises(InputError):
        train(VotingNet.create(), [], TrainConfig(epochs=1))


@pytest.mark.parametrize("bad", [dict(k_range=(0, 5)), dict(k_range=(9, 8)), dict(alpha=0), dict(epochs=-1)])
def test_train_config_validated(bad):
    with pytest.raises(InputError):
        TrainConfig(**bad)


def test_loss_falls_over_two_epochs(toy_dataset):
    # 20 scenes, 2048 points, 2 epochs; majority of 3 seeds
    ok = 0
    for seed in range(3):
        _, rows = train(VotingNet.create(seed=seed), toy_dataset,
                        TrainConfig(epochs=2, learning_rate=0.05, points_per_cloud=2048, seed=seed))
        m = epoch_means(rows)
        ok += m[1] < m[0]
    assert ok >= 2


def test_calibration_matches_batch_statistics(small_scenes):
    clouds = [estimate_normals(c) if c.normals is None else c for c in small_scenes]
    net = calibrate_running_stats(VotingNet.create(seed=0), clouds)
    hs = []
    for c in clouds:
        _, cache = net.forward(c.features9d(), training=True, update_stats=False)
        hs.append(cache["layers"][-1][4].mean(axis=0))
    np.testing.assert_allclose(net.buffers["bn.running_mean"], np.mean(hs, axis=0))


# ---------------------------------------------------------- serialization


def test_model_round_trip(tmp_path):
    net = VotingNet.create(hidden=(16, 32), seed=5)
    net.epochs_trained = 7
    save_net(net, tmp_path / "m.morn")
    back = load_net(tmp_path / "m.morn")
    assert back.hidden == (16, 32) and back.epochs_trained == 7 and back.head_act == net.head_act
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k].astype(np.float32))
    x = cloud9(10).features9d()
    np.testing.assert_allclose(back.predict(x), net.predict(x), atol=1e-4)
    assert (tmp_path / "m.morn").read_bytes()[:4] == b"MORN"


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing", "empty"])
def test_corrupt_model_rejected(tmp_path, damage):
    p = tmp_path / "m.morn"
    save_net(VotingNet.create(seed=0), p)
    data = bytearray(p.read_bytes())
    if damage == "magic":
        data[:4] = b"NOPE"
    elif damage == "version":
        data[4:8] = (99).to_bytes(4, "little")
    elif damage == "truncate":
        data = data[:-10]
    elif damage == "trailing":
        data += b"xx"
    else:
        data = bytearray()
    p.write_bytes(bytes(data))
    with pytest.raises(ModelFormatError):
        load_net(p)


# ---------------------------------------------------------------- inference


def _dict_signature(dicts):
    return [[(k, c.indices.tolist(), None if c.plane is None else (c.plane.normal.tolist(), c.plane.offset))
             for k, c in sorted(d.items())] for d in dicts]


def test_infer_subplanes_deterministic_and_disjoint():
    cloud, _, _ = gen_scene(SceneSpec(seed=3, n_objects=2))
    net = VotingNet.create(seed=0)
    a = infer_subplanes(net, cloud, 32, seed=4)
    b = infer_subplanes(net, cloud, 32, seed=4)
    assert len(a) == 3
    assert _dict_signature(a) == _dict_signature(b)
    idx = np.concatenate([c.indices for d in a for c in d.values()])
    assert len(idx) == len(cloud) and len(np.unique(idx)) == len(cloud)


def test_infer_without_colors():
    cloud, _, _ = gen_scene(SceneSpec(seed=1, n_objects=1))
    bare = PointCloud(cloud.positions, None, cloud.normals)
    dicts = infer_subplanes(VotingNet.create(seed=0), bare, 16)
    assert sum(len(d) for d in dicts) > 0


def test_small_split_uses_all_points():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.random((40, 3)) * [1, 1, 0], rng.random((5, 3)) + 10])
    cloud = estimate_normals(PointCloud(pts), 4)
    dicts = infer_subplanes(None, cloud, 64)
    assert sum(len(c.indices) for d in dicts for c in d.values()) == 45
