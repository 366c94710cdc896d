"""Command-line entry point: segment, baseline, train, eval, synth, grasp."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .dpc import TrainConfig, VotingNet, load_net, save_net, train, write_loss_csv
from .errors import EmptyCloudError, InputError, MoRansacError
from .geom import CameraIntrinsics, PointCloud, estimate_normals
from .merge import MergeParams, clusters_from_labels
from .metrics import evaluate_sweep, reports_to_csv, reports_to_table
from .pipeline import grasp_point, segment
from .plane_ransac import RansacParams, sequential_multiplane
from .synth import SceneSpec, gen_scene, load_rgbd_frame, load_scene, look_at, render_frame, save_scene, to_camera

log = logging.getLogger("moransac")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PIPELINE = 3


@dataclass
class RunConfig:
    """Every tunable of a run. Loaded from ``key = value`` text, then flags."""

    seed: int = 0
    # subplane generation
    k: int = 64
    n_splits: int = 3
    subplane_threshold: float = 0.005
    subplane_iterations: int = 200
    subplane_min_inliers: int = 3
    # merge
    beta: float = 0.2
    gamma: float = 0.9
    delta: float = 0.005
    U: int = 5
    # sequential baseline (min_inliers 0 means max(50, 0.5% of N))
    baseline_threshold: float = 0.005
    baseline_iterations: int = 200
    baseline_min_inliers: int = 0
    baseline_max_planes: int = 20
    # training
    epochs: int = 10
    learning_rate: float = 1e-5
    weight_decay: float = 1e-5
    k_min: int = 8
    k_max: int = 196
    alpha: float = 3.0
    points_per_cloud: int = 32768
    loss_norm: str = "l1"
    hidden: str = "64,128"
    head_act: str = "tanh"
    # evaluation and input
    voxels: str = "0.005"
    sc_direction: str = "gt_by_pred"
    normal_k: int = 30
    # grasp
    up: str = "0,0,1"
    floor_cone_deg: float = 30.0
    # synthesis
    n_scenes: int = 10
    n_objects: int = 5
    points_per_face: int = 300
    floor_points: int = 3000
    noise_sigma: float = 0.001
    outlier_fraction: float = 0.0
    image_width: int = 320
    image_height: int = 240
    focal: float = 300.0

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        kv = io.read_kv(path)
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in kv.items():
            if key not in known:
                raise InputError(f"{path}: unknown config key {key!r}")
            values[key] = _coerce(known[key], raw)
        return cls(**values)

    def override(self, **values) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in values.items() if v is not None})

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        # constructing the owning parameter objects runs their checks
        self.merge_params()
        self.subplane_params()
        self.train_config()
        self.voxel_sizes()
        self.up_vector()
        self.hidden_sizes()
        if self.k < 1 or self.n_splits < 1:
            raise InputError("k and n_splits must be positive")
        if self.baseline_min_inliers < 0 or self.baseline_max_planes < 1:
            raise InputError("baseline_min_inliers >= 0 and baseline_max_planes >= 1 required")
        if self.baseline_threshold <= 0 or self.baseline_iterations < 1:
            raise InputError("baseline threshold and iterations must be positive")
        if self.normal_k < 3:
            raise InputError("normal_k must be at least 3")
        if not 0 < self.floor_cone_deg < 90:
            raise InputError("floor_cone_deg must lie in (0, 90)")
        if self.sc_direction not in ("gt_by_pred", "pred_by_gt"):
            raise InputError("sc_direction must be gt_by_pred or pred_by_gt")
        if self.head_act not in ("relu", "leaky_relu", "tanh", "identity"):
            raise InputError(f"unknown head_act {self.head_act!r}")
        if self.seed < 0:
            raise InputError("seed must be non-negative")
        if min(self.image_width, self.image_height) < 1 or self.focal <= 0:
            raise InputError("image size and focal must be positive")

    def merge_params(self) -> MergeParams:
        return MergeParams(self.beta, self.gamma, self.delta, self.U)

    def subplane_params(self) -> RansacParams:
        return RansacParams(self.subplane_threshold, self.subplane_iterations, self.subplane_min_inliers, self.seed)

    def baseline_params(self, n: int) -> RansacParams:
        mi = self.baseline_min_inliers or RansacParams.default_min_inliers(n)
        return RansacParams(self.baseline_threshold, self.baseline_iterations, mi, self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            k_range=(self.k_min, self.k_max), alpha=self.alpha, points_per_cloud=self.points_per_cloud,
            seed=self.seed, norm=self.loss_norm, normal_k=self.normal_k,
        )

    def voxel_sizes(self) -> list:
        vals = _floats(self.voxels, "voxels")
        if not vals or min(vals) <= 0:
            raise InputError("voxel sizes must be positive")
        return vals

    def up_vector(self) -> np.ndarray:
        v = np.array(_floats(self.up, "up"))
        if v.shape != (3,) or np.linalg.norm(v) == 0:
            raise InputError("up must be a non-zero 3-vector")
        return v / np.linalg.norm(v)

    def hidden_sizes(self) -> tuple:
        try:
            h = tuple(int(t) for t in self.hidden.split(",") if t.strip())
        except ValueError:
            raise InputError(f"bad hidden sizes {self.hidden!r}") from None
        if not h or min(h) < 1:
            raise InputError("hidden sizes must be positive")
        return h

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(n_objects=self.n_objects, points_per_face=self.points_per_face,
                         floor_points=self.floor_points, noise_sigma=self.noise_sigma,
                         outlier_fraction=self.outlier_fraction, seed=seed)


def _floats(text: str, what: str) -> list:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise InputError(f"bad {what} list {text!r}") from None


def _coerce(f: dataclasses.Field, raw: str):
    kind = type(f.default)
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise InputError(f"config key {f.name}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


# ----------------------------------------------------------------- inputs


@dataclass
class LoadedInput:
    cloud: PointCloud
    gt: Optional[np.ndarray] = None
    pixels: Optional[tuple] = None
    shape: Optional[tuple] = None


def _is_frame_dir(p: Path) -> bool:
    return (p / "depth.png").exists() and (p / "intrinsics.txt").exists()


def load_input(path, normal_k: int = 30) -> LoadedInput:
    """A .ply file, a scene directory (cloud.ply) or a frame directory
    (depth.png, intrinsics.txt, optional rgb.png and gt_labels.png)."""
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: no such file or directory")
    if p.is_dir() and (p / "cloud.ply").exists():
        cloud, gt, _ = load_scene(p)
        out = LoadedInput(cloud, gt)
    elif p.is_dir() and _is_frame_dir(p):
        rgb = p / "rgb.png"
        gtp = p / "gt_labels.png"
        cloud, gt, pixels, shape = load_rgbd_frame(
            p / "depth.png", rgb if rgb.exists() else None, p / "intrinsics.txt",
            gtp if gtp.exists() else None, normal_k, return_pixels=True)
        out = LoadedInput(cloud, gt, pixels, shape)
    elif p.is_file():
        out = LoadedInput(io.read_ply(p))
    else:
        raise InputError(f"{p}: neither a PLY file, a scene directory nor a frame directory")
    if len(out.cloud) == 0:
        raise EmptyCloudError(f"{p}: cloud has no points")
    if out.cloud.normals is None:
        out.cloud = estimate_normals(out.cloud, min(normal_k, len(out.cloud)))
    return out


def dataset_dirs(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"{root}: not a directory")
    subs = sorted(d for d in root.iterdir() if d.is_dir() and ((d / "cloud.ply").exists() or _is_frame_dir(d)))
    if not subs and ((root / "cloud.ply").exists() or _is_frame_dir(root)):
        subs = [root]
    return subs


# ---------------------------------------------------------------- outputs


def label_colors(labels) -> np.ndarray:
    """Stable per-label colors (golden-ratio hue walk); unassigned is grey."""
    labels = np.asarray(labels, dtype=np.int64)
    hue = (np.maximum(labels, 0) * 0.618033988749895) % 1.0
    h6 = hue * 6
    x = 1 - np.abs(h6 % 2 - 1)
    sector = h6.astype(int) % 6
    table = np.array([[1, 0, 2], [0, 1, 2], [2, 1, 0], [2, 0, 1], [0, 2, 1], [1, 2, 0]])
    vals = np.stack([np.ones_like(x), x, np.zeros_like(x)], axis=1)
    rgb = np.take_along_axis(vals, table[sector], axis=1)
    rgb = 0.15 + 0.85 * rgb
    rgb[labels < 0] = 0.5
    return np.round(rgb * 255).astype(np.uint8)


def export_segmentation(out_dir, inp: LoadedInput, labels, stem: str = "labels") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_labels(out / f"{stem}.txt", labels)
    io.write_ply(out / f"{stem}.ply", inp.cloud, colors_u8=label_colors(labels))
    if inp.pixels is not None:
        rows, cols = inp.pixels
        img = np.full(inp.shape, -1, dtype=np.int64)
        img[rows, cols] = labels
        io.write_label_image(out / f"{stem}_image.png", img)
        vis = np.zeros((*inp.shape, 3), dtype=np.uint8)
        vis[rows, cols] = label_colors(labels)
        io.write_rgb_image(out / f"{stem}_overlay.png", vis)


def _summary(labels) -> str:
    k = len(np.unique(labels[labels >= 0]))
    return f"{k} clusters, {int(np.sum(labels < 0))} unassigned of {len(labels)} points"


# --------------------------------------------------------------- commands


def cmd_segment(args, cfg: RunConfig) -> int:
    if args.no_net:
        net = None
    elif args.model is None:
        raise InputError("segment needs --model or --no-net")
    else:
        net = load_net(args.model)
    inp = load_input(args.input, cfg.normal_k)
    res = segment(net, inp.cloud, cfg.k, cfg.seed, cfg.subplane_params(), cfg.merge_params(), cfg.n_splits)
    out = Path(args.out)
    export_segmentation(out, inp, res.labels)
    if args.trace:
        res.stats.write_trace(out / "merge_trace.csv")
    print(_summary(res.labels))
    return EXIT_OK


def cmd_baseline(args, cfg: RunConfig) -> int:
    inp = load_input(args.input, cfg.normal_k)
    labels = sequential_multiplane(inp.cloud, cfg.baseline_params(len(inp.cloud)), cfg.baseline_max_planes)
    export_segmentation(args.out, inp, labels)
    print(_summary(labels))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    dirs = dataset_dirs(args.dataset)
    if not dirs:
        raise InputError(f"{args.dataset}: empty dataset")
    clouds = [load_input(d, cfg.normal_k).cloud for d in dirs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = Path(args.model) if args.model else out / "model.morn"
    resume = args.resume and model_path.exists()
    if resume:
        net = load_net(model_path)
    else:
        net = VotingNet.create(cfg.hidden_sizes(), seed=cfg.seed, head_act=cfg.head_act)
    trained, rows = train(net, clouds, cfg.train_config())
    save_net(trained, model_path)
    loss_path = out / "loss.csv"
    write_loss_csv(loss_path, rows, append=resume and loss_path.exists())
    print(f"trained {len(rows)} steps on {len(clouds)} clouds; epochs now {trained.epochs_trained}; model {model_path}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    inp = load_input(args.input, cfg.normal_k)
    pred = io.read_labels(args.pred)
    if args.gt is not None:
        gt = io.read_labels(args.gt)
    elif inp.gt is not None:
        gt = inp.gt
    else:
        raise InputError("no ground truth: pass --gt or use a scene/frame with gt labels")
    n = len(inp.cloud)
    if len(pred) != n or len(gt) != n:
        raise InputError(f"label lengths (pred {len(pred)}, gt {len(gt)}) do not match {n} points")
    reports = evaluate_sweep(inp.cloud, gt, pred, cfg.voxel_sizes(), cfg.sc_direction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    print(reports_to_table(reports))
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    intr = CameraIntrinsics(cfg.focal, cfg.focal, cfg.image_width / 2, cfg.image_height / 2)
    for i in range(cfg.n_scenes):
        spec = cfg.scene_spec(cfg.seed + i)
        cloud, labels, planes = gen_scene(spec)
        d = out / f"scene_{i:03d}"
        save_scene(d, cloud, labels, planes, spec)
        if args.frames:
            R, t = look_at(spec.camera)
            depth, rgb, lab = render_frame(to_camera(cloud, R, t), intr, cfg.image_width, cfg.image_height, labels)
            f = out / f"frame_{i:03d}"
            f.mkdir(exist_ok=True)
            io.write_depth_image(f / "depth.png", depth)
            io.write_rgb_image(f / "rgb.png", rgb)
            io.write_label_image(f / "gt_labels.png", lab)
            io.write_intrinsics(f / "intrinsics.txt", intr)
    print(f"wrote {cfg.n_scenes} scenes to {out}")
    return EXIT_OK


def cmd_grasp(args, cfg: RunConfig) -> int:
    inp = load_input(args.input, cfg.normal_k)
    labels = io.read_labels(args.labels)
    if len(labels) != len(inp.cloud):
        raise InputError(f"{len(labels)} labels for {len(inp.cloud)} points")
    choice = grasp_point(inp.cloud, clusters_from_labels(inp.cloud, labels), cfg.up_vector(), cfg.floor_cone_deg)
    line = (f"{choice.point[0]:.6f} {choice.point[1]:.6f} {choice.point[2]:.6f} "
            f"cluster={choice.cluster_id} floor={choice.floor_id} height={choice.height:.6f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "grasp.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--voxel", help="comma-separated voxel sizes in metres")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="moransac", description="Plane instance segmentation of cluttered point clouds.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("segment", parents=[common], help="voting network + per-cluster RANSAC + merge")
    s.add_argument("input", help="PLY file, scene directory or frame directory")
    s.add_argument("--model", help="trained network file")
    s.add_argument("--no-net", action="store_true", help="skip voting (FPS + merge ablation)")
    s.add_argument("--trace", action="store_true", help="write merge_trace.csv")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("baseline", parents=[common], help="sequential multi-plane RANSAC")
    s.add_argument("input")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("train", parents=[common], help="train the voting network")
    s.add_argument("dataset", help="directory of scene or frame directories")
    s.add_argument("--model", help="model file to write (default OUT/model.morn)")
    s.add_argument("--resume", action="store_true", help="continue from an existing --model")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="VOI / RI / SC per voxel size")
    s.add_argument("input", help="cloud the labels refer to")
    s.add_argument("--pred", required=True, help="predicted labels file")
    s.add_argument("--gt", help="ground-truth labels file (default: from the scene)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic clutter scenes")
    s.add_argument("--frames", action="store_true", help="also render RGB-D frames")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("grasp", parents=[common], help="suction point on the highest cluster")
    s.add_argument("input")
    s.add_argument("--labels", required=True)
    s.set_defaults(func=cmd_grasp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg = cfg.override(seed=args.seed, voxels=args.voxel)
        return args.func(args, cfg)
    except (InputError, FileNotFoundError, IsADirectoryError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except MoRansacError as e:
        print(f"pipeline failure: {e}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
