import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moransac.dpc import TrainConfig, VotingNet, load_net, save_net, train  # noqa: E402
from moransac.dpc.train import prepare_cloud  # noqa: E402
from moransac.synth import SceneSpec, gen_scene  # noqa: E402

from acceptance_log import ACCEPTANCE_LINES  # noqa: E402

# toy training recipe shared by the training and end-to-end checks
TOY_SCENES = range(100, 120)
HELD_OUT_SCENE = 999
TOY_POINTS = 2048
TOY_CONFIG = dict(epochs=10, learning_rate=0.05, weight_decay=1e-5, points_per_cloud=TOY_POINTS)
TOY_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def toy_dataset():
    return [gen_scene(SceneSpec(seed=s))[0] for s in TOY_SCENES]


@pytest.fixture(scope="session")
def toy_prepared(toy_dataset):
    return [prepare_cloud(c, TOY_POINTS) for c in toy_dataset]


@pytest.fixture(scope="session")
def held_out_cloud():
    return prepare_cloud(gen_scene(SceneSpec(seed=HELD_OUT_SCENE))[0], TOY_POINTS)


@pytest.fixture(scope="session")
def toy_runs(toy_dataset, tmp_path_factory):
    """seed -> ToyRun (untrained net, trained net as reloaded from disk, loss rows, seconds)."""
    out = {}
    d = tmp_path_factory.mktemp("models")
    for seed in TOY_SEEDS:
        t0 = time.perf_counter()
        net = VotingNet.create(seed=seed)
        trained, rows = train(net, toy_dataset, TrainConfig(seed=seed, **TOY_CONFIG))
        path = d / f"toy_{seed}.morn"
        save_net(trained, path)
        out[seed] = ToyRun(net, load_net(path), rows, path, time.perf_counter() - t0)
    return out


@dataclass
class ToyRun:
    untrained: VotingNet
    trained: VotingNet
    rows: list
    path: Path
    seconds: float


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
