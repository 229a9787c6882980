import numpy as np
import pytest
import torch

from vprdistill.dataset import PlaceRecord, Pose, SynthConfig, load_synth, synth_generate
from vprdistill.inputs import VPRData

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """A few places at 32x32, shared by tests that need real files."""
    cfg = SynthConfig(n_places=10, image_size=(32, 32), subsets={"train": 0.6, "val": 0.2, "test": 0.2}, seed=3)
    root = tmp_path_factory.mktemp("synth") / "data"
    synth_generate(cfg, root)
    records, meta = load_synth(root)
    return root, records, meta


@pytest.fixture(scope="session")
def tiny_data(tiny_synth):
    _, records, _ = tiny_synth
    return {k: VPRData(v, (32, 32)) for k, v in records.items()}


def line_records(n_db: int, n_q: int, spacing: float = 100.0, with_pose: bool = True) -> list[PlaceRecord]:
    """Database and query records on a line; query i sits on database place i."""
    recs = []
    for i in range(n_db):
        pose = Pose(i * spacing, 0.0, 0.0) if with_pose else None
        recs.append(PlaceRecord(f"db{i:03d}", f"db{i}.png", None, pose, "database", i))
    for i in range(n_q):
        pose = Pose(i * spacing + 1.0, 0.0, 5.0) if with_pose else None
        recs.append(PlaceRecord(f"q{i:03d}", f"q{i}.png", None, pose, "query", i))
    return recs


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
