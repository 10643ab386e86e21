from __future__ import annotations

import numpy as np
import pytest

from sfouda import stream
from sfouda.geom import Frame


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_target():
    """Eight frames of the shifted synthetic scene (about 1000 points each)."""
    return stream.SyntheticStream(stream.target_config(0, frames=8))


@pytest.fixture(scope="session")
def short_source():
    return stream.SyntheticStream(stream.source_config(0, frames=8))


def random_frame(rng, n=200, frame_id=0, labels=True, scale=5.0) -> Frame:
    pts = rng.uniform(-scale, scale, (n, 3))
    lab = rng.integers(1, 8, n) if labels else None
    return Frame(pts, lab, frame_id)


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


SMALL = dict(source_frames=6, holdout_frames=2, epochs=3, frames=10)


@pytest.fixture(scope="session")
def small_cfg():
    from sfouda.pipeline import RunConfig
    return RunConfig(seed=0, **SMALL)


@pytest.fixture(scope="session")
def small_model(small_cfg):
    """A briefly trained source model; good enough to exercise the loop, not to score."""
    from sfouda.pipeline import pretrain
    return pretrain(small_cfg)[0]


@pytest.fixture(scope="session")
def small_ckpt(small_model, tmp_path_factory):
    from sfouda.segnet import save_checkpoint
    path = tmp_path_factory.mktemp("ckpt") / "source.ckpt"
    save_checkpoint(small_model, path)
    return path


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


BENCHMARK_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def benchmark_models():
    """Source models for the five benchmark seeds, pretrained once per session."""
    import time

    from sfouda import pipeline
    t0 = time.perf_counter()
    models = {s: pipeline.pretrain(pipeline.benchmark_config(s))[0] for s in BENCHMARK_SEEDS}
    return models, time.perf_counter() - t0


@pytest.fixture(scope="session")
def benchmark_caches(benchmark_models):
    from sfouda import pipeline
    models, _ = benchmark_models
    return {s: pipeline.SourceCache(m, pipeline.benchmark_config(s)) for s, m in models.items()}
