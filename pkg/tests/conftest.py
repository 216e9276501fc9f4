import numpy as np
import pytest
from httpx import ASGITransport, AsyncClient

from app.core.curriculum import PAPER_BOUNDS, ladder_for
from app.db.run_store import RunStore, get_run_store
from app.main import app
from app.models.schemas import Box, EnvConfig, EnvMode, KernelParams, SearchConfig, TrainConfig

PAPER_LENGTH_SCALES = [19.9, 26.5, 21.15]


@pytest.fixture
def paper_box():
    return Box(lower=list(PAPER_BOUNDS[0]), upper=list(PAPER_BOUNDS[1]))


@pytest.fixture
def paper_kernel():
    return KernelParams(length_scales=PAPER_LENGTH_SCALES)


@pytest.fixture
def noiseless_kernel():
    return KernelParams(length_scales=PAPER_LENGTH_SCALES, noise_variance=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def search_config(paper_box, paper_kernel):
    """Full-length search configuration; objectives in tests never train"""
    return SearchConfig(bounds=paper_box, kernel=paper_kernel, ladder=ladder_for(EnvMode.KP))


@pytest.fixture
def tiny_env():
    return EnvConfig(base_tiles=50, max_steps=60)


@pytest.fixture
def tiny_train():
    return TrainConfig(
        learning_rate=0.001,
        update_epochs=2,
        batch_size=64,
        minibatch_size=32,
        total_epochs=4,
        hidden_width=8,
        eval_every=2,
        eval_n=2,
    )


@pytest.fixture
def tiny_model(tiny_env):
    from app.core.ppo import build_model
    from app.core.race_env import observation_size

    return build_model(observation_size(tiny_env.lookahead), TrainConfig(hidden_width=8), seed=3)


@pytest.fixture
def output_root(tmp_path):
    root = tmp_path / "runs"
    root.mkdir()
    return root


@pytest.fixture
async def client(output_root):
    """Create test client over a temporary output root"""
    app.dependency_overrides[get_run_store] = lambda: RunStore(output_root)
    async with AsyncClient(transport=ASGITransport(app=app), base_url="http://test") as ac:
        yield ac
    app.dependency_overrides.clear()
