import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from jepalite.datasets import make_synthetic_dataset
from jepalite.model import ModelConfig
from jepalite.packing import PackerConfig
from jepalite.pipeline import PipelineConfig
from jepalite.training import TrainConfig, run_training


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return make_synthetic_dataset(root, 20, n_shards=3, seed=5)


def smoke_configs(seed: int = 11):
    """The 600-step 32-image overfit configuration used by the acceptance
    smoke and reproducibility checks."""
    pipe = PipelineConfig()
    packer = PackerConfig(batch_rows=8, context_capacity=24, target_capacity=32)
    model = ModelConfig(
        hidden_dim=32, layers=2, heads=2, predictor_dim=16, predictor_layers=2
    )
    train = TrainConfig(batch_rows=8, seed=seed, warmup_steps=100)
    return pipe, packer, model, train


def run_smoke(dataset_root: Path, out_dir: Path, steps: int = 600, postproc: str = "layernorm"):
    index = make_synthetic_dataset(dataset_root, 32, n_shards=4, seed=23)
    pipe, packer, model, train = smoke_configs()
    model.postproc_mode = postproc
    state = run_training(
        index, pipe, packer, model, train, out_dir, max_steps=steps, checkpoint_every=0
    )
    return state, (out_dir / "metrics.csv").read_text()


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    start = time.monotonic()
    state, metrics = run_smoke(base / "data", base / "out")
    elapsed = time.monotonic() - start
    return state, metrics, elapsed
