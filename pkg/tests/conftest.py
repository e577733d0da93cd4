"""Shared fixtures. The overfit run is expensive (minutes), so it is
computed once per session and reused by the training and acceptance tests."""

import time

import pytest

from ktda import tensor as T
from ktda.data import Dataset, DatasetSpec, generate_dataset
from ktda.losses import LossToggles, LossWeights
from ktda.model import ModelConfig, Segmenter
from ktda.train import OptimConfig, TrainSettings, evaluate, train_loop


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Full-objective training on an 8-sample 64x64 K=5 dataset, desk-scale
    schedule (2000 iters, warmup 100). Returns run artifacts."""
    root = tmp_path_factory.mktemp("overfit")
    data_dir = root / "data"
    out_dir = root / "run"
    spec = DatasetSpec(num_samples=8, patch=64, classes=5, seed=11)
    generate_dataset(spec, data_dir)
    dataset = Dataset(data_dir)

    t0 = time.time()
    with T.precision("float32"):
        model = Segmenter(ModelConfig(num_classes=5, seed=5))
        optim_cfg = OptimConfig(max_iters=2000, warmup_iters=100)
        settings = TrainSettings(batch_size=4, seed=5, eval_every=500, checkpoint_every=1000)
        state, history = train_loop(
            model,
            dataset,
            LossWeights(),
            LossToggles(),
            optim_cfg,
            settings,
            out_dir,
            quiet=True,
        )
        train_cm = evaluate(model, dataset, dataset.ids("train"), batch_size=4)
    wall = time.time() - t0
    return {
        "state": state,
        "history": history,
        "out_dir": out_dir,
        "data_dir": data_dir,
        "train_cm": train_cm,
        "model": model,
        "dataset": dataset,
        "optim_cfg": optim_cfg,
        "wall_seconds": wall,
    }
