import numpy as np
import pytest

from ctsr import harness
from ctsr.config import load_config
from ctsr.phantom import build_dataset

TINY = {
    "data.train_count": 24,
    "data.test_count": 4,
    "data.size": 64,
    "vae.iterations": 300,
    "vae.crop": 32,
    "pretrain.iterations": 150,
    "pretrain.checkpoint_every": 50,
    "finetune.iterations": 100,
    "finetune.checkpoint_every": 50,
    "ablation.iterations": 4,
    "diffusion.sample_steps": 8,
    "eval.batch_size": 4,
}


def tiny_config(**extra):
    return load_config(None, {**TINY, **extra})


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A small but complete pipeline: data, VAE, base prior, control checkpoint."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    paths = {k: root / k for k in ("data", "vae", "base", "ctl")}
    build_dataset(paths["data"], cfg["data"])
    harness.run_train_vae(paths["data"], cfg, paths["vae"])
    harness.pretrain_base(paths["data"], paths["vae"], cfg, paths["base"])
    harness.finetune_control(paths["data"], paths["vae"], paths["base"], cfg, paths["ctl"])
    return {"cfg": cfg, "root": root, **paths}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
