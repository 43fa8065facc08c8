import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from tissue_manifold.dataset import make_synthetic_cohort


@pytest.fixture(scope="session")
def synth_cohort(tmp_path_factory):
    return make_synthetic_cohort(tmp_path_factory.mktemp("synth"), n_patients=20,
                                 patches_per_patient=10, resolution=28, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_checkpoints(tmp_path_factory):
    """Two untrained toy-profile checkpoints from different runs: (path_a, path_b)."""
    from tissue_manifold.checkpoint import gan_tensors, save_checkpoint
    from tissue_manifold.networks import GAN, TOY_PROFILE

    root = tmp_path_factory.mktemp("ckpt")
    paths = []
    for seed, run in ((0, "run-a"), (1, "run-b")):
        gan = GAN.build(TOY_PROFILE, seed=seed)
        paths.append(save_checkpoint(root / f"{run}.ckpt", gan_tensors(gan), step=0,
                                     profile=TOY_PROFILE, run_id=run))
    return tuple(paths)


@pytest.fixture(scope="session")
def toy_run(synth_cohort, tmp_path_factory):
    """One 2000-step toy-profile run with a checkpoint at step 1000, shared by the slow tests."""
    from tissue_manifold.training import preset_config, run_training

    config = preset_config("toy", total_steps=2000, checkpoint_every=1000, seed=0)
    out = tmp_path_factory.mktemp("toy_run")
    start = time.perf_counter()
    final = run_training(config, synth_cohort.manifest, out)
    return SimpleNamespace(config=config, out=out, final=final, metrics=out / "metrics.csv",
                           seconds=time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
