import numpy as np
import pytest

from headrecon import data, prior, synth


@pytest.fixture(scope="session")
def tiny_scene():
    """One small rendered subject with ground truth, shared by I/O tests."""
    spec = synth.random_headspec(np.random.default_rng(42))
    return data.generate_scene(spec, n_views=4, resolution=40, seed=7, gt_samples=900, gt_mc_res=56)


@pytest.fixture(scope="session")
def tiny_prior(tiny_scene):
    """A deliberately under-trained two-subject prior: cheap, deterministic,
    structurally complete. Quality-sensitive checks live in the acceptance
    suite; this is for plumbing."""
    spec2 = synth.random_headspec(np.random.default_rng(43))
    scene2 = data.generate_scene(spec2, n_views=4, resolution=40, seed=8, gt_samples=900, gt_mc_res=56)
    cfg = prior.PriorConfig(surface_batch=96, volume_batch=96, epochs=10, steps_per_epoch=2)
    return prior.train_prior(
        [prior.PriorScene.from_scene(tiny_scene), prior.PriorScene.from_scene(scene2)],
        cfg,
        seed=0,
    )
