import numpy as np
import pytest

from ropetrack import synth


@pytest.fixture(scope="session")
def small_scene():
    """Desk-scale scene at reduced resolution: cheap to render, same
    geometry conventions as the full preset."""
    return synth.preset_scene(width=160, height=120)


def make_framesets(scene, states, noise_std=0.0, seed=0):
    return synth.render_dataset(
        states, scene.cameras, scene.chain0, scene.splat_config,
        noise_std=noise_std, seed=seed,
    )
