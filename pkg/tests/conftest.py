import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sssplat.dataset import load_dataset, synthesize_ground_truth  # noqa: E402


@pytest.fixture(scope="session")
def small_gt(tmp_path_factory):
    """A small seed-42 ground-truth dataset shared across tests.

    Returns (scene, params, dataset).
    """
    out = tmp_path_factory.mktemp("gt_small")
    scene, params, manifest = synthesize_ground_truth(
        42, out, n_frames=12, n_views=6, resolution=96, n_gaussians=150)
    return scene, params, load_dataset(manifest)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
