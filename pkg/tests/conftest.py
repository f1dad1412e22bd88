from datetime import date

import numpy as np
import pytest

from volpricer.market_data import VolSurface
from volpricer.synthetic import make_dataset
from volpricer.tensor_nn import CosineSchedule
from volpricer.vae import VaeModel, train_vae

DESK_SEED = 42
VAE_SEED = 7
DESK_EPOCHS = 300


def make_flat_surface(vol: float, quote_date: date = date(2020, 3, 2)) -> VolSurface:
    return VolSurface(quote_date=quote_date, vols=np.full((41, 20), vol))


@pytest.fixture
def flat_surface():
    return make_flat_surface(0.2)


@pytest.fixture(scope="session")
def small_dataset():
    """20 synthetic surfaces with an 80/20 split; cheap shared input."""
    return make_dataset(20, seed=3)


@pytest.fixture(scope="session")
def desk_dataset():
    """The desk-scale 200-surface dataset used by the acceptance run."""
    return make_dataset(200, seed=DESK_SEED)


@pytest.fixture(scope="session")
def desk_vae(desk_dataset, tmp_path_factory):
    """Stage-1 result at desk scale: (model path, training log).

    Trained once per session (several minutes); tests needing a mutable
    model must load a fresh copy from the returned path.
    """
    model = VaeModel(seed=VAE_SEED)
    schedule = CosineSchedule(1e-3, 1e-6, DESK_EPOCHS)
    log = train_vae(model, desk_dataset, DESK_EPOCHS, schedule, seed=VAE_SEED)
    path = tmp_path_factory.mktemp("models") / "vae.bin"
    model.save(path)
    return path, log
