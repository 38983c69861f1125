import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from anomaly_nav.dataset import SyntheticSceneConfig, synth_generate

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sortie():
    """Six default frames: enough labelled patches for quick training tests."""
    return synth_generate(SyntheticSceneConfig(seed=3), 6)


@pytest.fixture(scope="session")
def small_set(small_sortie):
    return small_sortie.dataset()


# Desk-scale budget for a usable detector: about 5000 sun patches, a short
# autoencoder warm-up, then the flow head on fixed features.
SUN_TRAIN = SyntheticSceneConfig(seed=100, positives_per_frame=50)
SUN_TRAIN_FRAMES = 100
REFERENCE_BUDGET = dict(pretrain_epochs=3, epochs=30, batch=200)
AE_LR, HEAD_LR = 1e-3, 1e-3


@pytest.fixture(scope="session")
def sun_train():
    """About 5000 positive sun patches in all channels."""
    return synth_generate(SUN_TRAIN, SUN_TRAIN_FRAMES).dataset(include_negatives=False)


@pytest.fixture(scope="session")
def reference_detector(sun_train):
    """RGB+G+N flow on fixed features, trained once for the dense and CLI checks."""
    from anomaly_nav.trainer import TrainConfig, pretrain_autoencoder, train

    cfg = TrainConfig(modality="RGB+G+N", regime="fixed-features", lr=HEAD_LR, **REFERENCE_BUDGET)
    pre, _ = pretrain_autoencoder(sun_train, cfg.replace(lr=AE_LR))
    det, _ = train(sun_train, cfg, pre)
    return det
