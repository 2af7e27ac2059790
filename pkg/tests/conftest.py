import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    derandomize=True,
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_model_config():
    """A 64x64-image, low-dim config that keeps model tests fast."""
    from crossmesh.config import BlockConfig, ModelConfig

    return ModelConfig(
        d_model=16, head_count=2,
        block=BlockConfig(n_front=0, n_cross=1, n_back=0, n_blocks=1),
        image_h=64, image_w=64,
        coarse_vertices=12, full_vertices=48,
        gcn_depth=2, gcn_width=8,
        backbone_channels=(4, 6, 8, 10, 12),
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_model_config):
    from crossmesh.model import TwoBranchModel

    return TwoBranchModel(tiny_model_config)


@pytest.fixture(scope="session")
def tiny_world(tiny_model):
    from crossmesh.trainer import build_world

    return build_world(tiny_model, body_scale=18.0)


@pytest.fixture(scope="session")
def tiny_samples(tiny_world):
    from crossmesh.config import DataSpec
    from crossmesh.synth import make_dataset

    spec = DataSpec(counts={"image_3d": 2, "mocap": 2, "image_2d_only": 1, "image_pseudo3d": 1},
                    seed=5, body_scale=18.0)
    return make_dataset(spec, tiny_world)
