import pytest

from invpt import tensor as tn
from invpt.encoder import EncoderConfig
from invpt.model import ModelConfig


def small_config(**changes) -> ModelConfig:
    """32x32 images, 4x4 token grid: the full architecture at test speed."""
    base = dict(
        image_size=(32, 32),
        encoder=EncoderConfig(patch_size=8, embed_dim=32, depth=3, tap_layers=(1, 2, 3)),
        c0=32,
        cd=32,
    )
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture(autouse=True)
def _fresh_tape():
    tn.reset_tape()
    yield
    tn.reset_tape()
