import pytest
import torch

from latent_unlearn.nets import (ArchConfig, EmbedderNet, PerceptualNet, build_generator)
from latent_unlearn.synthdata import build_corpus

# Small tensors thread poorly, and fixed thread count keeps runs bitwise
# reproducible across test sessions on one machine.
torch.set_num_threads(1)


TINY_ARCH = ArchConfig(
    d_z=16, d_w=16, feat_channels=8, feat_size=4, image_size=16,
    render_channels=(8, 8), encoder_channels=(8, 8, 16, 16),
    embed_channels=(8, 8, 16), embed_dim=8, percep_channels=(8, 8, 8),
)


@pytest.fixture(scope="session")
def tiny_arch():
    return TINY_ARCH


@pytest.fixture(scope="session")
def tiny_corpus():
    return build_corpus(12, 3, 3, images_per_identity=6, seed=11)


@pytest.fixture()
def tiny_bundle(tiny_arch):
    return build_generator(tiny_arch, seed=101)


@pytest.fixture()
def tiny_embedder(tiny_arch):
    return EmbedderNet(tiny_arch, torch.Generator().manual_seed(202))


@pytest.fixture()
def tiny_percep(tiny_arch):
    return PerceptualNet(tiny_arch)
