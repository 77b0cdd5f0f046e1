"""Desk-scale generative identity unlearning on a synthetic blob corpus."""

__version__ = "0.1.0"

from .nets import ArchConfig, GeneratorBundle
from .synthdata import Corpus, IdentitySpec, VariationParams, build_corpus
from .unlearn import UnlearnConfig, run_unlearning

__all__ = [
    "__version__",
    "ArchConfig",
    "GeneratorBundle",
    "Corpus",
    "IdentitySpec",
    "VariationParams",
    "build_corpus",
    "UnlearnConfig",
    "run_unlearning",
]
