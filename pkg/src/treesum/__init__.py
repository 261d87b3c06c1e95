"""treesum: unsupervised abstractive opinion summarization with a
tree-structured latent Gaussian mixture."""

__version__ = "0.1.0"

from .config import Config, load_config
from .corpus import (
    Instance,
    Review,
    SyntheticSpec,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    make_instances,
    tokenize,
)
from .topic_model import TopicTree

__all__ = [
    "Config",
    "Instance",
    "Review",
    "SyntheticSpec",
    "TopicTree",
    "Vocabulary",
    "build_vocabulary",
    "generate_synthetic_corpus",
    "load_config",
    "make_instances",
    "tokenize",
    "__version__",
]
