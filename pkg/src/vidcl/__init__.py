"""Self-supervised video representation learning with shuffled and visual
contrastive objectives over a shared multiscale video transformer."""

__version__ = "0.1.0"

from .core import Config, Rng, VideoTensor, validate_config  # noqa: F401
