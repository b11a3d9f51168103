"""Runge-Kutta residual blocks for Transformer stacks, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .blocks import ALL_SCHEMES, Scheme  # noqa: E402
from .config import ExperimentConfig, load_config, make_corpus  # noqa: E402
from .model import Model, ModelConfig, build_model  # noqa: E402
from .optim import OptimConfig  # noqa: E402

__all__ = ["ALL_SCHEMES", "ExperimentConfig", "Model", "ModelConfig", "OptimConfig", "Scheme",
           "__version__", "build_model", "load_config", "make_corpus"]
