"""Continual-learning engine built on conditional coupling flows over
exchangeable Gaussian latents.

Subpackage map:

- ``autodiff`` / ``optim``: dense float64 tensors, a reverse-mode gradient
  tape and an adaptive-moment optimizer.
- ``flow``: the conditional bijection (coupling layers + task/label
  embeddings).
- ``latent``: per-task exchangeable Gaussian law with O(1) predictive
  updates from sufficient statistics.
- ``model``: task registry and sequence negative log-likelihood.
- ``continual``: snapshot / generative-replay incremental updates.
- ``inference``: label, task-identity and outlier inference.
- ``data`` / ``persist`` / ``cli``: ingestion, binary model files, and the
  operator command line.
"""

from exflow.autodiff import Tape, Tensor, Parameter, backward
from exflow.optim import Adam
from exflow.model import ContinualFlowModel
from exflow.persist import save_model, load_model

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "Parameter",
    "backward",
    "Adam",
    "ContinualFlowModel",
    "save_model",
    "load_model",
    "__version__",
]
