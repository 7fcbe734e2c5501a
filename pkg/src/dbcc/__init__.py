"""Illuminant estimation with a semantic branch, a colour branch and
cross-branch regularized blocks, on a small numpy autodiff core.

The training entry points live in :mod:`dbcc.train` (``train``,
``evaluate``); they are not re-exported here because the function name
would shadow the submodule.
"""

from .network import Model, ModelConfig, build, count_flops, count_params, load, save
from .train import TrainConfig

__all__ = ["Model", "ModelConfig", "TrainConfig", "build", "count_flops", "count_params", "load", "save"]
__version__ = "0.1.0"
