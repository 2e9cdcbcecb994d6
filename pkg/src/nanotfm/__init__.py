"""A small bi-attention tabular foundation model trained in-context on synthetic prior dumps."""
import os as _os

from . import _backend
from .model import ModelConfig, NanoTabPFNModel, TableBatch
from .prior import PriorDumpDataLoader, SyntheticPriorConfig, write_dump
from .train import TrainConfig, train

if _os.environ.get("NANOTFM_THREADS"):
    from .tensor import limit_threads as _limit_threads

    _limit_threads(int(_os.environ["NANOTFM_THREADS"]))

__version__ = "0.1.0"
__all__ = [
    "ModelConfig", "NanoTabPFNModel", "PriorDumpDataLoader", "SyntheticPriorConfig", "TableBatch",
    "TrainConfig", "train", "write_dump",
]


def kernel_backend():
    """Name of the active kernel backend ("compiled" or "python")."""
    return _backend.current()
