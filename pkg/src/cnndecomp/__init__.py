"""Decompose a trained CNN classifier into per-class binary modules.

The pipeline observes activations over concerned and sampled unconcerned
inputs (concern + tangling identification), channels the output layer into a
two-node head, backtracks through dense and convolution layers to deactivate
positions that only serve other classes, and recomposes the resulting modules
by voting.
"""

__version__ = "0.1.0"

from .concernmap import ConcernMap
from .compose import ModuleLabel, ModuleSet, compose_predict, continual_update
from .errors import (
    CnnDecompError, FormatError, ShapeError, ValidationError, VersionMismatchError,
)
from .graph import (
    LabeledDataset, LayerKind, LayerSpec, ModelGraph, Split,
    load_dataset, load_model, model_fingerprint, save_dataset, save_model,
)
from .inference import ForwardResult, forward, masked_forward
from .metrics import EvalReport, PowerLog, co2e, evaluate, jaccard, top_k_accuracy
from .modularize import (
    ChanneledHead, Module, build_module, channel_output, load_module, mc_bi,
    mc_bln, save_module, sliding_window_mapping,
)
from .tensors import ConvParams, Padding, PoolMode

__all__ = [name for name in dir() if not name.startswith("_")]
