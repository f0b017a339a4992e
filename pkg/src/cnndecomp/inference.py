"""Forward execution with activation recording and map-driven masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .concernmap import MASKABLE_KINDS, ConcernMap, validate_map
from .errors import ShapeError
from .graph import LayerKind, ModelGraph
from . import tensors


@dataclass
class ForwardResult:
    logits: np.ndarray          # final dense output, pre-softmax
    probs: np.ndarray           # softmax output
    trace: list[np.ndarray]     # one output tensor per layer, in layer order

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.logits))


def forward(model: ModelGraph, x: np.ndarray) -> ForwardResult:
    return _execute(model, x, cmap=None, head=None)


def masked_forward(model: ModelGraph, cmap: ConcernMap, x: np.ndarray,
                   head=None) -> ForwardResult:
    """Forward pass with ConcernMap positions forced to zero.

    Conv/pool/flatten outputs have listed flat positions zeroed before the
    next layer consumes them; dense layers run with masked weight matrices.
    ``head``, when given, replaces the final dense layer with the channeled
    two-output head.
    """
    validate_map(model, cmap)
    return _execute(model, x, cmap=cmap, head=head)


def _execute(model: ModelGraph, x: np.ndarray, cmap, head) -> ForwardResult:
    if tuple(x.shape) != tuple(model.input_shape):
        raise ShapeError(f"input shape {x.shape} != model input {model.input_shape}")
    final_dense = model.final_dense_index()
    dense_masks = cmap.dense_masks(model) if cmap is not None else {}
    outputs: list[np.ndarray] = []

    def fetch(ref: int) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) if ref == -1 else outputs[ref]

    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind is LayerKind.CONV2D:
            out = tensors.conv2d(fetch(layer.inputs[0]), layer.conv)
        elif kind is LayerKind.DENSE:
            if head is not None and i == final_dense:
                out = tensors.dense(fetch(layer.inputs[0]), head.weights, head.bias)
            else:
                weights, bias = layer.weights, layer.bias
                if i in dense_masks and dense_masks[i][0].any():
                    wmask, bmask = dense_masks[i]
                    weights = np.where(wmask, np.float32(0), weights)
                    bias = np.where(bmask, np.float32(0), bias)
                out = tensors.dense(fetch(layer.inputs[0]), weights, bias)
        elif kind is LayerKind.FLATTEN:
            out = tensors.flatten(fetch(layer.inputs[0]))
        elif kind is LayerKind.MAXPOOL:
            out = tensors.pool2d(fetch(layer.inputs[0]), layer.pool, tensors.PoolMode.MAX)
        elif kind is LayerKind.AVGPOOL:
            out = tensors.pool2d(fetch(layer.inputs[0]), layer.pool, tensors.PoolMode.AVG)
        elif kind is LayerKind.ADD:
            out = tensors.add(fetch(layer.inputs[0]), fetch(layer.inputs[1]))
        elif kind is LayerKind.RELU:
            out = tensors.relu(fetch(layer.inputs[0]))
        else:  # SOFTMAX
            out = tensors.softmax(fetch(layer.inputs[0]))

        if cmap is not None and kind in MASKABLE_KINDS:
            positions = cmap.conv_inactive.get(i)
            if positions:
                np.put(out, np.fromiter(positions, dtype=np.intp), 0.0)
        outputs.append(out)

    return ForwardResult(logits=outputs[final_dense], probs=outputs[-1], trace=outputs)
