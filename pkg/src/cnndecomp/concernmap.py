"""Per-layer deactivation maps and position bookkeeping shared across stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .graph import LayerKind, ModelGraph, infer_shapes

#: Layer kinds whose flat output positions may appear in ``conv_inactive``.
MASKABLE_KINDS = (LayerKind.CONV2D, LayerKind.MAXPOOL, LayerKind.AVGPOOL, LayerKind.FLATTEN)


@dataclass
class ConcernMap:
    """Deactivated positions per layer.

    ``conv_inactive`` holds flat row-major output positions of conv, pooling
    and flatten layers; ``dense_inactive`` holds node indices of hidden dense
    layers.  ``input_positions`` records positions backtracked all the way to
    the model input; they are kept for inspection but never masked.
    """
    conv_inactive: dict[int, set[int]] = field(default_factory=dict)
    dense_inactive: dict[int, set[int]] = field(default_factory=dict)
    input_positions: set[int] = field(default_factory=set)
    observed_count: int = 0

    def copy(self) -> "ConcernMap":
        return ConcernMap(
            conv_inactive={k: set(v) for k, v in self.conv_inactive.items()},
            dense_inactive={k: set(v) for k, v in self.dense_inactive.items()},
            input_positions=set(self.input_positions),
            observed_count=self.observed_count,
        )

    def is_empty(self) -> bool:
        return (not any(self.conv_inactive.values())
                and not any(self.dense_inactive.values()))

    def masked_count(self) -> int:
        return (sum(len(v) for v in self.conv_inactive.values())
                + sum(len(v) for v in self.dense_inactive.values()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConcernMap):
            return NotImplemented
        return (_nonempty(self.conv_inactive) == _nonempty(other.conv_inactive)
                and _nonempty(self.dense_inactive) == _nonempty(other.dense_inactive)
                and self.input_positions == other.input_positions)

    def dense_masks(self, model: ModelGraph) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Boolean (weight_mask, bias_mask) per dense layer; True = removed.

        An inactive node loses its incoming column and bias, plus its outgoing
        row in the following dense layer.  Flatten positions removed below the
        first dense layer mask that layer's corresponding rows.
        """
        masks: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for d in model.dense_indices():
            layer = model.layers[d]
            wmask = np.zeros(layer.weights.shape, dtype=bool)
            bmask = np.zeros(layer.bias.shape, dtype=bool)
            for node in self.dense_inactive.get(d, ()):
                wmask[:, node] = True
                bmask[node] = True
            feeder = transparent_source(model, layer.inputs[0])
            if feeder >= 0 and model.layers[feeder].kind is LayerKind.DENSE:
                for node in self.dense_inactive.get(feeder, ()):
                    wmask[node, :] = True
            elif feeder >= 0 and model.layers[feeder].kind is LayerKind.FLATTEN:
                for pos in self.conv_inactive.get(feeder, ()):
                    wmask[pos, :] = True
            masks[d] = (wmask, bmask)
        return masks


def _nonempty(d: dict[int, set[int]]) -> dict[int, set[int]]:
    return {k: v for k, v in d.items() if v}


def transparent_source(model: ModelGraph, ref: int) -> int:
    """Walk back through ReLU layers to the layer that produced the values."""
    while ref >= 0 and model.layers[ref].kind is LayerKind.RELU:
        ref = model.layers[ref].inputs[0]
    return ref


def validate_map(model: ModelGraph, cmap: ConcernMap) -> None:
    shapes = infer_shapes(model)
    final = model.final_dense_index()
    for idx, positions in cmap.conv_inactive.items():
        if not 0 <= idx < len(model.layers) or model.layers[idx].kind not in MASKABLE_KINDS:
            raise ValidationError(f"map references non-maskable layer {idx}")
        size = int(np.prod(shapes[idx]))
        if positions and max(positions) >= size:
            raise ValidationError(f"map position {max(positions)} >= layer {idx} size {size}")
        if positions and min(positions) < 0:
            raise ValidationError(f"negative map position at layer {idx}")
    for idx, nodes in cmap.dense_inactive.items():
        if (not 0 <= idx < len(model.layers)
                or model.layers[idx].kind is not LayerKind.DENSE or idx == final):
            raise ValidationError(f"map references non-hidden-dense layer {idx}")
        size = shapes[idx][0]
        if nodes and max(nodes) >= size:
            raise ValidationError(f"dense node {max(nodes)} >= layer {idx} size {size}")


def expand_pool_positions(positions: set[int], out_shape: tuple[int, int, int],
                          in_shape: tuple[int, int, int], pool: int) -> set[int]:
    """Map flat pool-output positions to the pool*pool block of input positions."""
    oh, ow, c = out_shape
    ih, iw, ic = in_shape
    expanded: set[int] = set()
    for pos in positions:
        r, rem = divmod(pos, ow * c)
        col, k = divmod(rem, c)
        for dr in range(pool):
            for dc in range(pool):
                expanded.add(((r * pool + dr) * iw + (col * pool + dc)) * ic + k)
    return expanded


def propagate_positions(model: ModelGraph, cmap: ConcernMap, ref: int,
                        positions: set[int],
                        shapes: list[tuple[int, ...]] | None = None) -> None:
    """Push deactivated positions into the producing layer's inactive set.

    ReLU and flatten are transparent (identical position spaces); pooling
    expands each position to its pool-size^2 sources; Add forwards to both
    merged branches; the model input records positions without masking.
    """
    if not positions:
        return
    if shapes is None:
        shapes = infer_shapes(model)
    if ref == -1:
        cmap.input_positions |= positions
        return
    layer = model.layers[ref]
    kind = layer.kind
    if kind is LayerKind.CONV2D:
        cmap.conv_inactive.setdefault(ref, set()).update(positions)
    elif kind in (LayerKind.RELU, LayerKind.FLATTEN):
        propagate_positions(model, cmap, layer.inputs[0], positions, shapes)
    elif kind is LayerKind.ADD:
        propagate_positions(model, cmap, layer.inputs[0], set(positions), shapes)
        propagate_positions(model, cmap, layer.inputs[1], set(positions), shapes)
    elif kind in (LayerKind.MAXPOOL, LayerKind.AVGPOOL):
        src = layer.inputs[0]
        in_shape = model.input_shape if src == -1 else shapes[src]
        expanded = expand_pool_positions(positions, shapes[ref], in_shape, layer.pool)
        propagate_positions(model, cmap, src, expanded, shapes)
    else:
        raise ValidationError(f"cannot propagate positions into {kind.value} layer {ref}")
