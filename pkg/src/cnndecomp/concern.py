"""Concern Identification and Tangling Identification.

A position is inactive exactly when its pre-activation value was <= 0 for
every observed input; observation order never changes the final map, which is
what lets ``ci_run`` partition the input list across workers.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .concernmap import ConcernMap
from .errors import ShapeError, ValidationError
from .graph import LabeledDataset, LayerKind, ModelGraph
from .inference import forward


@dataclass
class TanglingPlan:
    concerned_class: int
    n_concerned: int
    per_unconcerned_count: int
    samples: dict[int, list[int]] = field(default_factory=dict)  # class -> dataset indices

    @property
    def total_unconcerned(self) -> int:
        return sum(len(v) for v in self.samples.values())


def observable_layers(model: ModelGraph) -> tuple[list[int], list[int]]:
    """(conv layer indices, hidden dense layer indices) monitored during CI."""
    return model.conv_indices(), model.hidden_dense_indices()


def ci_observe(cmap: ConcernMap | None, model: ModelGraph, x: np.ndarray) -> ConcernMap:
    """Fold one concerned input into the map.

    The first input initializes each monitored layer's inactive set to the
    positions with pre-activation <= 0; later inputs only remove positions
    that turned out to be active.
    """
    conv_idxs, dense_idxs = observable_layers(model)
    result = forward(model, x)
    first = cmap is None
    out = ConcernMap() if first else cmap.copy()
    for idxs, table in ((conv_idxs, out.conv_inactive), (dense_idxs, out.dense_inactive)):
        for i in idxs:
            vals = result.trace[i].reshape(-1)
            if first:
                table[i] = set(np.flatnonzero(vals <= 0.0).tolist())
            else:
                table[i] = {p for p in table.get(i, set()) if vals[p] <= 0.0}
    out.observed_count = (0 if first else cmap.observed_count) + 1
    return out


def _chunk_inactive(model: ModelGraph, images: np.ndarray) -> dict[int, np.ndarray]:
    """Per-layer boolean array: position <= 0 on every image in this chunk."""
    conv_idxs, dense_idxs = observable_layers(model)
    acc: dict[int, np.ndarray] = {}
    for x in images:
        result = forward(model, x)
        for i in conv_idxs + dense_idxs:
            inact = result.trace[i].reshape(-1) <= 0.0
            acc[i] = inact if i not in acc else (acc[i] & inact)
    return acc


def _observe_many(cmap: ConcernMap | None, model: ModelGraph, images: np.ndarray,
                  jobs: int = 1) -> ConcernMap:
    if len(images) == 0:
        if cmap is None:
            raise ValidationError("cannot build a map from zero observations")
        return cmap.copy()
    if tuple(images.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"input shape {images.shape[1:]} != model input {model.input_shape}")
    jobs = max(1, min(jobs, len(images)))
    if jobs == 1:
        acc = _chunk_inactive(model, images)
    else:
        chunks = np.array_split(images, jobs)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_chunk_inactive, [model] * len(chunks), chunks))
        acc = parts[0]
        for part in parts[1:]:
            for i in acc:
                acc[i] &= part[i]

    conv_idxs, dense_idxs = observable_layers(model)
    out = ConcernMap() if cmap is None else cmap.copy()
    for idxs, table in ((conv_idxs, out.conv_inactive), (dense_idxs, out.dense_inactive)):
        for i in idxs:
            fresh = set(np.flatnonzero(acc[i]).tolist())
            table[i] = fresh if cmap is None else (table.get(i, set()) & fresh)
    out.observed_count = (0 if cmap is None else cmap.observed_count) + len(images)
    return out


def ci_run(model: ModelGraph, dataset: LabeledDataset, concerned_class: int,
           n_inputs: int, jobs: int = 1) -> ConcernMap:
    """Observe the first ``n_inputs`` concerned training examples in dataset order."""
    if n_inputs <= 0:
        raise ValidationError("ci_run needs at least one input to initialize the map")
    if not 0 <= concerned_class < dataset.class_count:
        raise ValidationError(f"class {concerned_class} out of range")
    indices = dataset.class_indices(concerned_class)
    if len(indices) < n_inputs:
        raise ValidationError(
            f"dataset has {len(indices)} examples of class {concerned_class}, need {n_inputs}"
        )
    return _observe_many(None, model, dataset.images[indices[:n_inputs]], jobs=jobs)


def ti_plan(dataset: LabeledDataset, concerned_class: int, n_concerned: int) -> TanglingPlan:
    """Sample unconcerned inputs at a roughly 1:1 ratio with the concerned ones."""
    k = dataset.class_count
    if k < 2:
        raise ValidationError("tangling needs at least two classes")
    per = max(1, n_concerned // (k - 1))
    plan = TanglingPlan(concerned_class=concerned_class, n_concerned=n_concerned,
                        per_unconcerned_count=per)
    for cls in range(k):
        if cls == concerned_class:
            continue
        idxs = dataset.class_indices(cls)
        if len(idxs) == 0:
            raise ValidationError(f"unconcerned class {cls} has no examples")
        plan.samples[cls] = idxs[:per].tolist()
    return plan


def ti_run(cmap: ConcernMap, model: ModelGraph, dataset: LabeledDataset,
           plan: TanglingPlan, jobs: int = 1) -> ConcernMap:
    """Reinstate positions that are active on any sampled unconcerned input."""
    order = [i for cls in sorted(plan.samples) for i in plan.samples[cls]]
    if any(i >= len(dataset.images) for i in order):
        raise ValidationError("tangling plan references indices past the dataset")
    if not order:
        return cmap.copy()
    return _observe_many(cmap, model, dataset.images[order], jobs=jobs)
