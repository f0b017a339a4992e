"""Voting-based composition of modules plus the reuse/replace/remove scenarios."""
from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .errors import ShapeError, ValidationError
from .graph import LabeledDataset, ModelGraph
from .inference import forward, masked_forward
from .modularize import Module
from . import tensors

VOTE_PROB = "prob"
VOTE_LOGIT = "logit"
VOTE_MODES = (VOTE_PROB, VOTE_LOGIT)


@dataclass(frozen=True)
class ModuleLabel:
    provenance: str
    class_id: int

    def __str__(self) -> str:
        return f"{self.provenance}:{self.class_id}"

    @classmethod
    def parse(cls, text: str) -> "ModuleLabel":
        name, _, class_id = text.rpartition(":")
        if not name:
            raise ValidationError(f"label {text!r} must look like dataset:class")
        return cls(name, int(class_id))


@dataclass
class ModuleSet:
    modules: list[Module]

    def __post_init__(self):
        if not self.modules:
            raise ValidationError("a module set needs at least one module")
        shapes = {tuple(m.model.input_shape) for m in self.modules}
        if len(shapes) > 1:
            raise ShapeError(f"modules disagree on input shape: {sorted(shapes)}")
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise ValidationError("duplicate (dataset, class) label in module set")

    @property
    def labels(self) -> list[ModuleLabel]:
        return [ModuleLabel(m.provenance, m.concerned_class) for m in self.modules]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.modules[0].model.input_shape)

    def index_of(self, label: ModuleLabel) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValidationError(f"label {label} not in module set") from None


def module_score(module: Module, x: np.ndarray, mode: str = VOTE_PROB) -> float:
    """Concerned-class score of one module for one input."""
    result = masked_forward(module.model, module.map, x, head=module.head)
    if mode == VOTE_LOGIT:
        return float(result.logits[0])
    return float(tensors.softmax(result.logits)[0])


def compose_predict(mset: ModuleSet, x: np.ndarray,
                    mode: str = VOTE_PROB) -> list[tuple[ModuleLabel, float]]:
    """Rank all module labels by concerned score, ties broken by set order."""
    if mode not in VOTE_MODES:
        raise ValidationError(f"unknown vote mode {mode!r}")
    scores = [module_score(m, x, mode) for m in mset.modules]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    labels = mset.labels
    return [(labels[i], scores[i]) for i in order]


def reuse(sets: list[ModuleSet], selection: list[ModuleLabel]) -> ModuleSet:
    """New set from selected modules of existing sets; no weight modification."""
    by_label: dict[ModuleLabel, Module] = {}
    for mset in sets:
        for label, module in zip(mset.labels, mset.modules):
            by_label.setdefault(label, module)
    missing = [l for l in selection if l not in by_label]
    if missing:
        raise ValidationError(f"modules not found: {', '.join(map(str, missing))}")
    chosen = [by_label[l] for l in selection]
    shapes = {tuple(m.model.input_shape) for m in chosen}
    if len(shapes) > 1:
        raise ShapeError(
            f"cannot reuse modules with different input sizes: {sorted(shapes)}"
        )
    return ModuleSet(modules=chosen)


def replace(mset: ModuleSet, label: ModuleLabel, new_module: Module) -> ModuleSet:
    idx = mset.index_of(label)
    if tuple(new_module.model.input_shape) != mset.input_shape:
        raise ShapeError("replacement module input shape does not match the set")
    modules = list(mset.modules)
    modules[idx] = new_module
    return ModuleSet(modules=modules)


def remove(mset: ModuleSet, label: ModuleLabel) -> ModuleSet:
    idx = mset.index_of(label)
    return ModuleSet(modules=[m for i, m in enumerate(mset.modules) if i != idx])


def continual_update(module: Module, foreign_unconcerned: list[np.ndarray],
                     direction: str = "reinstate") -> Module:
    """Refresh a module with examples from a foreign dataset's class.

    ``reinstate`` (default) feeds the foreign examples through the tangling
    observation rule, so positions active on any of them come back to life.
    ``remove`` instead deactivates the positions that are active on every
    foreign example, cutting the nodes that respond to the foreign class.
    """
    if direction not in ("reinstate", "remove"):
        raise ValidationError(f"unknown continual-learning direction {direction!r}")
    cmap = module.map.copy()
    pipeline = module.pipeline if module.pipeline.endswith("+CL") else module.pipeline + "+CL"
    if not foreign_unconcerned:
        return dc_replace(module, map=cmap, pipeline=module.pipeline)
    for x in foreign_unconcerned:
        if tuple(x.shape) != tuple(module.model.input_shape):
            raise ShapeError(f"foreign input shape {x.shape} != module input "
                             f"{module.model.input_shape}")

    from .concern import observable_layers
    conv_idxs, dense_idxs = observable_layers(module.model)
    always_active: dict[int, np.ndarray] = {}
    ever_active: dict[int, np.ndarray] = {}
    for x in foreign_unconcerned:
        result = forward(module.model, x)
        for i in conv_idxs + dense_idxs:
            act = result.trace[i].reshape(-1) > 0.0
            ever_active[i] = act if i not in ever_active else (ever_active[i] | act)
            always_active[i] = act if i not in always_active else (always_active[i] & act)

    for idxs, table in ((conv_idxs, cmap.conv_inactive), (dense_idxs, cmap.dense_inactive)):
        for i in idxs:
            if direction == "reinstate":
                if i in table:
                    table[i] = {p for p in table[i] if not ever_active[i][p]}
            else:
                dead = set(np.flatnonzero(always_active[i]).tolist())
                table[i] = table.get(i, set()) | dead
    cmap.observed_count += len(foreign_unconcerned)
    return dc_replace(module, map=cmap, pipeline=pipeline)


@dataclass
class VerificationRecord:
    model_prediction: int
    watched: bool
    module_prediction: ModuleLabel | None
    verdict: str  # "not re-verified" | "confirmed" | "flagged"


def verify_with_modules(model: ModelGraph, mset: ModuleSet, x: np.ndarray,
                        watched_labels: list[ModuleLabel],
                        mode: str = VOTE_PROB) -> VerificationRecord:
    """Re-score a watched model prediction with the module set."""
    unknown = [l for l in watched_labels if l not in mset.labels]
    if unknown:
        raise ValidationError(f"watched labels not in set: {', '.join(map(str, unknown))}")
    prediction = forward(model, x).argmax
    matching = [l for l in watched_labels if l.class_id == prediction]
    if not matching:
        return VerificationRecord(prediction, False, None, "not re-verified")
    top_label, _ = compose_predict(mset, x, mode)[0]
    verdict = "confirmed" if top_label == matching[0] else "flagged"
    return VerificationRecord(prediction, True, top_label, verdict)
