"""Plain-text scenario descriptions consumed by the CLI composition commands.

Line grammar (``#`` starts a comment)::

    model <path>                          trained model file (.cnnmod)
    module <path>                         module file (.cnnmodule)
    replace <dataset:class> <path>        swap a module after loading
    remove <dataset:class>                drop a module after loading
    continual <dataset:class> <path> <class>   CL-update one module with
                                          examples of <class> from dataset <path>
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

from .compose import ModuleLabel, ModuleSet, continual_update, remove, replace
from .errors import FormatError
from .graph import ModelGraph, load_dataset, load_model, model_fingerprint
from .modularize import Module, load_module


@dataclass
class Scenario:
    model_paths: list[str] = field(default_factory=list)
    module_paths: list[str] = field(default_factory=list)
    replacements: list[tuple[ModuleLabel, str]] = field(default_factory=list)
    removals: list[ModuleLabel] = field(default_factory=list)
    continual: list[tuple[ModuleLabel, str, int]] = field(default_factory=list)


def parse_scenario(path: str) -> Scenario:
    scenario = Scenario()
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            key, args = tokens[0], tokens[1:]
            try:
                if key == "model" and len(args) == 1:
                    scenario.model_paths.append(resolve(args[0]))
                elif key == "module" and len(args) == 1:
                    scenario.module_paths.append(resolve(args[0]))
                elif key == "replace" and len(args) == 2:
                    scenario.replacements.append((ModuleLabel.parse(args[0]), resolve(args[1])))
                elif key == "remove" and len(args) == 1:
                    scenario.removals.append(ModuleLabel.parse(args[0]))
                elif key == "continual" and len(args) == 3:
                    scenario.continual.append(
                        (ModuleLabel.parse(args[0]), resolve(args[1]), int(args[2])))
                else:
                    raise ValueError("unrecognized directive")
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad scenario line {line!r}: {exc}") from exc
    return scenario


def load_models_by_hash(paths: list[str]) -> dict[str, ModelGraph]:
    models: dict[str, ModelGraph] = {}
    for path in paths:
        graph = load_model(path)
        models[model_fingerprint(graph)] = graph
    return models


def realize_scenario(scenario: Scenario,
                     cl_direction: str = "reinstate") -> ModuleSet:
    """Load modules and apply the replace/remove/continual directives in order."""
    models = load_models_by_hash(scenario.model_paths)
    modules = [load_module(p, models) for p in scenario.module_paths]
    mset = ModuleSet(modules=modules)
    for label, module_path in scenario.replacements:
        mset = replace(mset, label, load_module(module_path, models))
    for label in scenario.removals:
        mset = remove(mset, label)
    for label, ds_path, cls in scenario.continual:
        ds = load_dataset(ds_path)
        foreign = [x for x, y in zip(ds.images, ds.labels) if int(y) == cls]
        idx = mset.index_of(label)
        updated = continual_update(mset.modules[idx], foreign, direction=cl_direction)
        mset = replace(mset, label, updated)
    return mset


def write_set_manifest(mset: ModuleSet, path: str) -> None:
    """Record the resulting set, one line per module."""
    from .graph import write_atomic
    lines = ["# cnndecomp module set"]
    for label, module in zip(mset.labels, mset.modules):
        lines.append(f"module {label} pipeline={module.pipeline} "
                     f"model={module.model_hash[:16]}")
    write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))
