"""Evaluation metrics: top-k accuracy, Jaccard index, and the CO2e estimator."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .concernmap import MASKABLE_KINDS, ConcernMap
from .compose import ModuleLabel, ModuleSet, VOTE_PROB, compose_predict
from .errors import FormatError, ValidationError
from .graph import LabeledDataset, LayerKind, ModelGraph, infer_shapes

PUE_COEFFICIENT = 1.58
CO2E_PER_KWH = 0.954  # lbs per kWh


@dataclass
class PowerLog:
    t: np.ndarray    # seconds since start, strictly increasing
    p_cpu: np.ndarray
    p_dram: np.ndarray
    p_gpu: np.ndarray
    gpu_cores: int = 0
    baseline_cpu: float = 0.0
    baseline_dram: float = 0.0

    def __post_init__(self):
        if len(self.t) == 0:
            raise ValidationError("power log has no samples")
        if np.any(np.diff(self.t) <= 0):
            raise ValidationError("power log timestamps must be strictly increasing")

    @classmethod
    def from_csv(cls, path: str, gpu_cores: int = 0,
                 baseline_cpu: float = 0.0, baseline_dram: float = 0.0) -> "PowerLog":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            expected = ["t_seconds", "p_cpu_w", "p_dram_w", "p_gpu_w"]
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
                raise FormatError(f"power log header must be {','.join(expected)}")
            for row in reader:
                try:
                    rows.append([float(row[k]) for k in expected])
                except (TypeError, ValueError) as exc:
                    raise FormatError(f"bad power log row {row}: {exc}") from exc
        if not rows:
            raise ValidationError("power log has no samples")
        data = np.array(rows, dtype=np.float64)
        return cls(t=data[:, 0], p_cpu=data[:, 1], p_dram=data[:, 2], p_gpu=data[:, 3],
                   gpu_cores=gpu_cores, baseline_cpu=baseline_cpu,
                   baseline_dram=baseline_dram)

    def average_powers(self) -> tuple[float, float, float]:
        """Trapezoidal time-weighted averages minus baselines, clamped at 0."""
        def avg(p: np.ndarray) -> float:
            if len(self.t) == 1:
                return float(p[0])
            span = self.t[-1] - self.t[0]
            return float(np.trapezoid(p, self.t) / span)
        p_c = max(avg(self.p_cpu) - self.baseline_cpu, 0.0)
        p_r = max(avg(self.p_dram) - self.baseline_dram, 0.0)
        p_g = max(avg(self.p_gpu), 0.0)
        return p_c, p_r, p_g


def co2e_from_powers(p_cpu: float, p_dram: float, p_gpu: float, gpu_cores: int,
                     t_hours: float) -> tuple[float, float]:
    """(energy kWh, emission lbs) for average powers in watts over t hours."""
    if t_hours < 0:
        raise ValidationError("time must be non-negative")
    p_t = PUE_COEFFICIENT * t_hours * (p_cpu + p_dram + gpu_cores * p_gpu) / 1000.0
    return p_t, CO2E_PER_KWH * p_t


def co2e(log: PowerLog, t_hours: float) -> tuple[float, float]:
    p_c, p_r, p_g = log.average_powers()
    return co2e_from_powers(p_c, p_r, p_g, log.gpu_cores, t_hours)


def top_k_accuracy(rankings: list[list[ModuleLabel]], truths: list[ModuleLabel],
                   k: int) -> float:
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(rankings) != len(truths):
        raise ValidationError("rankings and truths differ in length")
    if not rankings:
        raise ValidationError("cannot compute accuracy over zero examples")
    hits = sum(truth in ranked[:k] for ranked, truth in zip(rankings, truths))
    return hits / len(rankings)


def maskable_universe(model: ModelGraph) -> int:
    """Total count of maskable positions: conv/pool/flatten outputs + hidden dense nodes."""
    shapes = infer_shapes(model)
    total = 0
    for i, layer in enumerate(model.layers):
        if layer.kind in MASKABLE_KINDS:
            total += int(np.prod(shapes[i]))
    for d in model.hidden_dense_indices():
        total += shapes[d][0]
    return total


def jaccard(model: ModelGraph, cmap: ConcernMap) -> float:
    """|active positions| / |all maskable positions|; 1 for the empty map."""
    total = maskable_universe(model)
    masked = cmap.masked_count()
    return (total - masked) / total


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class: dict[str, float]
    jaccard: dict[str, float]
    n_examples: int
    vote_mode: str = VOTE_PROB
    extra: dict[str, str] = field(default_factory=dict)


def dataset_examples(mset: ModuleSet, datasets: list[LabeledDataset]) \
        -> list[tuple[np.ndarray, ModuleLabel]]:
    """Test examples covered by the set's labels, ground truth attached."""
    labels = set(mset.labels)
    examples = []
    for ds in datasets:
        for x, y in zip(ds.images, ds.labels):
            label = ModuleLabel(ds.name, int(y))
            if label in labels:
                examples.append((x, label))
    return examples


def evaluate(mset: ModuleSet, datasets: list[LabeledDataset],
             mode: str = VOTE_PROB, jobs: int = 1,
             strict_labels: bool = True) -> EvalReport:
    """Compose the modules over the test split(s) and aggregate accuracies."""
    label_set = set(mset.labels)
    for ds in datasets:
        present = {ModuleLabel(ds.name, int(y)) for y in ds.labels}
        uncovered = present - label_set
        if strict_labels and uncovered:
            raise ValidationError(
                f"dataset {ds.name} has labels outside the set: "
                f"{', '.join(map(str, sorted(map(str, uncovered))))}"
            )
    examples = dataset_examples(mset, datasets)
    if not examples:
        raise ValidationError("no evaluable examples for this module set")

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        chunks = np.array_split(np.arange(len(examples)), min(jobs, len(examples)))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(
                _rank_chunk,
                [mset] * len(chunks),
                [[examples[i][0] for i in chunk] for chunk in chunks],
                [mode] * len(chunks),
            ))
        rankings = [r for part in parts for r in part]
    else:
        rankings = _rank_chunk(mset, [x for x, _ in examples], mode)

    truths = [label for _, label in examples]
    per_class: dict[str, float] = {}
    for label in mset.labels:
        idxs = [i for i, t in enumerate(truths) if t == label]
        if idxs:
            per_class[str(label)] = sum(
                rankings[i][0] == label for i in idxs) / len(idxs)
    ji = {str(ModuleLabel(m.provenance, m.concerned_class)): jaccard(m.model, m.map)
          for m in mset.modules}
    return EvalReport(
        top1=top_k_accuracy(rankings, truths, 1),
        top5=top_k_accuracy(rankings, truths, 5),
        per_class=per_class,
        jaccard=ji,
        n_examples=len(examples),
        vote_mode=mode,
    )


def _rank_chunk(mset: ModuleSet, inputs: list[np.ndarray],
                mode: str) -> list[list[ModuleLabel]]:
    return [[label for label, _ in compose_predict(mset, x, mode)] for x in inputs]
