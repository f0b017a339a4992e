"""Turn a ConcernMap into a binary-classifier module.

Channeling keeps the concerned output column verbatim and collapses the
remaining columns into their mean; the two backtracking passes (dense-level
and convolution-level) only ever grow the inactive sets.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .concernmap import ConcernMap, propagate_positions, validate_map
from .concern import ci_run, ti_plan, ti_run
from .errors import FormatError, ValidationError, VersionMismatchError
from .graph import (
    LabeledDataset, LayerKind, ModelGraph, infer_shapes, model_fingerprint,
    parse_kv, split_header, write_atomic,
)
from .tensors import ConvParams

MODULE_MAGIC = "CNNMODULE"
MODULE_VERSION = 1

PIPELINE_MC = "CI_TI_MC"
PIPELINE_BLN = "CI_TI_MC_BLN"
PIPELINE_BI = "CI_TI_MC_BLN_BI"
PIPELINES = (PIPELINE_MC, PIPELINE_BLN, PIPELINE_BI)


@dataclass
class ChanneledHead:
    weights: np.ndarray   # [n_hidden, 2] float32; column 0 = concerned
    bias: np.ndarray      # [2] float32
    concerned_class: int


@dataclass
class Module:
    model: ModelGraph
    model_hash: str
    map: ConcernMap
    head: ChanneledHead
    concerned_class: int
    provenance: str
    pipeline: str


def channel_output(model: ModelGraph, concerned_class: int) -> ChanneledHead:
    """Two-output head: concerned column kept bitwise, others averaged."""
    if not 0 <= concerned_class < model.class_count:
        raise ValidationError(f"class {concerned_class} out of range "
                              f"for {model.class_count}-class model")
    final = model.layers[model.final_dense_index()]
    weights, bias = final.weights, final.bias
    others = [j for j in range(model.class_count) if j != concerned_class]
    w_uc = weights[:, others].astype(np.float64).mean(axis=1).astype(np.float32)
    b_uc = np.float32(bias[others].astype(np.float64).mean())
    head_w = np.stack([weights[:, concerned_class].copy(), w_uc], axis=1)
    head_b = np.array([bias[concerned_class], b_uc], dtype=np.float32)
    return ChanneledHead(weights=head_w, bias=head_b, concerned_class=concerned_class)


# ---------------------------------------------------------------------------
# MC-BLN: backtrack through the dense layers


def _dense_feeder(model: ModelGraph, dense_idx: int) -> int:
    ref = model.layers[dense_idx].inputs[0]
    while ref >= 0 and model.layers[ref].kind is LayerKind.RELU:
        ref = model.layers[ref].inputs[0]
    return ref


def mc_bln(model: ModelGraph, module: Module, delta: float = 0.5,
           swap_sign: bool = False) -> Module:
    """Dense-level backtracking with threshold ``delta``.

    Pass 1 marks feeder nodes of the channeled head whose weight to the
    unconcerned output is <= -delta and to the concerned output >= +delta
    (``swap_sign`` flips the two roles).  Earlier layers mark nodes whose
    weights into every already-marked node are <= -delta.  Marks at the
    flatten level are pushed into the preceding conv/pool/add structure.
    """
    if module.head is None:
        raise ValidationError("mc_bln requires a channeled head")
    cmap = module.map.copy()
    shapes = infer_shapes(model)

    uc, c = (0, 1) if swap_sign else (1, 0)
    head_w = module.head.weights.astype(np.float64)
    marked = set(np.flatnonzero((head_w[:, uc] <= -delta)
                                & (head_w[:, c] >= delta)).tolist())

    src = _dense_feeder(model, model.final_dense_index())
    while True:
        if src >= 0 and model.layers[src].kind is LayerKind.DENSE:
            if marked:
                cmap.dense_inactive.setdefault(src, set()).update(marked)
            weights = model.layers[src].weights.astype(np.float64)
            if marked:
                cols = sorted(marked)
                marked = set(np.flatnonzero(
                    (weights[:, cols] <= -delta).all(axis=1)).tolist())
            else:
                marked = set()
            src = _dense_feeder(model, src)
        else:
            # flatten level (or the model input for dense-only models)
            propagate_positions(model, cmap, src, marked, shapes)
            break

    return replace(module, map=cmap, pipeline=_merge_pipeline(module.pipeline, PIPELINE_BLN))


def _merge_pipeline(current: str, target: str) -> str:
    suffix = current[len(PIPELINE_MC):] if current.startswith(PIPELINE_MC) else ""
    extra = "+CL" if "+CL" in suffix else ""
    return target + extra


# ---------------------------------------------------------------------------
# MC-BI: backtrack through the convolution layers


@dataclass
class SlidingWindowMapping:
    """Forward-pass source/sink mapping for one conv configuration.

    Input positions are labeled 1..N row-major; 0 marks padding.  The source
    list is stored once per spatial sink and applies to every output channel.
    """
    window_sources: list[list[int]]   # per spatial sink, kh*kw*c_in entries
    out_spatial: tuple[int, int]
    input_size: int

    def pairs(self):
        for sink, sources in enumerate(self.window_sources):
            for sid in sources:
                yield sid, sink

    def source_to_sinks(self) -> dict[int, set[int]]:
        table: dict[int, set[int]] = {}
        for sid, sink in self.pairs():
            if sid != 0:
                table.setdefault(sid, set()).add(sink)
        return table

    def as_array(self) -> np.ndarray:
        """[n_sinks, kh*kw*c_in] source-id matrix, memoized."""
        if self._array is None:
            self._array = np.asarray(self.window_sources, dtype=np.int64)
        return self._array

    _array: np.ndarray | None = None


def sliding_window_mapping(input_shape: tuple[int, int, int],
                           params: ConvParams) -> SlidingWindowMapping:
    h, w, c = input_shape
    ids = np.arange(1, h * w * c + 1, dtype=np.int64).reshape(h, w, c)
    from .tensors import _axis_geometry  # same padding geometry as conv2d
    kh, kw = params.kernel.shape[:2]
    if c != params.kernel.shape[2]:
        raise ValidationError(f"input has {c} channels, kernel expects "
                              f"{params.kernel.shape[2]}")
    oh, top, bottom = _axis_geometry(h, kh, params.stride, params.padding)
    ow, left, right = _axis_geometry(w, kw, params.stride, params.padding)
    padded = np.pad(ids, ((top, bottom), (left, right), (0, 0)))
    s = params.stride
    windows = []
    for r in range(oh):
        for col in range(ow):
            win = padded[r * s:r * s + kh, col * s:col * s + kw, :]
            windows.append(win.reshape(-1).tolist())
    return SlidingWindowMapping(window_sources=windows, out_spatial=(oh, ow),
                                input_size=h * w * c)


#: geometry -> mapping; the mapping depends only on shapes, never on weights
_MAPPING_CACHE: dict[tuple, SlidingWindowMapping] = {}


def _cached_mapping(input_shape: tuple[int, int, int],
                    params: ConvParams) -> SlidingWindowMapping:
    kh, kw = params.kernel.shape[:2]
    key = (input_shape, kh, kw, params.stride, params.padding)
    mapping = _MAPPING_CACHE.get(key)
    if mapping is None:
        mapping = _MAPPING_CACHE[key] = sliding_window_mapping(input_shape, params)
    return mapping


def mc_bi(model: ModelGraph, module: Module) -> Module:
    """Convolution-level backtracking from the last conv layer to the input.

    A source position is propagated into the preceding layer's inactive set
    exactly when every sink it feeds (across all output channels) is already
    deactivated; padding sources are skipped.
    """
    cmap = module.map.copy()
    shapes = infer_shapes(model)
    for ci in reversed(model.conv_indices()):
        deactivated = cmap.conv_inactive.get(ci)
        if not deactivated:
            continue
        layer = model.layers[ci]
        src_ref = layer.inputs[0]
        in_shape = model.input_shape if src_ref == -1 else shapes[src_ref]
        mapping = _cached_mapping(tuple(in_shape), layer.conv)
        oh, ow = mapping.out_spatial
        c_out = layer.conv.kernel.shape[3]
        deact = np.zeros(oh * ow * c_out, dtype=bool)
        deact[np.fromiter(deactivated, dtype=np.intp)] = True
        spatial_dead = deact.reshape(oh * ow, c_out).all(axis=1)
        # a source survives iff it feeds at least one live spatial sink; the
        # rest (ignoring padding id 0 and sources with no sink at this stride)
        # have every sink deactivated and propagate backwards
        windows = mapping.as_array()
        alive_ids = np.unique(windows[~spatial_dead])
        dead_ids = np.setdiff1d(np.unique(windows), alive_ids, assume_unique=True)
        propagated = {int(s) - 1 for s in dead_ids if s != 0}
        propagate_positions(model, cmap, src_ref, propagated, shapes)
    return replace(module, map=cmap, pipeline=_merge_pipeline(module.pipeline, PIPELINE_BI))


# ---------------------------------------------------------------------------
# pipeline driver


def build_module(model: ModelGraph, dataset: LabeledDataset, concerned_class: int,
                 n_inputs: int, pipeline: str = PIPELINE_BLN, delta: float = 0.5,
                 jobs: int = 1, swap_sign: bool = False,
                 model_hash: str | None = None) -> Module:
    if pipeline not in PIPELINES:
        raise ValidationError(f"unknown pipeline {pipeline!r}")
    cmap = ci_run(model, dataset, concerned_class, n_inputs, jobs=jobs)
    plan = ti_plan(dataset, concerned_class, n_inputs)
    cmap = ti_run(cmap, model, dataset, plan, jobs=jobs)
    head = channel_output(model, concerned_class)
    module = Module(
        model=model,
        model_hash=model_hash or model_fingerprint(model),
        map=cmap,
        head=head,
        concerned_class=concerned_class,
        provenance=dataset.name,
        pipeline=PIPELINE_MC,
    )
    if pipeline in (PIPELINE_BLN, PIPELINE_BI):
        module = mc_bln(model, module, delta=delta, swap_sign=swap_sign)
    if pipeline == PIPELINE_BI:
        module = mc_bi(model, module)
    return module


# ---------------------------------------------------------------------------
# module file (.cnnmodule)


def _encode_deltas(positions: set[int]) -> str:
    ordered = sorted(positions)
    deltas = [ordered[0]] + [b - a for a, b in zip(ordered, ordered[1:])] if ordered else []
    return " ".join(map(str, deltas))


def _decode_deltas(text: str) -> set[int]:
    if not text.strip():
        return set()
    values = [int(v) for v in text.split()]
    out, acc = set(), 0
    for v in values:
        acc += v
        out.add(acc)
    return out


def dump_module_bytes(module: Module) -> bytes:
    blob = io.BytesIO()
    w = np.ascontiguousarray(module.head.weights, dtype="<f4")
    b = np.ascontiguousarray(module.head.bias, dtype="<f4")
    w_span = f"0:{w.size}"
    b_span = f"{w.nbytes}:{b.size}"
    blob.write(w.tobytes())
    blob.write(b.tobytes())

    lines = [
        f"{MODULE_MAGIC} v{MODULE_VERSION}",
        f"model_hash {module.model_hash}",
        f"concerned_class {module.concerned_class}",
        f"provenance {module.provenance}",
        f"pipeline {module.pipeline}",
        f"observed {module.map.observed_count}",
        f"head {module.head.weights.shape[0]} weights={w_span} bias={b_span}",
    ]
    for idx in sorted(module.map.conv_inactive):
        positions = module.map.conv_inactive[idx]
        if positions:
            lines.append(f"map {idx} conv {len(positions)} {_encode_deltas(positions)}")
    for idx in sorted(module.map.dense_inactive):
        nodes = module.map.dense_inactive[idx]
        if nodes:
            lines.append(f"map {idx} dense {len(nodes)} {_encode_deltas(nodes)}")
    if module.map.input_positions:
        lines.append(f"input_positions {len(module.map.input_positions)} "
                     f"{_encode_deltas(module.map.input_positions)}")
    header = "\n".join(lines) + "\nend_header\n"
    return header.encode("utf-8") + blob.getvalue()


def save_module(module: Module, path: str) -> None:
    write_atomic(path, dump_module_bytes(module))


def load_module(path: str, model: ModelGraph | dict[str, ModelGraph],
                verify_hash: bool = True) -> Module:
    with open(path, "rb") as fh:
        raw = fh.read()
    lines, blob = split_header(raw, MODULE_MAGIC)
    plain = [l for l in lines if not l.startswith(("map ", "input_positions "))]
    fields = parse_kv(plain)
    try:
        model_hash = fields["model_hash"]
        concerned_class = int(fields["concerned_class"])
        provenance = fields["provenance"]
        pipeline = fields["pipeline"]
        observed = int(fields["observed"])
        head_tokens = fields["head"].split()
        n_hidden = int(head_tokens[0])
        attrs = dict(tok.split("=", 1) for tok in head_tokens[1:])
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"bad module header: {exc}") from exc

    if isinstance(model, dict):
        if model_hash not in model:
            raise ValidationError(f"no model supplied with hash {model_hash[:12]}…")
        graph = model[model_hash]
    else:
        graph = model
        if verify_hash and model_fingerprint(graph) != model_hash:
            raise ValidationError("module was built from a different model (hash mismatch)")

    def read_f32(span: str, shape: tuple[int, ...]) -> np.ndarray:
        off, cnt = (int(v) for v in span.split(":"))
        if cnt != int(np.prod(shape)) or off + 4 * cnt > len(blob):
            raise FormatError(f"bad head blob span {span!r}")
        return np.frombuffer(blob, dtype="<f4", count=cnt, offset=off).reshape(shape).copy()

    head = ChanneledHead(
        weights=read_f32(attrs["weights"], (n_hidden, 2)),
        bias=read_f32(attrs["bias"], (2,)),
        concerned_class=concerned_class,
    )
    cmap = ConcernMap(observed_count=observed)
    for line in lines:
        tokens = line.split(None, 4)
        if line.startswith("map "):
            if len(tokens) < 4:
                raise FormatError(f"bad map line {line!r}")
            idx, kind, count = int(tokens[1]), tokens[2], int(tokens[3])
            positions = _decode_deltas(tokens[4] if len(tokens) > 4 else "")
            if len(positions) != count:
                raise FormatError(f"map line count mismatch at layer {idx}")
            table = cmap.conv_inactive if kind == "conv" else cmap.dense_inactive
            table[idx] = positions
        elif line.startswith("input_positions "):
            tokens = line.split(None, 2)
            cmap.input_positions = _decode_deltas(tokens[2] if len(tokens) > 2 else "")
            if len(cmap.input_positions) != int(tokens[1]):
                raise FormatError("input_positions count mismatch")

    module = Module(model=graph, model_hash=model_hash, map=cmap, head=head,
                    concerned_class=concerned_class, provenance=provenance,
                    pipeline=pipeline)
    validate_map(graph, cmap)
    return module
