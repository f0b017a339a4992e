"""Layer-graph representation of a trained CNN plus the portable file formats.

``.cnnmod`` / ``.cnnds`` files are a UTF-8 key-value header terminated by an
``end_header`` line, followed by a single binary blob.  All floats are
little-endian float32, labels are little-endian int32, and blob locations are
declared in the header as ``<byte offset>:<element count>``.
"""
from __future__ import annotations

import hashlib
import io
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import FormatError, ShapeError, ValidationError, VersionMismatchError
from .tensors import ConvParams, Padding, conv_out_shape

MODEL_MAGIC = "CNNMOD"
DATASET_MAGIC = "CNNDS"
FORMAT_VERSION = 1


class LayerKind(Enum):
    CONV2D = "conv2d"
    DENSE = "dense"
    FLATTEN = "flatten"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    ADD = "add"
    RELU = "relu"
    SOFTMAX = "softmax"


class Split(Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class LayerSpec:
    kind: LayerKind
    inputs: tuple[int, ...]            # indices of feeding layers; -1 = model input
    conv: ConvParams | None = None     # CONV2D
    weights: np.ndarray | None = None  # DENSE, [n_in, n_out] float32
    bias: np.ndarray | None = None     # DENSE, [n_out] float32
    pool: int = 0                      # MAXPOOL / AVGPOOL


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    class_count: int

    def final_dense_index(self) -> int:
        return self.layers[-1].inputs[0]

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind is LayerKind.CONV2D]

    def dense_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind is LayerKind.DENSE]

    def hidden_dense_indices(self) -> list[int]:
        final = self.final_dense_index()
        return [i for i in self.dense_indices() if i != final]


@dataclass
class LabeledDataset:
    name: str
    images: np.ndarray  # [N, H, W, C] float32
    labels: np.ndarray  # [N] int32
    split: Split
    class_count: int

    def __post_init__(self):
        if len(self.labels) != len(self.images):
            raise ValidationError(
                f"{len(self.labels)} labels for {len(self.images)} images"
            )
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise ValidationError(
                f"label {int(self.labels.max())} >= class_count {self.class_count}"
            )
        if len(self.labels) and int(self.labels.min()) < 0:
            raise ValidationError("negative class label")

    def class_indices(self, class_id: int) -> np.ndarray:
        """Indices of examples of one class, in dataset order."""
        return np.flatnonzero(self.labels == class_id)


# ---------------------------------------------------------------------------
# shape inference & validation


def infer_shapes(model: ModelGraph) -> list[tuple[int, ...]]:
    """Output shape of every layer; raises ValidationError on any mismatch."""
    shapes: list[tuple[int, ...]] = []

    def in_shape(ref: int) -> tuple[int, ...]:
        return model.input_shape if ref == -1 else shapes[ref]

    for i, layer in enumerate(model.layers):
        for ref in layer.inputs:
            if ref >= i or ref < -1:
                raise ValidationError(f"layer {i} references layer {ref}: not topological")
        try:
            shapes.append(_layer_out_shape(layer, [in_shape(r) for r in layer.inputs]))
        except ShapeError as exc:
            raise ValidationError(f"layer {i} ({layer.kind.value}): {exc}") from exc
    return shapes


def _layer_out_shape(layer: LayerSpec, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    kind = layer.kind
    if kind is LayerKind.CONV2D:
        if len(ins[0]) != 3:
            raise ShapeError(f"conv input must be rank 3, got {ins[0]}")
        return conv_out_shape(ins[0], layer.conv)
    if kind in (LayerKind.MAXPOOL, LayerKind.AVGPOOL):
        h, w, c = ins[0]
        if h % layer.pool or w % layer.pool:
            raise ShapeError(f"{h}x{w} not divisible by pool size {layer.pool}")
        return h // layer.pool, w // layer.pool, c
    if kind is LayerKind.FLATTEN:
        return (int(np.prod(ins[0])),)
    if kind is LayerKind.DENSE:
        n_in, n_out = layer.weights.shape
        if ins[0] != (n_in,):
            raise ShapeError(f"dense expects ({n_in},), got {ins[0]}")
        return (n_out,)
    if kind is LayerKind.ADD:
        if ins[0] != ins[1]:
            raise ShapeError(f"add operands differ: {ins[0]} vs {ins[1]}")
        return ins[0]
    if kind in (LayerKind.RELU, LayerKind.SOFTMAX):
        return ins[0]
    raise ShapeError(f"unknown layer kind {kind}")


def validate_model(model: ModelGraph) -> list[tuple[int, ...]]:
    shapes = infer_shapes(model)
    layers = model.layers
    if not layers or layers[-1].kind is not LayerKind.SOFTMAX:
        raise ValidationError("model must end with a softmax layer")
    head_ref = layers[-1].inputs[0]
    if head_ref < 0 or layers[head_ref].kind is not LayerKind.DENSE:
        raise ValidationError("softmax must consume the final dense layer")
    if shapes[head_ref] != (model.class_count,):
        raise ValidationError(
            f"final dense emits {shapes[head_ref]}, expected ({model.class_count},)"
        )
    _check_relu_placement(model, head_ref)
    return shapes


def _check_relu_placement(model: ModelGraph, final_dense: int) -> None:
    # Every hidden conv/dense must reach exactly one ReLU, possibly through Add
    # layers (residual blocks put the ReLU after the merge).
    consumers: dict[int, list[int]] = {}
    for i, layer in enumerate(model.layers):
        for ref in layer.inputs:
            consumers.setdefault(ref, []).append(i)
    for i, layer in enumerate(model.layers):
        if layer.kind not in (LayerKind.CONV2D, LayerKind.DENSE) or i == final_dense:
            continue
        relus = 0
        frontier = list(consumers.get(i, []))
        seen = set()
        while frontier:
            j = frontier.pop()
            if j in seen:
                continue
            seen.add(j)
            if model.layers[j].kind is LayerKind.RELU:
                relus += 1
            elif model.layers[j].kind is LayerKind.ADD:
                frontier.extend(consumers.get(j, []))
        if relus != 1:
            raise ValidationError(
                f"hidden layer {i} ({layer.kind.value}) reaches {relus} ReLU layers, expected 1"
            )


# ---------------------------------------------------------------------------
# serialization helpers


def write_atomic(path: str, data: bytes) -> None:
    """Write via a temp file in the target directory plus rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def split_header(raw: bytes, magic: str) -> tuple[list[str], bytes]:
    marker = b"end_header\n"
    pos = raw.find(marker)
    if pos < 0:
        raise FormatError("missing end_header marker")
    try:
        lines = raw[:pos].decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not UTF-8: {exc}") from exc
    if not lines:
        raise FormatError("empty header")
    head = lines[0].split()
    if len(head) != 2 or head[0] != magic:
        raise FormatError(f"bad magic line {lines[0]!r}, expected {magic}")
    if head[1] != f"v{FORMAT_VERSION}":
        raise VersionMismatchError(f"unsupported version {head[1]}")
    return lines[1:], raw[pos + len(marker):]


def parse_kv(lines: list[str]) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in lines:
        if not line.strip():
            continue
        key, _, value = line.partition(" ")
        fields[key] = value
    return fields


def _span(text: str) -> tuple[int, int]:
    try:
        off, cnt = text.split(":")
        return int(off), int(cnt)
    except ValueError as exc:
        raise FormatError(f"bad blob span {text!r}") from exc


def _read_f32(blob: bytes, span: str, shape: tuple[int, ...]) -> np.ndarray:
    off, cnt = _span(span)
    if cnt != int(np.prod(shape)):
        raise FormatError(f"blob span count {cnt} != shape {shape}")
    if off + 4 * cnt > len(blob):
        raise FormatError("blob span past end of file")
    return np.frombuffer(blob, dtype="<f4", count=cnt, offset=off).reshape(shape).copy()


# ---------------------------------------------------------------------------
# model save/load


def dump_model_bytes(model: ModelGraph) -> bytes:
    blob = io.BytesIO()

    def put(arr: np.ndarray) -> str:
        off = blob.tell()
        data = np.ascontiguousarray(arr, dtype="<f4")
        blob.write(data.tobytes())
        return f"{off}:{data.size}"

    lines = [
        f"{MODEL_MAGIC} v{FORMAT_VERSION}",
        f"input_shape {' '.join(map(str, model.input_shape))}",
        f"class_count {model.class_count}",
        f"layer_count {len(model.layers)}",
    ]
    for i, layer in enumerate(model.layers):
        parts = [f"layer {i} kind={layer.kind.value}",
                 f"inputs={','.join(map(str, layer.inputs))}"]
        if layer.kind is LayerKind.CONV2D:
            kh, kw, c_in, c_out = layer.conv.kernel.shape
            parts += [
                f"kh={kh}", f"kw={kw}", f"c_in={c_in}", f"c_out={c_out}",
                f"stride={layer.conv.stride}", f"padding={layer.conv.padding.value}",
                f"weights={put(layer.conv.kernel)}", f"bias={put(layer.conv.bias)}",
            ]
        elif layer.kind is LayerKind.DENSE:
            n_in, n_out = layer.weights.shape
            parts += [
                f"n_in={n_in}", f"n_out={n_out}",
                f"weights={put(layer.weights)}", f"bias={put(layer.bias)}",
            ]
        elif layer.kind in (LayerKind.MAXPOOL, LayerKind.AVGPOOL):
            parts.append(f"pool={layer.pool}")
        lines.append(" ".join(parts))
    header = "\n".join(lines) + "\nend_header\n"
    return header.encode("utf-8") + blob.getvalue()


def save_model(model: ModelGraph, path: str) -> None:
    validate_model(model)
    write_atomic(path, dump_model_bytes(model))


def load_model_bytes(raw: bytes) -> ModelGraph:
    lines, blob = split_header(raw, MODEL_MAGIC)
    fields = parse_kv([l for l in lines if not l.startswith("layer ")])
    try:
        input_shape = tuple(int(v) for v in fields["input_shape"].split())
        class_count = int(fields["class_count"])
        layer_count = int(fields["layer_count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad model header: {exc}") from exc
    if len(input_shape) != 3:
        raise FormatError(f"input_shape must have 3 extents, got {input_shape}")

    layers: list[LayerSpec] = [None] * layer_count  # type: ignore[list-item]
    for line in lines:
        if not line.startswith("layer "):
            continue
        tokens = line.split()
        try:
            idx = int(tokens[1])
            attrs = dict(tok.split("=", 1) for tok in tokens[2:])
            kind = LayerKind(attrs["kind"])
            inputs = tuple(int(v) for v in attrs["inputs"].split(","))
        except (IndexError, KeyError, ValueError) as exc:
            raise FormatError(f"bad layer line {line!r}: {exc}") from exc
        if not 0 <= idx < layer_count:
            raise FormatError(f"layer index {idx} out of range")
        if kind is LayerKind.CONV2D:
            shape = (int(attrs["kh"]), int(attrs["kw"]), int(attrs["c_in"]), int(attrs["c_out"]))
            conv = ConvParams(
                kernel=_read_f32(blob, attrs["weights"], shape),
                bias=_read_f32(blob, attrs["bias"], (shape[3],)),
                stride=int(attrs["stride"]),
                padding=Padding(attrs["padding"]),
            )
            layers[idx] = LayerSpec(kind, inputs, conv=conv)
        elif kind is LayerKind.DENSE:
            n_in, n_out = int(attrs["n_in"]), int(attrs["n_out"])
            layers[idx] = LayerSpec(
                kind, inputs,
                weights=_read_f32(blob, attrs["weights"], (n_in, n_out)),
                bias=_read_f32(blob, attrs["bias"], (n_out,)),
            )
        elif kind in (LayerKind.MAXPOOL, LayerKind.AVGPOOL):
            layers[idx] = LayerSpec(kind, inputs, pool=int(attrs["pool"]))
        else:
            layers[idx] = LayerSpec(kind, inputs)
    if any(l is None for l in layers):
        raise FormatError("missing layer line(s)")

    model = ModelGraph(layers=layers, input_shape=input_shape, class_count=class_count)
    validate_model(model)
    return model


def load_model(path: str) -> ModelGraph:
    with open(path, "rb") as fh:
        return load_model_bytes(fh.read())


def model_fingerprint(model: ModelGraph) -> str:
    """sha256 over the canonical serialized bytes."""
    return hashlib.sha256(dump_model_bytes(model)).hexdigest()


# ---------------------------------------------------------------------------
# dataset save/load


def dump_dataset_bytes(ds: LabeledDataset) -> bytes:
    if any(ch.isspace() for ch in ds.name):
        raise ValidationError(f"dataset name {ds.name!r} must not contain whitespace")
    labels = np.ascontiguousarray(ds.labels, dtype="<i4")
    images = np.ascontiguousarray(ds.images, dtype="<f4")
    n, h, w, c = images.shape
    header = "\n".join([
        f"{DATASET_MAGIC} v{FORMAT_VERSION}",
        f"name {ds.name}",
        f"split {ds.split.value}",
        f"class_count {ds.class_count}",
        f"count {n}",
        f"shape {h} {w} {c}",
        f"labels 0:{labels.size}",
        f"images {labels.nbytes}:{images.size}",
    ]) + "\nend_header\n"
    return header.encode("utf-8") + labels.tobytes() + images.tobytes()


def save_dataset(ds: LabeledDataset, path: str) -> None:
    write_atomic(path, dump_dataset_bytes(ds))


def load_dataset(path: str) -> LabeledDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    lines, blob = split_header(raw, DATASET_MAGIC)
    fields = parse_kv(lines)
    try:
        name = fields["name"]
        split = Split(fields["split"])
        class_count = int(fields["class_count"])
        count = int(fields["count"])
        h, w, c = (int(v) for v in fields["shape"].split())
        loff, lcnt = _span(fields["labels"])
        ioff, icnt = _span(fields["images"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad dataset header: {exc}") from exc
    if lcnt != count or icnt != count * h * w * c:
        raise FormatError("blob spans inconsistent with count/shape")
    if ioff + 4 * icnt > len(blob) or loff + 4 * lcnt > len(blob):
        raise FormatError("blob span past end of file")
    labels = np.frombuffer(blob, dtype="<i4", count=lcnt, offset=loff).copy()
    images = np.frombuffer(blob, dtype="<f4", count=icnt, offset=ioff).reshape(
        count, h, w, c
    ).copy()
    return LabeledDataset(name=name, images=images, labels=labels, split=split,
                          class_count=class_count)
