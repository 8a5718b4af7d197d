"""Network IR: operator specs, supernets, shape inference, canonical keys, JSON I/O.

All types are immutable after construction and safe to share across threads.
A supernet is a linear chain of mixed stages; every candidate inside a stage
must map the stage's input shape to the same declared output shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence, Union

from .errors import InvalidOp, ParseError, ShapeMismatch


class OpKind(str, Enum):
    Conv = "Conv"
    DWConv = "DWConv"
    PointwiseConv = "PointwiseConv"
    MBConv = "MBConv"
    AvgPool = "AvgPool"
    MaxPool = "MaxPool"
    Identity = "Identity"
    ReLU = "ReLU"
    LeakyReLU = "LeakyReLU"
    UpsampleNearest = "UpsampleNearest"
    UpsampleBilinear = "UpsampleBilinear"
    DepthToSpace = "DepthToSpace"
    Linear = "Linear"


class Task(str, Enum):
    Classification = "Classification"
    SuperResolution = "SuperResolution"


# Kinds whose kernel field is meaningful (spatial window).
SPATIAL_KINDS = {OpKind.Conv, OpKind.DWConv, OpKind.MBConv, OpKind.AvgPool, OpKind.MaxPool}
# Kinds that carry learnable weights.
WEIGHTED_KINDS = {OpKind.Conv, OpKind.DWConv, OpKind.PointwiseConv, OpKind.MBConv, OpKind.Linear}
# Kinds that may use stride > 1.
STRIDED_KINDS = SPATIAL_KINDS | {OpKind.PointwiseConv}
UPSAMPLE_KINDS = {OpKind.UpsampleNearest, OpKind.UpsampleBilinear}
SCALED_KINDS = UPSAMPLE_KINDS | {OpKind.DepthToSpace}


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise InvalidOp(f"TensorShape.{name} must be a positive integer, got {v!r}")

    @property
    def numel(self) -> int:
        return self.channels * self.height * self.width

    def as_list(self):
        return [self.channels, self.height, self.width]


@dataclass(frozen=True)
class OperatorSpec:
    kind: OpKind
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    expand_ratio: Fraction = Fraction(1)
    activation_slope: float = 0.0
    scale_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "expand_ratio", Fraction(self.expand_ratio))

    def validate_fields(self) -> None:
        """Raise InvalidOp on any structural invariant violation."""
        k = self.kind
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidOp(f"{k.value}: channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidOp(f"{k.value}: kernel must be odd positive, got {self.kernel}")
        if self.stride < 1:
            raise InvalidOp(f"{k.value}: stride must be positive, got {self.stride}")
        if self.scale_factor < 1:
            raise InvalidOp(f"{k.value}: scale_factor must be positive")
        if self.activation_slope < 0:
            raise InvalidOp(f"{k.value}: activation_slope must be non-negative")
        if k not in SPATIAL_KINDS and self.kernel != 1:
            raise InvalidOp(f"{k.value}: kernel must be 1 for non-spatial kinds")
        if k not in STRIDED_KINDS and self.stride != 1:
            raise InvalidOp(f"{k.value}: stride must be 1")
        if k is not OpKind.MBConv and self.expand_ratio != 1:
            raise InvalidOp(f"{k.value}: expand_ratio only applies to MBConv")
        if k is not OpKind.LeakyReLU and self.activation_slope != 0:
            raise InvalidOp(f"{k.value}: activation_slope only applies to LeakyReLU")
        if k not in SCALED_KINDS and self.scale_factor != 1:
            raise InvalidOp(f"{k.value}: scale_factor only applies to upsample/DepthToSpace")
        if k in (OpKind.Identity, OpKind.ReLU, OpKind.LeakyReLU, OpKind.AvgPool,
                 OpKind.MaxPool, OpKind.DWConv) and self.in_channels != self.out_channels:
            raise InvalidOp(f"{k.value}: requires in_channels == out_channels")
        if k is OpKind.Identity and self.stride != 1:
            raise InvalidOp("Identity: stride must be 1")
        if k is OpKind.MBConv:
            if self.expand_ratio <= 0:
                raise InvalidOp("MBConv: expand_ratio must be positive")
            hidden = self.expand_ratio * self.in_channels
            if hidden.denominator != 1 or hidden < 1:
                raise InvalidOp(
                    f"MBConv: expand_ratio*in_channels must be a positive integer, got {hidden}")
        if k is OpKind.DepthToSpace:
            r2 = self.scale_factor ** 2
            if self.in_channels % r2 != 0:
                raise InvalidOp("DepthToSpace: in_channels must be divisible by scale_factor^2")
            if self.out_channels != self.in_channels // r2:
                raise InvalidOp("DepthToSpace: out_channels must equal in_channels/scale_factor^2")
        if k in SCALED_KINDS and self.scale_factor < 1:
            raise InvalidOp(f"{k.value}: scale_factor must be >= 1")

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2 if self.kind in SPATIAL_KINDS else 0

    @property
    def hidden_channels(self) -> int:
        """MBConv expanded width; in_channels otherwise."""
        return int(self.expand_ratio * self.in_channels)


def _spatial_out(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise InvalidOp(f"spatial size collapses: in={size} k={kernel} s={stride}")
    return out


def output_shape(op: OperatorSpec, shape: TensorShape) -> TensorShape:
    """Shape produced by `op` applied to `shape`; raises on incompatibility."""
    op.validate_fields()
    k = op.kind
    if k is OpKind.Linear:
        if op.in_channels != shape.numel:
            raise InvalidOp(
                f"Linear: in_channels {op.in_channels} != flattened input {shape.numel}")
        return TensorShape(op.out_channels, 1, 1)
    if op.in_channels != shape.channels:
        raise InvalidOp(f"{k.value}: expects {op.in_channels} channels, input has {shape.channels}")
    if k in UPSAMPLE_KINDS:
        return TensorShape(op.out_channels, shape.height * op.scale_factor,
                           shape.width * op.scale_factor)
    if k is OpKind.DepthToSpace:
        return TensorShape(op.out_channels, shape.height * op.scale_factor,
                           shape.width * op.scale_factor)
    h = _spatial_out(shape.height, op.kernel, op.stride, op.padding)
    w = _spatial_out(shape.width, op.kernel, op.stride, op.padding)
    return TensorShape(op.out_channels, h, w)


def _fmt_fraction(f: Fraction) -> str:
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


def canonical_key(op: OperatorSpec, shape: TensorShape) -> str:
    """Stable lookup-table key for an operator applied at a given input shape.

    Base layout is `kind:k{K}:s{S}:e{E}:i{C}x{H}x{W}:o{C'}`; non-default
    activation slope and scale factor append `:a{slope}` / `:f{scale}` so the
    key stays injective over every spec field.
    """
    output_shape(op, shape)  # raises InvalidOp when the pair is inconsistent
    key = (f"{op.kind.value}:k{op.kernel}:s{op.stride}:e{_fmt_fraction(op.expand_ratio)}"
           f":i{shape.channels}x{shape.height}x{shape.width}:o{op.out_channels}")
    if op.activation_slope != 0:
        key += f":a{op.activation_slope!r}"
    if op.scale_factor != 1:
        key += f":f{op.scale_factor}"
    return key


@dataclass(frozen=True)
class MixedStage:
    candidates: tuple
    input_shape: TensorShape
    output_shape: TensorShape

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))


@dataclass(frozen=True)
class SuperNet:
    task: Task
    input_shape: TensorShape
    stem: tuple
    stages: tuple
    head: tuple
    num_classes: Optional[int] = None
    sr_scale: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "stem", tuple(self.stem))
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "head", tuple(self.head))


@dataclass(frozen=True)
class CompactNet:
    task: Task
    input_shape: TensorShape
    layers: tuple
    num_classes: Optional[int] = None
    sr_scale: Optional[int] = None
    chosen_indices: tuple = ()
    tie_stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "chosen_indices", tuple(self.chosen_indices))
        object.__setattr__(self, "tie_stages", tuple(self.tie_stages))


Net = Union[SuperNet, CompactNet]


def infer_shapes(net: Net) -> list:
    """Output shape after each layer (compact) or each stem op/stage/head op (supernet).

    Raises ShapeMismatch when a stage candidate disagrees with the stage's
    declared output shape.
    """
    shapes = []
    cur = net.input_shape
    if isinstance(net, CompactNet):
        for op in net.layers:
            cur = output_shape(op, cur)
            shapes.append(cur)
        return shapes
    for op in net.stem:
        cur = output_shape(op, cur)
        shapes.append(cur)
    for i, stage in enumerate(net.stages):
        if cur != stage.input_shape:
            raise ShapeMismatch(
                f"stage {i}: declared input {stage.input_shape} but chain produces {cur}",
                stage_index=i)
        for j, cand in enumerate(stage.candidates):
            got = output_shape(cand, cur)
            if got != stage.output_shape:
                raise ShapeMismatch(
                    f"stage {i} candidate {j}: produces {got}, stage declares {stage.output_shape}",
                    stage_index=i, candidate_index=j)
        cur = stage.output_shape
        shapes.append(cur)
    for op in net.head:
        cur = output_shape(op, cur)
        shapes.append(cur)
    return shapes


@dataclass(frozen=True)
class Finding:
    path: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple

    def __post_init__(self):
        object.__setattr__(self, "findings", tuple(self.findings))

    @property
    def ok(self) -> bool:
        return not self.findings


def validate(net: SuperNet) -> ValidationReport:
    """Structural check of a supernet; findings are data, nothing raises."""
    findings = []
    if net.task is Task.Classification and net.num_classes is None:
        findings.append(Finding("num_classes", "classification net requires num_classes"))
    if net.task is Task.SuperResolution and net.sr_scale is None:
        findings.append(Finding("sr_scale", "super-resolution net requires sr_scale"))
    if not net.stages:
        findings.append(Finding("stages", "supernet must have at least one stage"))

    cur = net.input_shape
    for i, op in enumerate(net.stem):
        try:
            cur = output_shape(op, cur)
        except InvalidOp as e:
            findings.append(Finding(f"stem[{i}]", str(e)))
            return ValidationReport(findings)
    for i, stage in enumerate(net.stages):
        if not stage.candidates:
            findings.append(Finding(f"stages[{i}]", "stage has no candidates"))
            continue
        if cur != stage.input_shape:
            findings.append(Finding(
                f"stages[{i}]", f"declared input {stage.input_shape}, chain produces {cur}"))
        keys = set()
        for j, cand in enumerate(stage.candidates):
            path = f"stages[{i}].candidates[{j}]"
            try:
                got = output_shape(cand, stage.input_shape)
            except InvalidOp as e:
                findings.append(Finding(path, str(e)))
                continue
            if got != stage.output_shape:
                findings.append(Finding(
                    path, f"produces {got}, stage declares {stage.output_shape}"))
            key = canonical_key(cand, stage.input_shape)
            if key in keys:
                findings.append(Finding(path, f"duplicate candidate key {key}"))
            keys.add(key)
        cur = stage.output_shape
    for i, op in enumerate(net.head):
        try:
            cur = output_shape(op, cur)
        except InvalidOp as e:
            findings.append(Finding(f"head[{i}]", str(e)))
            return ValidationReport(findings)
    return ValidationReport(findings)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

_OP_FIELDS = ("kind", "kernel", "stride", "in_channels", "out_channels",
              "expand_ratio", "activation_slope", "scale_factor")


def _op_to_json(op: OperatorSpec) -> dict:
    return {
        "kind": op.kind.value,
        "kernel": op.kernel,
        "stride": op.stride,
        "in_channels": op.in_channels,
        "out_channels": op.out_channels,
        "expand_ratio": _fmt_fraction(op.expand_ratio),
        "activation_slope": op.activation_slope,
        "scale_factor": op.scale_factor,
    }


def _parse_fraction(v, path: str) -> Fraction:
    try:
        if isinstance(v, bool):
            raise ValueError
        if isinstance(v, int):
            return Fraction(v)
        if isinstance(v, str):
            return Fraction(v)
        if isinstance(v, float) and v == int(v):
            return Fraction(int(v))
    except (ValueError, ZeroDivisionError):
        pass
    raise ParseError(f"bad expand_ratio {v!r}", path)


def _op_from_json(obj, path: str) -> OperatorSpec:
    if not isinstance(obj, dict):
        raise ParseError("operator must be an object", path)
    unknown = set(obj) - set(_OP_FIELDS)
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", path)
    for req in ("kind", "in_channels", "out_channels"):
        if req not in obj:
            raise ParseError(f"missing field {req!r}", path)
    try:
        kind = OpKind(obj["kind"])
    except ValueError:
        raise ParseError(f"unknown operator kind {obj['kind']!r}", path)
    def _int(name, default):
        v = obj.get(name, default)
        if not isinstance(v, int) or isinstance(v, bool):
            raise ParseError(f"field {name!r} must be an integer, got {v!r}", path)
        return v
    op = OperatorSpec(
        kind=kind,
        in_channels=_int("in_channels", None),
        out_channels=_int("out_channels", None),
        kernel=_int("kernel", 1),
        stride=_int("stride", 1),
        expand_ratio=_parse_fraction(obj.get("expand_ratio", 1), path),
        activation_slope=float(obj.get("activation_slope", 0.0)),
        scale_factor=_int("scale_factor", 1),
    )
    try:
        op.validate_fields()
    except InvalidOp as e:
        raise ParseError(str(e), path)
    return op


def _shape_from_json(v, path: str) -> TensorShape:
    if (not isinstance(v, list) or len(v) != 3
            or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v)):
        raise ParseError(f"input_shape must be [C,H,W] positive integers, got {v!r}", path)
    return TensorShape(*v)


def serialize(net: Net) -> str:
    """Net -> canonical JSON text (trailing newline, sorted layout fixed by hand)."""
    if isinstance(net, SuperNet):
        doc = {
            "task": net.task.value,
            "input_shape": net.input_shape.as_list(),
            "stem": [_op_to_json(o) for o in net.stem],
            "stages": [{"candidates": [_op_to_json(c) for c in s.candidates]}
                       for s in net.stages],
            "head": [_op_to_json(o) for o in net.head],
        }
    elif isinstance(net, CompactNet):
        doc = {
            "task": net.task.value,
            "input_shape": net.input_shape.as_list(),
            "layers": [_op_to_json(o) for o in net.layers],
        }
        if net.chosen_indices:
            doc["chosen_indices"] = list(net.chosen_indices)
        if net.tie_stages:
            doc["tie_stages"] = list(net.tie_stages)
    else:
        raise TypeError(f"cannot serialize {type(net).__name__}")
    if net.task is Task.Classification:
        doc["num_classes"] = net.num_classes
    else:
        doc["sr_scale"] = net.sr_scale
    return json.dumps(doc, indent=2) + "\n"


def _build_supernet(doc) -> SuperNet:
    allowed = {"task", "input_shape", "stem", "stages", "head", "num_classes", "sr_scale"}
    unknown = set(doc) - allowed
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", "$")
    for req in ("task", "input_shape", "stages"):
        if req not in doc:
            raise ParseError(f"missing field {req!r}", "$")
    try:
        task = Task(doc["task"])
    except ValueError:
        raise ParseError(f"unknown task {doc['task']!r}", "task")
    input_shape = _shape_from_json(doc["input_shape"], "input_shape")
    stem = [_op_from_json(o, f"stem[{i}]") for i, o in enumerate(doc.get("stem", []))]
    head = [_op_from_json(o, f"head[{i}]") for i, o in enumerate(doc.get("head", []))]
    if not isinstance(doc["stages"], list):
        raise ParseError("stages must be a list", "stages")

    # Stage input/output shapes are reconstructed by chaining through the file.
    cur = input_shape
    for op in stem:
        cur = output_shape(op, cur)
    stages = []
    for i, sobj in enumerate(doc["stages"]):
        if not isinstance(sobj, dict) or set(sobj) != {"candidates"}:
            raise ParseError("stage must be {'candidates': [...]}", f"stages[{i}]")
        cands = [_op_from_json(o, f"stages[{i}].candidates[{j}]")
                 for j, o in enumerate(sobj["candidates"])]
        if not cands:
            raise ParseError("stage has no candidates", f"stages[{i}]")
        try:
            out = output_shape(cands[0], cur)
        except InvalidOp as e:
            raise ParseError(str(e), f"stages[{i}].candidates[0]")
        stages.append(MixedStage(tuple(cands), cur, out))
        cur = out
    return SuperNet(task=task, input_shape=input_shape, stem=tuple(stem),
                    stages=tuple(stages), head=tuple(head),
                    num_classes=doc.get("num_classes"), sr_scale=doc.get("sr_scale"))


def _build_compactnet(doc) -> CompactNet:
    allowed = {"task", "input_shape", "layers", "num_classes", "sr_scale",
               "chosen_indices", "tie_stages"}
    unknown = set(doc) - allowed
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", "$")
    try:
        task = Task(doc["task"])
    except (KeyError, ValueError):
        raise ParseError("missing or unknown task", "task")
    input_shape = _shape_from_json(doc.get("input_shape"), "input_shape")
    layers = [_op_from_json(o, f"layers[{i}]") for i, o in enumerate(doc["layers"])]
    return CompactNet(task=task, input_shape=input_shape, layers=tuple(layers),
                      num_classes=doc.get("num_classes"), sr_scale=doc.get("sr_scale"),
                      chosen_indices=tuple(doc.get("chosen_indices", [])),
                      tie_stages=tuple(doc.get("tie_stages", [])))


def deserialize(text: str) -> Net:
    """JSON text -> SuperNet (has 'stages') or CompactNet (has 'layers')."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e}", "$")
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", "$")
    if "stages" in doc:
        return _build_supernet(doc)
    if "layers" in doc:
        return _build_compactnet(doc)
    raise ParseError("missing field 'stages'", "$")


def load_net(path) -> Net:
    with open(path, "r", encoding="utf-8") as fh:
        return deserialize(fh.read())


def save_net(net: Net, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(net))
