"""Public model definitions, secret parameters and the plaintext forward pass.

A model definition is a JSON document::

    {
      "format": "mlcapsule-modeldef", "version": 1,
      "input_shape": [1, 28, 28],
      "classes": 10,
      "layers": [
        {"kind": "conv2d", "filters": 10, "kernel": [5, 5], "stride": 1, "padding": "valid"},
        {"kind": "relu"},
        {"kind": "maxpool", "size": 2},
        {"kind": "dense", "units": 10},
        {"kind": "softmax"}
      ]
    }

``depthwise_conv2d`` takes ``kernel``/``stride``/``padding``; ``maxpool`` takes
``size`` and optional ``stride``. ``dense`` flattens its input. The last layer
must be ``softmax`` and produce ``classes`` outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..crypto import digest
from ..errors import ParseError, SchemaError, ShapeMismatch
from . import kernels as K
from .weights import decode_tensors, encode_tensors, encoded_size

KINDS = ("dense", "conv2d", "depthwise_conv2d", "relu", "maxpool", "softmax")
PARAMETERIZED = ("dense", "conv2d", "depthwise_conv2d")
DOC_FORMAT = "mlcapsule-modeldef"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None
    filters: int | None = None
    kernel: tuple[int, int] | None = None
    stride: int = 1
    padding: str | int = "valid"
    size: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown layer kind {self.kind!r}")
        if self.kernel is not None:
            object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))

    @property
    def has_params(self) -> bool:
        return self.kind in PARAMETERIZED

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "dense":
            d["units"] = self.units
        elif self.kind in ("conv2d", "depthwise_conv2d"):
            if self.kind == "conv2d":
                d["filters"] = self.filters
            d.update(kernel=list(self.kernel), stride=self.stride, padding=self.padding)
        elif self.kind == "maxpool":
            d.update(size=self.size, stride=self.stride)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        try:
            kind = d["kind"]
            if kind == "maxpool":
                return cls(kind, size=int(d["size"]), stride=int(d.get("stride", d["size"])))
            if kind == "dense":
                return cls(kind, units=int(d["units"]))
            if kind in ("conv2d", "depthwise_conv2d"):
                return cls(kind, filters=int(d["filters"]) if kind == "conv2d" else None,
                           kernel=tuple(d["kernel"]), stride=int(d.get("stride", 1)),
                           padding=d.get("padding", "valid"))
            return cls(kind)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad layer entry {d!r}: {exc}") from None


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def conv2d(filters: int, kernel: int | tuple[int, int], stride: int = 1, padding="valid") -> LayerSpec:
    k = (kernel, kernel) if isinstance(kernel, int) else kernel
    return LayerSpec("conv2d", filters=filters, kernel=k, stride=stride, padding=padding)


def depthwise_conv2d(kernel: int | tuple[int, int], stride: int = 1, padding="valid") -> LayerSpec:
    k = (kernel, kernel) if isinstance(kernel, int) else kernel
    return LayerSpec("depthwise_conv2d", kernel=k, stride=stride, padding=padding)


def maxpool(size: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", size=size, stride=stride or size)


RELU = LayerSpec("relu")
SOFTMAX = LayerSpec("softmax")


@dataclass(frozen=True)
class ResolvedLayer:
    index: int
    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    param_shapes: tuple[tuple[int, ...], ...]

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes)


def _resolve_one(i: int, spec: LayerSpec, shape: tuple[int, ...]) -> ResolvedLayer:
    def fail(msg):
        raise SchemaError(f"layer {i} ({spec.kind}): {msg}")

    if spec.kind == "dense":
        if not spec.units or spec.units < 1:
            fail("units must be positive")
        n = int(np.prod(shape))
        return ResolvedLayer(i, spec, shape, (spec.units,), ((spec.units, n), (spec.units,)))
    if spec.kind in ("relu", "softmax"):
        if spec.kind == "softmax" and len(shape) != 1:
            fail(f"softmax needs a flat input, got {shape}")
        return ResolvedLayer(i, spec, shape, shape, ())
    if len(shape) != 3:
        fail(f"needs a (C, H, W) input, got {shape}")
    c, h, w = shape
    if spec.kind == "maxpool":
        size, stride = spec.size or 0, spec.stride
        if size < 1 or stride < 1 or size > h or size > w:
            fail(f"pool {size}/{stride} does not fit {h}x{w}")
        return ResolvedLayer(i, spec, shape, (c, (h - size) // stride + 1, (w - size) // stride + 1), ())
    kh, kw = spec.kernel or (0, 0)
    try:
        ph, pw = K.resolve_padding(spec.padding, kh, kw)
    except ShapeMismatch as exc:
        fail(str(exc))
    if kh < 1 or kw < 1 or spec.stride < 1 or h + 2 * ph < kh or w + 2 * pw < kw:
        fail(f"{kh}x{kw}/{spec.stride} window does not fit {h}x{w}")
    ho = K.conv_out_dim(h, kh, spec.stride, ph)
    wo = K.conv_out_dim(w, kw, spec.stride, pw)
    if spec.kind == "conv2d":
        if not spec.filters or spec.filters < 1:
            fail("filters must be positive")
        f = spec.filters
        return ResolvedLayer(i, spec, shape, (f, ho, wo), ((f, c, kh, kw), (f,)))
    return ResolvedLayer(i, spec, shape, (c, ho, wo), ((c, kh, kw), (c,)))


@dataclass(frozen=True)
class ModelDef:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    classes: int
    resolved: tuple[ResolvedLayer, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise SchemaError("model has no layers")
        if any(d < 1 for d in self.input_shape):
            raise SchemaError(f"bad input shape {self.input_shape}")
        shape, resolved = self.input_shape, []
        for i, spec in enumerate(self.layers):
            r = _resolve_one(i, spec, shape)
            resolved.append(r)
            shape = r.out_shape
        if self.layers[-1].kind != "softmax":
            raise SchemaError("last layer must be softmax")
        if shape != (self.classes,):
            raise SchemaError(f"model outputs {shape}, declared {self.classes} classes")
        object.__setattr__(self, "resolved", tuple(resolved))

    @property
    def parameterized(self) -> list[ResolvedLayer]:
        return [r for r in self.resolved if r.param_shapes]

    def param_shapes(self) -> list[tuple[int, ...]]:
        return [s for r in self.resolved for s in r.param_shapes]

    def param_count(self) -> int:
        return sum(r.param_count for r in self.resolved)

    def secrets_nbytes(self) -> int:
        """Length of the MLCW encoding of this model's parameters."""
        return encoded_size(self.param_shapes())

    def to_dict(self) -> dict:
        return {"format": DOC_FORMAT, "version": 1, "input_shape": list(self.input_shape),
                "classes": self.classes, "layers": [s.to_dict() for s in self.layers]}

    def to_json(self, indent: int | None = None) -> str:
        if indent is None:
            return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return json.dumps(self.to_dict(), indent=indent)

    def to_bytes(self) -> bytes:
        return self.to_json().encode()

    def digest(self) -> bytes:
        return digest(self.to_bytes())

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDef":
        if not isinstance(d, dict) or d.get("format") != DOC_FORMAT:
            raise SchemaError("not a model definition document")
        if d.get("version") != 1:
            raise SchemaError(f"unsupported model definition version {d.get('version')}")
        try:
            layers = [LayerSpec.from_dict(x) for x in d["layers"]]
            return cls(tuple(d["input_shape"]), tuple(layers), int(d["classes"]))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"model definition missing {exc}") from None

    @classmethod
    def from_json(cls, text: str | bytes) -> "ModelDef":
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ParseError(f"model definition is not valid JSON: {exc}") from None


def sequential(input_shape: Sequence[int], *layers: LayerSpec) -> ModelDef:
    """Build a ModelDef, inferring the class count from the last dense layer."""
    units = [l.units for l in layers if l.kind == "dense"]
    return ModelDef(tuple(input_shape), tuple(layers), units[-1] if units else int(np.prod(input_shape)))


@dataclass
class ModelSecrets:
    """Weights and biases, one ``(W, b)`` pair per parameterized layer."""

    params: list[tuple[np.ndarray, np.ndarray]]

    def tensors(self) -> list[np.ndarray]:
        return [t for pair in self.params for t in pair]

    def check(self, model_def: ModelDef) -> "ModelSecrets":
        want = model_def.param_shapes()
        got = [tuple(t.shape) for t in self.tensors()]
        if want != got:
            raise SchemaError(f"parameter shapes {got} do not match model definition {want}")
        return self

    def to_bytes(self) -> bytes:
        return encode_tensors(self.tensors())

    @classmethod
    def from_tensors(cls, tensors: list[np.ndarray]) -> "ModelSecrets":
        if len(tensors) % 2:
            raise SchemaError("odd number of parameter tensors")
        return cls([(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)])

    @classmethod
    def from_bytes(cls, data, model_def: ModelDef, copy: bool = True) -> "ModelSecrets":
        return cls.from_tensors(decode_tensors(data, copy=copy)).check(model_def)

    @classmethod
    def random(cls, model_def: ModelDef, rng: np.random.Generator, scale: float | None = None) -> "ModelSecrets":
        params = []
        for r in model_def.parameterized:
            wshape, bshape = r.param_shapes
            fan_in = int(np.prod(wshape[1:]))
            s = scale if scale is not None else np.sqrt(2.0 / max(fan_in, 1))
            params.append((rng.normal(0, s, wshape).astype(np.float32),
                           rng.normal(0, 0.1, bshape).astype(np.float32)))
        return cls(params)


def apply_layer(r: ResolvedLayer, x: np.ndarray, params: Sequence[np.ndarray] = ()) -> np.ndarray:
    spec = r.spec
    if spec.kind == "dense":
        return K.dense(x, *params)
    if spec.kind == "conv2d":
        return K.conv2d(x, params[0], params[1], spec.stride, spec.padding)
    if spec.kind == "depthwise_conv2d":
        return K.depthwise_conv2d(x, params[0], params[1], spec.stride, spec.padding)
    if spec.kind == "relu":
        return K.relu(x)
    if spec.kind == "maxpool":
        return K.maxpool(x, spec.size, spec.stride)
    return K.softmax(x)


def check_input(model_def: ModelDef, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != model_def.input_shape:
        raise ShapeMismatch(f"input shape {x.shape}, model expects {model_def.input_shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeMismatch("input contains non-finite values")
    return x


def forward_layers(model_def: ModelDef, secrets: ModelSecrets, x) -> Iterator[np.ndarray]:
    """Yield the activation after each layer."""
    x = check_input(model_def, x)
    params = iter(secrets.params)
    for r in model_def.resolved:
        x = apply_layer(r, x, next(params) if r.param_shapes else ())
        yield x


def forward(model_def: ModelDef, secrets: ModelSecrets, x) -> np.ndarray:
    out = None
    for out in forward_layers(model_def, secrets, x):
        pass
    return out


def predict(model_def: ModelDef, secrets: ModelSecrets, xs) -> np.ndarray:
    return np.stack([forward(model_def, secrets, x) for x in xs])


def save_model(model_def: ModelDef, secrets: ModelSecrets, weights_path, def_path) -> None:
    secrets.check(model_def)
    Path(weights_path).write_bytes(secrets.to_bytes())
    Path(def_path).write_text(model_def.to_json(indent=2) + "\n")


def export_weights(model_def: ModelDef, secrets: ModelSecrets, weights_path, def_path) -> None:
    save_model(model_def, secrets, weights_path, def_path)


def import_weights(weights_path, def_path) -> tuple[ModelDef, ModelSecrets]:
    model_def = ModelDef.from_json(Path(def_path).read_bytes())
    return model_def, ModelSecrets.from_bytes(Path(weights_path).read_bytes(), model_def)
