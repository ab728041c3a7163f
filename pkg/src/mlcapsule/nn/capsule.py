"""Sealed layer-wise inference.

Each parameterized layer travels as its own SealedBlob. Running a capsule
layer allocates the plaintext buffer, streams the sealed chunks in and
authenticates them, computes the layer on views into that buffer and wipes it
before moving on, so at most one layer's parameters are ever in the clear.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import crypto
from ..errors import MemoryBudgetExceeded, SchemaError, ShapeMismatch
from .model import ModelDef, ModelSecrets, ResolvedLayer, apply_layer
from .weights import decode_tensors, encode_tensors

DEFAULT_MEMORY_BUDGET = 90 * crypto.MIB


@dataclass(frozen=True)
class CapsuleLayer:
    layer: ResolvedLayer
    blob: bytes | None = None

    @property
    def spec(self):
        return self.layer.spec


def seal_layer(layer: ResolvedLayer, params: Sequence[np.ndarray], seal_key: crypto.SealKey,
               measurement: bytes, chunk_size: int = crypto.DEFAULT_CHUNK_SIZE) -> CapsuleLayer:
    if tuple(tuple(p.shape) for p in params) != layer.param_shapes:
        raise SchemaError(f"layer {layer.index}: parameter shapes do not match")
    if not layer.param_shapes:
        return CapsuleLayer(layer)
    return CapsuleLayer(layer, crypto.seal(seal_key, measurement, encode_tensors(params), chunk_size))


def seal_model(model_def: ModelDef, secrets: ModelSecrets, seal_key: crypto.SealKey,
               measurement: bytes, chunk_size: int = crypto.DEFAULT_CHUNK_SIZE) -> list[CapsuleLayer]:
    secrets.check(model_def)
    params = iter(secrets.params)
    return [seal_layer(r, next(params) if r.param_shapes else (), seal_key, measurement, chunk_size)
            for r in model_def.resolved]


def working_set(layer: CapsuleLayer) -> int:
    """Bytes the enclave holds while running ``layer``."""
    act = 4 * (int(np.prod(layer.layer.in_shape)) + int(np.prod(layer.layer.out_shape)))
    if layer.blob is None:
        return act
    hdr = crypto.seal_header(layer.blob)
    return act + hdr.total_len + min(hdr.chunk_size, max(hdr.total_len, 1)) + 15


def run_layer(layer: CapsuleLayer, seal_key: crypto.SealKey, measurement: bytes, x: np.ndarray,
              budget: int = DEFAULT_MEMORY_BUDGET, scratch_log: list | None = None) -> np.ndarray:
    need = working_set(layer)
    if need > budget:
        raise MemoryBudgetExceeded(
            f"layer {layer.layer.index} ({layer.spec.kind}) needs {need} bytes, budget is {budget}")
    if layer.blob is None:
        return apply_layer(layer.layer, x)
    buf = bytearray(crypto.seal_header(layer.blob).total_len)
    if scratch_log is not None:
        scratch_log.append(buf)
    try:
        crypto.unseal_into(seal_key, measurement, layer.blob, buf)
        params = decode_tensors(buf, copy=False)
        if tuple(tuple(p.shape) for p in params) != layer.layer.param_shapes:
            raise SchemaError(f"layer {layer.layer.index}: sealed parameters have wrong shapes")
        out = apply_layer(layer.layer, x, params)
        del params
        return out
    finally:
        crypto.wipe(buf)


def capsule_forward(layers: Sequence[CapsuleLayer], seal_key: crypto.SealKey, measurement: bytes, x,
                    budget: int = DEFAULT_MEMORY_BUDGET, scratch_log: list | None = None) -> np.ndarray:
    if not layers:
        raise SchemaError("capsule model has no layers")
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != layers[0].layer.in_shape:
        raise ShapeMismatch(f"input shape {x.shape}, model expects {layers[0].layer.in_shape}")
    for layer in layers:
        x = run_layer(layer, seal_key, measurement, x, budget, scratch_log)
    return x
