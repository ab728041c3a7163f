"""Layer kernels with shape validation and backend selection.

The compiled core (``_ckernels``) is used when it was built; otherwise the
numpy fallback. ``MLCAPSULE_KERNELS=python`` or ``=native`` forces a choice at
import time and :func:`use_backend` switches at run time.

Tensors are float32 numpy arrays. Image tensors are channel-first ``(C, H, W)``;
conv filters are ``(F, C, kh, kw)``, depthwise filters ``(C, kh, kw)`` and dense
weights ``(out, in)``. Convolution is cross-correlation (no filter flip).
"""

from __future__ import annotations

import contextlib
import os
from types import ModuleType

import numpy as np

from ..errors import ConfigError, ShapeMismatch
from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

F32 = np.float32
PROB_FLOOR = 1e-12


def available_backends() -> list[str]:
    return ["native", "python"] if _ckernels is not None else ["python"]


def _pick(name: str | None) -> ModuleType:
    if name in (None, "", "auto"):
        return _ckernels or _pykernels
    if name == "python":
        return _pykernels
    if name == "native":
        if _ckernels is None:
            raise ConfigError("compiled kernels are not built; reinstall with Cython available")
        return _ckernels
    raise ConfigError(f"unknown kernel backend {name!r}")


_backend = _pick(os.environ.get("MLCAPSULE_KERNELS"))


def backend() -> str:
    return _backend.NAME


def use_backend(name: str) -> None:
    global _backend
    _backend = _pick(name)


@contextlib.contextmanager
def backend_scope(name: str):
    global _backend
    prev = _backend
    _backend = _pick(name)
    try:
        yield
    finally:
        _backend = prev


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=F32)


def resolve_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        return (kh - 1) // 2, (kw - 1) // 2
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding), int(padding)
    if isinstance(padding, (tuple, list)) and len(padding) == 2:
        return int(padding[0]), int(padding[1])
    raise ShapeMismatch(f"bad padding {padding!r}")


def conv_out_dim(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def dense(x, w, b) -> np.ndarray:
    x, w, b = _f32(x).reshape(-1), _f32(w), _f32(b)
    if w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"dense: x{x.shape} W{w.shape} b{b.shape}")
    return _backend.dense(x, w, b)


def _check_image(x, where):
    if x.ndim != 3:
        raise ShapeMismatch(f"{where}: expected (C, H, W) input, got {x.shape}")


def _check_window(h, w, kh, kw, stride, ph, pw, where):
    if stride < 1 or kh < 1 or kw < 1 or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeMismatch(f"{where}: {kh}x{kw}/{stride} window does not fit {h}x{w} (pad {ph},{pw})")


def conv2d(x, filters, bias, stride: int = 1, padding="valid") -> np.ndarray:
    x, w, b = _f32(x), _f32(filters), _f32(bias)
    _check_image(x, "conv2d")
    if w.ndim != 4 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: x{x.shape} filters{w.shape} bias{b.shape}")
    ph, pw = resolve_padding(padding, w.shape[2], w.shape[3])
    _check_window(x.shape[1], x.shape[2], w.shape[2], w.shape[3], stride, ph, pw, "conv2d")
    return _backend.conv2d(x, w, b, int(stride), ph, pw)


def depthwise_conv2d(x, filters, bias, stride: int = 1, padding="valid") -> np.ndarray:
    x, w, b = _f32(x), _f32(filters), _f32(bias)
    _check_image(x, "depthwise_conv2d")
    if w.ndim != 3 or w.shape[0] != x.shape[0] or b.shape != (x.shape[0],):
        raise ShapeMismatch(f"depthwise_conv2d: x{x.shape} filters{w.shape} bias{b.shape}")
    ph, pw = resolve_padding(padding, w.shape[1], w.shape[2])
    _check_window(x.shape[1], x.shape[2], w.shape[1], w.shape[2], stride, ph, pw, "depthwise_conv2d")
    return _backend.depthwise_conv2d(x, w, b, int(stride), ph, pw)


def maxpool(x, size: int = 2, stride: int | None = None) -> np.ndarray:
    x = _f32(x)
    _check_image(x, "maxpool")
    stride = size if stride is None else stride
    _check_window(x.shape[1], x.shape[2], size, size, stride, 0, 0, "maxpool")
    return _backend.maxpool2d(x, int(size), int(stride))


def relu(x) -> np.ndarray:
    return np.maximum(_f32(x), F32(0))


def softmax(x) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64).reshape(-1)
    z = np.exp(z - z.max())
    return (z / z.sum()).astype(F32)


def min_sq_distance(points, q) -> float:
    points, q = _f32(points), _f32(q).reshape(-1)
    if points.ndim != 2 or (points.shape[0] and points.shape[1] != q.shape[0]):
        raise ShapeMismatch(f"archive of shape {points.shape} vs query of length {q.shape[0]}")
    return float(_backend.min_sq_distance(points, q))
