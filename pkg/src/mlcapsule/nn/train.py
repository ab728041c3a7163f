"""Minimal trainer for dense/relu/softmax networks.

Used to produce desk-scale models (deliberately overfit ones for the
membership experiments, the reverse-engineering detector). Arithmetic runs in
float64 and the result is rounded to float32 parameters.
"""

from __future__ import annotations

import logging

import numpy as np

from ..errors import DivergenceError, SchemaError, ShapeMismatch
from .model import ModelDef, ModelSecrets

log = logging.getLogger(__name__)

TRAINABLE = ("dense", "relu", "softmax")


def _check_arch(arch: ModelDef) -> None:
    bad = [s.kind for s in arch.layers if s.kind not in TRAINABLE]
    if bad:
        raise SchemaError(f"trainer supports dense/relu/softmax only, got {bad}")
    if any(s.kind == "softmax" for s in arch.layers[:-1]):
        raise SchemaError("softmax is only allowed as the final layer")


def _check_data(arch: ModelDef, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[1:] != arch.input_shape and X.reshape(len(X), -1).shape[1] != int(np.prod(arch.input_shape)):
        raise ShapeMismatch(f"samples of shape {X.shape[1:]}, model expects {arch.input_shape}")
    if y.shape != (len(X),) or (len(y) and (y.min() < 0 or y.max() >= arch.classes)):
        raise ShapeMismatch("labels must be class indices, one per sample")
    return X.reshape(len(X), -1), y


def init_params(arch: ModelDef, rng: np.random.Generator) -> list[list[np.ndarray]]:
    params = []
    for r in arch.parameterized:
        (m, n), _ = r.param_shapes
        params.append([rng.normal(0.0, np.sqrt(2.0 / n), (m, n)), np.zeros(m)])
    return params


def _forward(arch: ModelDef, params, X):
    acts, a, it = [X], X, iter(params)
    for spec in arch.layers:
        if spec.kind == "dense":
            W, b = next(it)
            a = a @ W.T + b
        elif spec.kind == "relu":
            a = np.maximum(a, 0.0)
        else:
            z = a - a.max(axis=1, keepdims=True)
            e = np.exp(z)
            a = e / e.sum(axis=1, keepdims=True)
        acts.append(a)
    return acts


def loss_and_grads(arch: ModelDef, params, X, y):
    """Mean cross-entropy and its gradient for every parameter."""
    acts = _forward(arch, params, X)
    p = acts[-1]
    n = len(X)
    loss = -np.log(np.clip(p[np.arange(n), y], 1e-300, None)).mean()
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    grad /= n
    grads = [None] * len(params)
    k = len(params)
    # softmax + cross-entropy gradient is already in `grad`
    for li in range(len(arch.layers) - 2, -1, -1):
        spec, a_in, a_out = arch.layers[li], acts[li], acts[li + 1]
        if spec.kind == "dense":
            k -= 1
            W, _ = params[k]
            grads[k] = [grad.T @ a_in, grad.sum(axis=0)]
            grad = grad @ W
        elif spec.kind == "relu":
            grad = grad * (a_out > 0)
    return loss, grads


def train_toy(X, y, arch: ModelDef, epochs: int = 200, lr: float = 0.1, rng_seed: int = 0,
              batch_size: int = 32) -> ModelSecrets:
    _check_arch(arch)
    X, y = _check_data(arch, X, y)
    rng = np.random.default_rng(rng_seed)
    params = init_params(arch, rng)
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(arch, params, X[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch}")
            for p, g in zip(params, grads):
                p[0] -= lr * g[0]
                p[1] -= lr * g[1]
        if not all(np.all(np.isfinite(t)) for p in params for t in p):
            raise DivergenceError(f"non-finite parameters after epoch {epoch}")
    secrets = ModelSecrets([(W.astype(np.float32), b.astype(np.float32)) for W, b in params])
    if epochs:
        log.info("train accuracy %.4f after %d epochs", accuracy(arch, secrets, X, y), epochs)
    return secrets


def to_float64(secrets: ModelSecrets) -> list[list[np.ndarray]]:
    return [[W.astype(np.float64), b.astype(np.float64)] for W, b in secrets.params]


def posteriors(arch: ModelDef, secrets: ModelSecrets, X) -> np.ndarray:
    """Batched forward pass for dense-only models (float64)."""
    _check_arch(arch)
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    return _forward(arch, to_float64(secrets), X)[-1]


def accuracy(arch: ModelDef, secrets: ModelSecrets, X, y) -> float:
    if len(X) == 0:
        return float("nan")
    return float((posteriors(arch, secrets, X).argmax(axis=1) == np.asarray(y)).mean())


def numeric_grads(arch: ModelDef, params, X, y, epsilon: float):
    out = []
    for W, b in params:
        pair = []
        for t in (W, b):
            g = np.zeros_like(t)
            flat, gflat = t.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                lp, _ = loss_and_grads(arch, params, X, y)
                flat[i] = orig - epsilon
                lm, _ = loss_and_grads(arch, params, X, y)
                flat[i] = orig
                gflat[i] = (lp - lm) / (2 * epsilon)
            pair.append(g)
        out.append(pair)
    return out


REL_ERR_FLOOR = 1e-5


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), REL_ERR_FLOOR)


def grad_check(arch: ModelDef, X, y, epsilon: float = 1e-5, params=None, rng_seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    Relative error is ``|a - n| / max(|a| + |n|, 1e-5)``; the floor keeps
    entries whose true gradient is zero from dividing roundoff by roundoff.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    _check_arch(arch)
    X, y = _check_data(arch, X, y)
    if params is None:
        params = init_params(arch, np.random.default_rng(rng_seed))
    elif isinstance(params, ModelSecrets):
        params = to_float64(params)
    _, analytic = loss_and_grads(arch, params, X, y)
    numeric = numeric_grads(arch, params, X, y, epsilon)
    return max(float(relative_error(a, n).max())
               for pa, pn in zip(analytic, numeric) for a, n in zip(pa, pn))
