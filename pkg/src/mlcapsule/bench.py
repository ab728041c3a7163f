"""Capsule-versus-plain timing for single layers and whole networks.

A capsule run covers the five steps of a sealed layer: allocate the plaintext
buffer, copy the sealed blob in, unseal it, compute, wipe and free. A plain run
is the compute alone on weights already in memory. Runs are interleaved so
slow drift hits both columns equally; each result feeds a sink so no work can
be skipped. Reference numbers measured on SGX hardware ride along in every
row and are never compared against.
"""

from __future__ import annotations

import csv
import io
import os
import platform
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import crypto
from .errors import ConfigError
from .nn import kernels, zoo
from .nn.capsule import DEFAULT_MEMORY_BUDGET, CapsuleLayer, capsule_forward, run_layer, seal_layer, seal_model, working_set
from .nn.model import SOFTMAX, LayerSpec, ModelDef, ModelSecrets, apply_layer, conv2d, dense, depthwise_conv2d, forward, sequential

DEFAULT_REPS = 100
DEFAULT_WARMUP = 5

# (capsule ms, plain ms, factor) measured on SGX with -O3
SGX_DENSE = {256: (0.234, 0.020), 512: (0.865, 0.062), 1024: (4.035, 0.244),
               2048: (26.940, 1.090), 4096: (96.823, 4.648)}
SGX_CONV = {(64, 224): (80, 66, 1.21), (512, 28): (61, 51, 1.20), (512, 14): (30, 13, 2.31)}
SGX_DEPTHWISE = {(64, 224): (41, 27, 1.52), (512, 28): (7, 7, 1.00), (512, 14): (2, 2, 1.00)}
SGX_NETWORKS = {"vgg16": (1145, 736, 1.55), "mobilenet": (427, 197, 2.16)}
SGX_DETECTOR_MS = 0.832

_sink = 0.0


def _consume(out) -> None:
    global _sink
    a = np.asarray(out)
    _sink += float(a.flat[0]) if a.size else 0.0


@dataclass
class BenchRow:
    table: str
    label: str
    capsule_ms: float | None
    capsule_std: float | None
    plain_ms: float | None
    plain_std: float | None
    reps: int
    status: str = "ok"
    working_set: int = 0
    sgx_capsule_ms: float | None = None
    sgx_plain_ms: float | None = None
    sgx_factor: float | None = None

    @property
    def factor(self) -> float | None:
        if self.capsule_ms is None or not self.plain_ms:
            return None
        return self.capsule_ms / self.plain_ms

    def as_dict(self) -> dict:
        d = asdict(self)
        d["factor"] = self.factor
        return d


@dataclass
class BenchReport:
    rows: list[BenchRow]
    reps: int
    warmup: int
    env: dict = field(default_factory=dict)

    COLUMNS = ("table", "label", "status", "capsule_ms", "capsule_std", "plain_ms", "plain_std", "factor",
               "reps", "working_set", "sgx_capsule_ms", "sgx_plain_ms", "sgx_factor")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(v) for k, v in r.as_dict().items()})
        return buf.getvalue()

    def to_markdown(self) -> str:
        head = ["table", "config", "capsule ms", "plain ms", "factor", "SGX reference capsule ms",
                "SGX reference plain ms", "SGX reference factor"]
        lines = [f"{self.reps} timed runs after {self.warmup} warmups; kernels: {self.env.get('kernels', '?')}", "",
                 "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for r in self.rows:
            if r.status != "ok":
                cap = plain = fac = r.status
            else:
                cap = f"{r.capsule_ms:.3f} ± {r.capsule_std:.3f}"
                plain = f"{r.plain_ms:.3f} ± {r.plain_std:.3f}"
                fac = f"{r.factor:.2f}"
            lines.append("| " + " | ".join([r.table, r.label, cap, plain, fac, _fmt(r.sgx_capsule_ms) or "-",
                                             _fmt(r.sgx_plain_ms) or "-", _fmt(r.sgx_factor) or "-"]) + " |")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def environment() -> dict:
    import scipy

    return {"python": sys.version.split()[0], "numpy": np.__version__, "scipy": scipy.__version__,
            "machine": platform.machine(), "processor": platform.processor() or platform.machine(),
            "cpus": os.cpu_count(), "kernels": kernels.backend()}


def time_pair(capsule: Callable[[], object], plain: Callable[[], object], reps: int = DEFAULT_REPS,
              warmup: int = DEFAULT_WARMUP) -> tuple[list[float], list[float]]:
    """Interleaved timings in milliseconds; exactly ``reps`` samples per side after ``warmup`` discards."""
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if warmup < DEFAULT_WARMUP:
        raise ConfigError(f"at least {DEFAULT_WARMUP} warmup runs are required")
    for _ in range(warmup):
        _consume(capsule())
        _consume(plain())
    cap, pl = [], []
    clock = time.perf_counter_ns
    for _ in range(reps):
        t0 = clock()
        out = capsule()
        t1 = clock()
        _consume(out)
        t2 = clock()
        out = plain()
        t3 = clock()
        _consume(out)
        cap.append((t1 - t0) / 1e6)
        pl.append((t3 - t2) / 1e6)
    return cap, pl


def _stats(xs: Sequence[float]) -> tuple[float, float]:
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def _bench_key() -> crypto.SealKey:
    return crypto.Platform().seal_key(crypto.digest(b"mlcapsule/bench"))


def _capsule_layer_once(cl: CapsuleLayer, key: crypto.SealKey, x: np.ndarray, budget: int):
    staged = CapsuleLayer(cl.layer, bytearray(cl.blob))  # copy the sealed blob into the enclave
    return run_layer(staged, key, key.measurement, x, budget)


def bench_layer(spec: LayerSpec, in_shape: Sequence[int], reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP,
                budget: int = DEFAULT_MEMORY_BUDGET, chunk_size: int = crypto.DEFAULT_CHUNK_SIZE,
                table: str = "layer", label: str | None = None, seed: int = 0,
                sgx: tuple | None = None) -> BenchRow:
    """Time one parameterized layer sealed as a capsule layer against the plain kernel."""
    if not spec.has_params:
        raise ConfigError(f"{spec.kind} has no parameters to seal")
    # scaffold model: only its first layer is timed
    tail = (SOFTMAX,) if spec.kind == "dense" else (dense(2), SOFTMAX)
    model = sequential(tuple(in_shape), spec, *tail)
    r = model.resolved[0]
    rng = np.random.default_rng(seed)
    params = ModelSecrets.random(model, rng).params[0]
    x = rng.normal(size=r.in_shape).astype(np.float32)
    key = _bench_key()
    cl = seal_layer(r, params, key, key.measurement, chunk_size)
    need = working_set(cl)
    label = label or f"{spec.kind} {'x'.join(map(str, in_shape))}"
    ref = sgx or (None, None, None)
    ref = tuple(ref) + (None,) * (3 - len(ref))
    if need > budget:
        return BenchRow(table, label, None, None, None, None, reps, "budget-exceeded", need, *ref)
    cap, pl = time_pair(lambda: _capsule_layer_once(cl, key, x, budget), lambda: apply_layer(r, x, params),
                        reps, warmup)
    return BenchRow(table, label, *_stats(cap), *_stats(pl), reps, "ok", need, *ref)


def dense_table(sizes=(256, 512, 1024, 2048, 4096), reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP,
                unchunked_row: bool = True) -> list[BenchRow]:
    rows = []
    for n in sizes:
        cap, plain = SGX_DENSE.get(n, (None, None))
        fac = cap / plain if cap else None
        rows.append(bench_layer(dense(n), (n,), reps, warmup, table="dense", label=f"{n}x{n}",
                                sgx=(cap, plain, fac)))
    if unchunked_row:
        # the whole matrix sealed as one chunk needs a second full-size buffer
        n = max(sizes)
        rows.append(bench_layer(dense(n), (n,), reps, warmup, table="dense", label=f"{n}x{n} unchunked",
                                chunk_size=4 * n * n + 64))
    return rows


def conv_table(configs=((64, 224), (512, 28), (512, 14)), channel_div: int = 1, spatial_div: int = 1,
               reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP) -> list[BenchRow]:
    """3x3 'same' convolution and depthwise-separable rows; dims may be scaled down for quick runs."""
    rows = []
    for c, s in configs:
        cc, ss = max(1, c // channel_div), max(3, s // spatial_div)
        tag = f"{cc}x{ss}x{ss}"
        if (cc, ss) != (c, s):
            tag += f" (scaled from {c}x{s}x{s})"
        rows.append(bench_layer(conv2d(cc, 3, padding="same"), (cc, ss, ss), reps, warmup, table="conv",
                                label=tag, sgx=SGX_CONV.get((c, s))))
        rows.append(bench_layer(depthwise_conv2d(3, padding="same"), (cc, ss, ss), reps, warmup,
                                table="depthwise", label=tag, sgx=SGX_DEPTHWISE.get((c, s))))
    return rows


@dataclass(frozen=True)
class NetworkCase:
    name: str
    model_def: ModelDef
    secrets: ModelSecrets


def builtin_networks(scale: str = "small", seed: int = 0) -> list[NetworkCase]:
    """Random-weight networks. ``small`` shrinks VGG-16 and MobileNet to desk size; ``full`` keeps ImageNet shape."""
    if scale == "full":
        defs = {"toy-cnn": zoo.toy_cnn(), "vgg16": zoo.vgg16(), "mobilenet": zoo.mobilenet()}
    elif scale == "small":
        defs = {"toy-cnn": zoo.toy_cnn(),
                "vgg16 (scaled)": zoo.vgg16(input_size=32, width_div=8, classes=10, dense_units=256),
                "mobilenet (scaled)": zoo.mobilenet(input_size=64, width_div=4, classes=10)}
    else:
        raise ConfigError(f"unknown network scale {scale!r}")
    rng = np.random.default_rng(seed)
    return [NetworkCase(k, d, ModelSecrets.random(d, rng)) for k, d in defs.items()]


def bench_network(cases: Sequence[NetworkCase], reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP,
                  budget: int = DEFAULT_MEMORY_BUDGET, seed: int = 0) -> list[BenchRow]:
    key = _bench_key()
    rows = []
    for case in cases:
        layers = seal_model(case.model_def, case.secrets, key, key.measurement)
        x = np.random.default_rng(seed).normal(size=case.model_def.input_shape).astype(np.float32)
        peak = max(working_set(cl) for cl in layers)
        base = case.name.split()[0]
        ref = SGX_NETWORKS.get(base, (None, None, None))
        if peak > budget:
            rows.append(BenchRow("network", case.name, None, None, None, None, reps, "budget-exceeded", peak, *ref))
            continue

        def capsule(layers=layers, x=x):
            staged = [CapsuleLayer(cl.layer, bytearray(cl.blob) if cl.blob is not None else None) for cl in layers]
            return capsule_forward(staged, key, key.measurement, x, budget)

        cap, pl = time_pair(capsule, lambda c=case, x=x: forward(c.model_def, c.secrets, x), reps, warmup)
        rows.append(BenchRow("network", case.name, *_stats(cap), *_stats(pl), reps, "ok", peak, *ref))
    return rows


def report(rows: list[BenchRow], reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP) -> BenchReport:
    return BenchReport(rows, reps, warmup, environment())


# -- native core versus numpy fallback --------------------------------------------------

@dataclass
class BackendRow:
    kernel: str
    shape: str
    native_ms: float
    python_ms: float

    @property
    def speedup(self) -> float:
        return self.python_ms / self.native_ms if self.native_ms else float("inf")


def _kernel_cases(rng):
    def f(*shape):
        return rng.normal(size=shape).astype(np.float32)

    x1, w1, b1 = f(1024), f(1024, 1024), f(1024)
    x2, w2, b2 = f(16, 32, 32), f(16, 16, 3, 3), f(16)
    x3, w3, b3 = f(64, 32, 32), f(64, 3, 3), f(64)
    p4, q4 = f(256, 784), f(784)
    return [
        ("dense", "1024x1024", lambda: kernels.dense(x1, w1, b1)),
        ("conv2d", "16x32x32 k3", lambda: kernels.conv2d(x2, w2, b2, 1, "same")),
        ("depthwise_conv2d", "64x32x32 k3", lambda: kernels.depthwise_conv2d(x3, w3, b3, 1, "same")),
        ("maxpool", "64x32x32 s2", lambda: kernels.maxpool(x3, 2)),
        ("min_sq_distance", "256x784", lambda: kernels.min_sq_distance(p4, q4)),
    ]


def bench_backends(reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP, seed: int = 0) -> list[BackendRow]:
    """Per-kernel mean time of the compiled core versus the numpy fallback."""
    if "native" not in kernels.available_backends():
        raise ConfigError("compiled kernels are not built")
    rows = []
    for name, shape, fn in _kernel_cases(np.random.default_rng(seed)):
        means = {}
        for b in ("native", "python"):
            with kernels.backend_scope(b):
                for _ in range(warmup):
                    _consume(fn())
                ts = []
                for _ in range(reps):
                    t0 = time.perf_counter_ns()
                    out = fn()
                    ts.append((time.perf_counter_ns() - t0) / 1e6)
                    _consume(out)
                means[b] = statistics.fmean(ts)
        rows.append(BackendRow(name, shape, means["native"], means["python"]))
    return rows


def backends_markdown(rows: list[BackendRow]) -> str:
    lines = ["| kernel | shape | native ms | python ms | speedup |", "|---|---|---|---|---|"]
    lines += [f"| {r.kernel} | {r.shape} | {r.native_ms:.4f} | {r.python_ms:.4f} | {r.speedup:.2f} |" for r in rows]
    return "\n".join(lines) + "\n"


def backends_csv(rows: list[BackendRow]) -> str:
    out = ["kernel,shape,native_ms,python_ms,speedup"]
    out += [f"{r.kernel},{r.shape},{r.native_ms:.6g},{r.python_ms:.6g},{r.speedup:.6g}" for r in rows]
    return "\n".join(out) + "\n"


__all__ = ["BenchRow", "BenchReport", "BackendRow", "NetworkCase", "bench_layer", "bench_network",
           "bench_backends", "builtin_networks", "conv_table", "dense_table", "report", "time_pair",
           "SGX_DETECTOR_MS"]
