"""Set-growth detection of model-stealing query streams.

Each query is appended to an archive when its Euclidean distance to every
archived query exceeds ``tau``. Natural traffic keeps the archive growing;
probing around a few seed points does not. An alarm fires when the fraction
of appended queries over the last ``window`` drops below ``rho``.
"""

from __future__ import annotations

import csv
import io
import threading

import numpy as np

from ..errors import ConfigError, ShapeMismatch
from ..nn import kernels

BENIGN, ATTACK = "benign", "attack"


class QueryArchive:
    """Growing set of archived query features (float32 rows)."""

    def __init__(self, dim: int, tau: float, capacity: int = 256):
        if tau < 0:
            raise ConfigError("tau must be non-negative")
        self.dim, self.tau = int(dim), float(tau)
        self._buf = np.empty((max(1, capacity), self.dim), dtype=np.float32)
        self._n = 0
        self.history: list[bool] = []
        self._lock = threading.Lock()

    @property
    def points(self) -> np.ndarray:
        return self._buf[:self._n]

    def __len__(self) -> int:
        return self._n

    def min_distance(self, x) -> float:
        return float(np.sqrt(kernels.min_sq_distance(self.points, x)))

    def update(self, features) -> bool:
        x = np.asarray(features, dtype=np.float32).reshape(-1)
        if x.size != self.dim:
            raise ShapeMismatch(f"query has {x.size} features, archive stores {self.dim}")
        with self._lock:
            appended = kernels.min_sq_distance(self.points, x) > self.tau * self.tau
            if appended:
                if self._n == len(self._buf):
                    grown = np.empty((2 * len(self._buf), self.dim), dtype=np.float32)
                    grown[:self._n] = self._buf[:self._n]
                    self._buf = grown
                self._buf[self._n] = x
                self._n += 1
            self.history.append(bool(appended))
        return bool(appended)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.copy(), np.array(self.history, dtype=bool)

    @classmethod
    def from_arrays(cls, points: np.ndarray, history, tau: float) -> "QueryArchive":
        points = np.asarray(points, dtype=np.float32)
        a = cls(points.shape[1], tau, capacity=max(256, len(points)))
        a._buf[:len(points)] = points
        a._n = len(points)
        a.history = [bool(v) for v in history]
        return a


def archive_update(archive: QueryArchive, features) -> tuple[QueryArchive, bool]:
    return archive, archive.update(features)


def stealing_alarm(history, window: int, rho: float) -> str:
    """ATTACK iff the append rate over the last ``window`` queries is below ``rho``."""
    if window <= 0:
        raise ConfigError("window must be positive")
    if window > len(history):
        raise ConfigError(f"window of {window} exceeds the {len(history)} observed queries")
    rate = float(np.mean(np.asarray(history[-window:], dtype=np.float64)))
    return ATTACK if rate < rho else BENIGN


class StealingMonitor:
    """Archive plus alarm rule; the alarm is silent until a full window has been seen."""

    def __init__(self, dim: int, tau: float, rho: float, window: int):
        if not 0.0 <= rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        self.archive = QueryArchive(dim, tau)
        self.rho, self.window = float(rho), int(window)

    def observe(self, features) -> tuple[bool, bool]:
        appended = self.archive.update(features)
        h = self.archive.history
        alarm = len(h) >= self.window and stealing_alarm(h, self.window, self.rho) == ATTACK
        return appended, alarm


def run_stream(monitor: StealingMonitor, stream) -> list[tuple[int, bool, bool]]:
    return [(i, *monitor.observe(x)) for i, x in enumerate(stream)]


def benign_stream(rng: np.random.Generator, n: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """i.i.d. uniform queries; in high dimension their pairwise distances concentrate near
    ``scale * sqrt(dim / 6)``, far above a small ``tau``."""
    return rng.uniform(0, scale, (n, dim)).astype(np.float32)


def probing_stream(rng: np.random.Generator, n: int, dim: int, seeds: int = 5, eps: float = 1e-3,
                   scale: float = 1.0) -> np.ndarray:
    """Perturbations of size ``eps`` around a handful of seed points."""
    centers = rng.uniform(0, scale, (seeds, dim))
    pick = rng.integers(0, seeds, n)
    return (centers[pick] + rng.uniform(-eps, eps, (n, dim))).astype(np.float32)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_index", "appended", "alarm"])
    for i, appended, alarm in rows:
        w.writerow([i, int(appended), int(alarm)])
    return buf.getvalue()
