"""Posterior noising against entropy-threshold membership inference.

Confident posteriors (low entropy) get more noise than uncertain ones: with
``alpha = 1 - H(P) / log K`` the released vector is
``(1 - c*alpha) * P + c*alpha * T``. Everything here works in nats and float64.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ..errors import ConfigError, ShapeMismatch

PROB_FLOOR = 1e-12


def _as_posterior(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 1 or p.shape[-1] < 1:
        raise ShapeMismatch("posterior must be a non-empty vector")
    return p


def entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis; ``0 log 0 = 0``."""
    p = _as_posterior(p)
    h = -(p * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def noise_magnitude(p) -> np.ndarray | float:
    p = _as_posterior(p)
    k = p.shape[-1]
    if k == 1:
        return 0.0 if p.ndim == 1 else np.zeros(p.shape[:-1])
    a = np.clip(1.0 - entropy(p) / np.log(k), 0.0, 1.0)
    return float(a) if np.ndim(a) == 0 else a


@dataclass(frozen=True)
class NoiseConfig:
    c: float
    T: tuple[float, ...]

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ConfigError(f"noise level c must lie in [0, 1], got {self.c}")
        t = np.asarray(self.T, dtype=np.float64)
        if t.ndim != 1 or np.any(t < 0) or abs(t.sum() - 1.0) > 1e-6:
            raise ConfigError("noise distribution T must be a probability vector")

    @classmethod
    def uniform(cls, c: float, k: int) -> "NoiseConfig":
        return cls(c, tuple([1.0 / k] * k))

    @classmethod
    def from_labels(cls, c: float, labels, k: int) -> "NoiseConfig":
        """T = class distribution of the training labels."""
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=k).astype(np.float64)
        return cls(c, tuple(counts / counts.sum()))

    def to_dict(self) -> dict:
        return {"c": self.c, "T": list(self.T)}


def noise_posterior(p, cfg: NoiseConfig) -> np.ndarray:
    """Blend P toward T by c * alpha. The argmax is kept for uniform T; a skewed T can flip it."""
    p = _as_posterior(p)
    t = np.asarray(cfg.T, dtype=np.float64)
    if p.shape[-1] != t.shape[0]:
        raise ShapeMismatch(f"posterior has {p.shape[-1]} classes, noise distribution {t.shape[0]}")
    w = cfg.c * np.asarray(noise_magnitude(p))[..., None]
    return (1.0 - w) * p + w * t


def entropy_attack_auc(member_posteriors, nonmember_posteriors) -> float:
    """ROC AUC of the score ``-H(P)`` via the Mann-Whitney rank statistic (ties count 1/2)."""
    m = np.atleast_1d(entropy(member_posteriors))
    n = np.atleast_1d(entropy(nonmember_posteriors))
    if m.size == 0 or n.size == 0:
        raise ConfigError("both member and non-member sets must be non-empty")
    ranks = rankdata(np.concatenate([-m, -n]))
    return float((ranks[:m.size].sum() - m.size * (m.size + 1) / 2) / (m.size * n.size))


def jsd(p, q) -> np.ndarray | float:
    """``sum P log(P/M) + Q log(Q/M)`` with ``M = (P+Q)/2``, without the usual 1/2 factor."""
    p, q = _as_posterior(p), _as_posterior(q)
    if p.shape != q.shape:
        raise ShapeMismatch("posteriors differ in shape")
    m = (p + q) / 2

    def kl(a):
        safe = np.maximum(a, PROB_FLOOR)
        return np.where(a > 0, a * (np.log(safe) - np.log(np.maximum(m, PROB_FLOOR))), 0.0).sum(axis=-1)

    out = np.maximum(kl(p) + kl(q), 0.0)
    return float(out) if out.ndim == 0 else out


def estimation_error(p, p_noised, delta) -> np.ndarray | float:
    p, p2 = _as_posterior(p), _as_posterior(p_noised)
    delta = np.asarray(delta)
    if np.any(delta < 0) or np.any(delta >= p.shape[-1]):
        raise ShapeMismatch("correct class index out of range")
    if p.ndim == 1:
        return float(abs(p[int(delta)] - p2[int(delta)]))
    rows = np.arange(len(p))
    return np.abs(p[rows, delta] - p2[rows, delta])


@dataclass(frozen=True)
class MembershipRow:
    c: float
    auc: float
    jsd_mean: float
    est_err_mean: float


def membership_sweep(member_p, member_y, nonmember_p, nonmember_y, T, c_grid) -> list[MembershipRow]:
    """Attack AUC and utility loss for every noise level in ``c_grid``."""
    member_p, nonmember_p = _as_posterior(member_p), _as_posterior(nonmember_p)
    if len(member_p) == 0 or len(nonmember_p) == 0:
        raise ConfigError("degenerate split: member and non-member sets must be non-empty")
    allp = np.concatenate([member_p, nonmember_p])
    ally = np.concatenate([np.asarray(member_y), np.asarray(nonmember_y)])
    rows = []
    for c in c_grid:
        cfg = NoiseConfig(float(c), tuple(T))
        noised = noise_posterior(allp, cfg)
        rows.append(MembershipRow(
            float(c),
            entropy_attack_auc(noised[:len(member_p)], noised[len(member_p):]),
            float(np.mean(jsd(allp, noised))),
            float(np.mean(estimation_error(allp, noised, ally))),
        ))
    return rows


def parse_grid(spec: str) -> list[float]:
    """``"start:stop:step"`` (inclusive of stop) or a comma-separated list."""
    if ":" in spec:
        start, stop, step = (float(v) for v in spec.split(":"))
        if step <= 0:
            raise ConfigError("grid step must be positive")
        n = int(round((stop - start) / step))
        return [round(start + i * step, 10) for i in range(n + 1)]
    return [float(v) for v in spec.split(",") if v.strip()]


def rows_to_csv(rows: list[MembershipRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["c", "auc", "jsd_mean", "est_err_mean"])
    for r in rows:
        w.writerow([f"{r.c:g}", f"{r.auc:.6f}", f"{r.jsd_mean:.6f}", f"{r.est_err_mean:.6f}"])
    return buf.getvalue()
