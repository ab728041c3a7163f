"""Binary detector that refuses crafted, model-probing inputs before classification.

The shipped crafted corpus is a synthetic proxy (see ``datasets``); any
externally generated malicious corpus can be passed to :func:`re_detector_train`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..nn import zoo
from ..nn.model import ModelDef, ModelSecrets, export_weights, forward, import_weights
from ..nn.train import posteriors, train_toy

BENIGN, MALICIOUS = "benign", "malicious"
MAX_IMBALANCE = 10.0


@dataclass
class DetectorModel:
    model_def: ModelDef
    secrets: ModelSecrets

    def posterior(self, x) -> np.ndarray:
        return forward(self.model_def, self.secrets, x)

    def score(self, x) -> str:
        return MALICIOUS if self.posterior(x)[1] > 0.5 else BENIGN

    def score_batch(self, X) -> np.ndarray:
        """Boolean ``malicious`` flags for a batch (dense detectors only)."""
        return posteriors(self.model_def, self.secrets, X)[:, 1] > 0.5

    def save(self, weights_path, def_path) -> None:
        export_weights(self.model_def, self.secrets, weights_path, def_path)

    @classmethod
    def load(cls, weights_path, def_path) -> "DetectorModel":
        d, s = import_weights(weights_path, def_path)
        if d.classes != 2:
            raise ConfigError("a detector must have exactly two outputs")
        return cls(d, s)


def re_detector_train(benign, crafted, arch: ModelDef | None = None, epochs: int = 30,
                      lr: float = 0.05, rng_seed: int = 0) -> DetectorModel:
    benign, crafted = np.asarray(benign), np.asarray(crafted)
    if len(benign) == 0 or len(crafted) == 0:
        raise ConfigError("both benign and crafted samples are required")
    ratio = max(len(benign), len(crafted)) / min(len(benign), len(crafted))
    if ratio > MAX_IMBALANCE:
        raise ConfigError(f"class imbalance {ratio:.1f}:1 exceeds {MAX_IMBALANCE:g}:1")
    arch = arch or zoo.detector_mlp(benign.shape[1:])
    X = np.concatenate([benign, crafted])
    y = np.concatenate([np.zeros(len(benign), int), np.ones(len(crafted), int)])
    return DetectorModel(arch, train_toy(X, y, arch, epochs=epochs, lr=lr, rng_seed=rng_seed))


@dataclass(frozen=True)
class DetectorReport:
    accuracy: float
    false_denials_train: int
    benign_train: int
    overhead_ms: float


def evaluate(det: DetectorModel, benign_train, benign_test, crafted_test, timing_reps: int = 200) -> DetectorReport:
    flags = det.score_batch(np.concatenate([benign_test, crafted_test]))
    truth = np.r_[np.zeros(len(benign_test), bool), np.ones(len(crafted_test), bool)]
    false_denials = int(det.score_batch(benign_train).sum())
    probe = np.asarray(benign_test[0], dtype=np.float32)
    for _ in range(5):
        det.score(probe)
    t0 = time.perf_counter_ns()
    for _ in range(timing_reps):
        det.score(probe)
    per_query = (time.perf_counter_ns() - t0) / timing_reps / 1e6
    return DetectorReport(float((flags == truth).mean()), false_denials, len(benign_train), per_query)
