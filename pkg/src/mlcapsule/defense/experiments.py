"""End-to-end evaluation runs for the three defenses, shared by the CLI and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import zoo
from ..nn.train import accuracy, posteriors, train_toy
from . import datasets, membership, redetect, stealing

DEFAULT_C_GRID = "0:0.5:0.05"


@dataclass
class MembershipResult:
    rows: list[membership.MembershipRow]
    train_acc: float
    test_acc: float


def membership_eval(c_grid=DEFAULT_C_GRID, seed: int = 0, n: int = 200, dim: int = 20,
                    classes: int = 10, hidden: int = 128, epochs: int = 300) -> MembershipResult:
    """Overfit a toy MLP on random labels, then sweep the noise level."""
    grid = membership.parse_grid(c_grid) if isinstance(c_grid, str) else list(c_grid)
    split = datasets.random_label_split(seed, n, dim, classes)
    arch = zoo.mlp(dim, (hidden,), classes)
    secrets = train_toy(split.X_train, split.y_train, arch, epochs=epochs, rng_seed=seed)
    T = np.bincount(split.y_train, minlength=classes) / len(split.y_train)
    rows = membership.membership_sweep(
        posteriors(arch, secrets, split.X_train), split.y_train,
        posteriors(arch, secrets, split.X_test), split.y_test, T, grid)
    return MembershipResult(rows, accuracy(arch, secrets, split.X_train, split.y_train),
                            accuracy(arch, secrets, split.X_test, split.y_test))


@dataclass
class StealingResult:
    benign_rows: list
    attack_rows: list
    window: int

    @property
    def benign_alarms(self) -> int:
        return sum(a for _, _, a in self.benign_rows)

    @property
    def first_attack_alarm(self) -> int | None:
        return next((i for i, _, a in self.attack_rows if a), None)


def stealing_eval(seed: int = 0, queries: int = 5000, dim: int = 64, tau: float = 0.5,
                  rho: float = 0.5, window: int = 100) -> StealingResult:
    rng = np.random.default_rng(seed)
    benign = stealing.run_stream(stealing.StealingMonitor(dim, tau, rho, window),
                                 stealing.benign_stream(rng, queries, dim))
    attack = stealing.run_stream(stealing.StealingMonitor(dim, tau, rho, window),
                                 stealing.probing_stream(rng, min(queries, 4 * window), dim, eps=tau / 100))
    return StealingResult(benign, attack, window)


def redetect_eval(seed: int = 0, n_train: int = 1000, n_test: int = 500, epochs: int = 30):
    rng = np.random.default_rng(seed)
    btr, ctr = datasets.benign_images(rng, n_train), datasets.crafted_images(rng, n_train)
    bte, cte = datasets.benign_images(rng, n_test), datasets.crafted_images(rng, n_test)
    det = redetect.re_detector_train(btr, ctr, epochs=epochs, rng_seed=seed)
    return det, redetect.evaluate(det, btr, bte, cte)
