"""Executable model-secrecy experiment with its simulator pair.

For ``b = 1`` the adversary receives a real hidden model and an oracle backed
by enclave classification; for ``b = 0`` it receives an encryption of an
all-zero string of the same length and an oracle that evaluates the plaintext
model directly. The challenger keeps the enclave session: in the guess phase
the adversary sees only the public definition, the hidden model and the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.stats import chisquare

from .. import crypto
from ..errors import QueryBudgetExhausted
from ..nn.model import ModelDef, ModelSecrets, forward
from .algorithms import ClientSession, HiddenModel, ModelRequest, classify, obtain, provide

Oracle = Callable[[np.ndarray], np.ndarray]


def sim1(model_def: ModelDef, req: ModelRequest) -> HiddenModel:
    pk = req.setup_quote.output
    return HiddenModel(model_def, crypto.pke_enc(pk, bytes(model_def.secrets_nbytes())))


def sim2(model_def: ModelDef, secrets: ModelSecrets, x) -> np.ndarray:
    return forward(model_def, secrets, x)


class Adversary(Protocol):
    def request(self, model_def: ModelDef) -> tuple[ModelRequest, ClientSession]: ...

    def guess(self, model_def: ModelDef, hidden: HiddenModel, oracle: Oracle) -> int: ...


class _BudgetedOracle:
    def __init__(self, fn: Oracle, budget: int):
        self.fn, self.budget, self.used = fn, budget, 0

    def __call__(self, x) -> np.ndarray:
        if self.used >= self.budget:
            raise QueryBudgetExhausted(f"oracle budget of {self.budget} queries exhausted")
        self.used += 1
        return self.fn(x)


def secrecy_experiment(b: int, adversary: Adversary, model_def: ModelDef, secrets: ModelSecrets,
                       query_budget: int = 100) -> int:
    """One run of the experiment; returns the adversary's guess (0 if the budget runs out)."""
    if b not in (0, 1):
        raise ValueError("b must be 0 or 1")
    req, session = adversary.request(model_def)
    if b == 1:
        hidden = provide(model_def, secrets, req, expected_tag=session.program.tag)
        fn = lambda x: classify(session, hidden, x)  # noqa: E731
    else:
        hidden = sim1(model_def, req)
        fn = lambda x: sim2(model_def, secrets, x)  # noqa: E731
    try:
        return int(adversary.guess(model_def, hidden, _BudgetedOracle(fn, query_budget))) & 1
    except QueryBudgetExhausted:
        return 0


# -- shipped distinguishers -----------------------------------------------------------

class _Honest:
    """Obtains a request the honest way; subclasses implement ``guess``."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng or np.random.default_rng()

    def request(self, model_def):
        return obtain(model_def)


class OracleConsistency(_Honest):
    """Queries random inputs twice; guesses 1 when answers repeat and form valid posteriors."""

    def __init__(self, rng=None, queries: int = 3):
        super().__init__(rng)
        self.queries = queries

    def guess(self, model_def, hidden, oracle):
        for _ in range(self.queries):
            x = self.rng.normal(size=model_def.input_shape).astype(np.float32)
            a, b = oracle(x), oracle(x)
            if not np.array_equal(a, b) or abs(float(a.astype(np.float64).sum()) - 1) > 1e-6:
                return 0
        return 1


class CiphertextLength(_Honest):
    """Guesses 1 iff the ciphertext is exactly as long as an encryption of the weights."""

    def guess(self, model_def, hidden, oracle):
        expected = 2 + 32 + model_def.secrets_nbytes() + 16
        return int(len(hidden.c) == expected)


class ByteHistogram(_Honest):
    """Chi-square test of ciphertext body bytes against uniform; guesses 1 when rejected at 5%."""

    def guess(self, model_def, hidden, oracle):
        body = np.frombuffer(hidden.c.body, dtype=np.uint8)
        counts = np.bincount(body, minlength=256)
        return int(chisquare(counts).pvalue < 0.05)


DISTINGUISHERS = {
    "oracle-consistency": OracleConsistency,
    "ciphertext-length": CiphertextLength,
    "byte-histogram": ByteHistogram,
}


@dataclass(frozen=True)
class AdvantageResult:
    name: str
    trials: int
    p1_given_b1: float
    p1_given_b0: float

    @property
    def advantage(self) -> float:
        return abs(self.p1_given_b1 - self.p1_given_b0)


def estimate_advantage(name: str, adversary: Adversary, model_def: ModelDef, secrets: ModelSecrets,
                       trials: int = 1000, query_budget: int = 100) -> AdvantageResult:
    """Monte-Carlo estimate of ``|Pr[guess=1 | b=1] - Pr[guess=1 | b=0]|`` over ``trials`` per bit."""
    ones = {0: 0, 1: 0}
    for b in (0, 1):
        for _ in range(trials):
            ones[b] += secrecy_experiment(b, adversary, model_def, secrets, query_budget)
    return AdvantageResult(name, trials, ones[1] / trials, ones[0] / trials)
