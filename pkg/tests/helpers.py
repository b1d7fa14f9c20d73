"""Shared test utilities (not collected by pytest)."""

from __future__ import annotations

import numpy as np

from moefusion.numerics import log_softmax


class TableLm:
    """Deterministic toy LM: state walks a fixed table of log-distributions.

    Implements the scorer protocol (start/advance) without any model, so
    fusion logic can be tested independently of LM internals.
    """

    def __init__(self, rows: np.ndarray):
        self.rows = np.asarray(rows, dtype=np.float64)
        self.vocab_size = int(self.rows.shape[1])

    @classmethod
    def random(cls, vocab_size: int, n_states: int, seed: int, scale: float = 1.5):
        rng = np.random.default_rng([seed, 0x7AB1])
        return cls(log_softmax(rng.standard_normal((n_states, vocab_size)) * scale,
                               axis=-1))

    def start(self):
        return 0, self.rows[0]

    def advance(self, state: int, token: int):
        nxt = (state * 31 + int(token) + 1) % len(self.rows)
        return nxt, self.rows[nxt]


class UniformLm:
    """LM that scores every token equally at every step."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self._row = np.full(vocab_size, -np.log(vocab_size))

    def start(self):
        return 0, self._row

    def advance(self, state, token):
        return 0, self._row


def random_lattice(vocab_size: int, n_rows: int, seed: int, scale: float = 2.0):
    rng = np.random.default_rng([seed, 0x1A7])
    return log_softmax(rng.standard_normal((n_rows, vocab_size)) * scale, axis=-1)
