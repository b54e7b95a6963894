"""Seeded synthetic sequence tasks small enough to train in seconds.

Three generators, all over integer token sequences of fixed length:

- token_majority: two marker tokens compete; the label says which occurs
  more often. The winning count always leads by at least two, so the task
  is cleanly learnable from token identity alone.
- parity_markers: the label is the parity of how many times a single marker
  token appears (zero to three occurrences).
- linear_probe: a regression target, the mean of a fixed random per-token
  weight over the sequence, standardized over the generated pool.

Sequences are deduplicated before splitting, so train and eval never share
an example, and the whole dataset is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError
from .numerics import Rng

__all__ = ["SyntheticTask", "TaskData", "TASK_KINDS"]

TASK_KINDS = ("token_majority", "parity_markers", "linear_probe")


@dataclass(frozen=True)
class TaskData:
    """Materialized splits; targets are class indices or regression values."""

    kind: str
    train_tokens: np.ndarray
    train_targets: np.ndarray
    eval_tokens: np.ndarray
    eval_targets: np.ndarray
    num_outputs: int
    is_regression: bool

    @property
    def train_count(self) -> int:
        return self.train_tokens.shape[0]

    @property
    def eval_count(self) -> int:
        return self.eval_tokens.shape[0]


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    vocab_size: int = 16
    seq_len: int = 16
    train_count: int = 2000
    eval_count: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab size must be >= 4, got {self.vocab_size}")
        if self.seq_len < 4:
            raise ConfigError(f"sequence length must be >= 4, got {self.seq_len}")
        if self.train_count < 1 or self.eval_count < 1:
            raise ConfigError("train and eval counts must be positive")

    def build(self) -> TaskData:
        """Generate both splits deterministically from the seed."""
        rng = Rng(self.seed).child(f"task/{self.kind}")
        total = self.train_count + self.eval_count
        tokens = np.empty((total, self.seq_len), dtype=np.int64)
        raw_targets: list[float] = []
        seen: set[bytes] = set()
        made = 0
        attempts = 0
        limit = 200 * total + 1000
        while made < total:
            attempts += 1
            if attempts > limit:
                raise ParameterError(
                    f"could not generate {total} distinct sequences; "
                    "the task space is too small for the requested counts"
                )
            row, target = self._sample(rng, index=made)
            key = row.tobytes()
            if key in seen:
                continue
            seen.add(key)
            tokens[made] = row
            raw_targets.append(target)
            made += 1

        if self.kind == "linear_probe":
            targets = np.asarray(raw_targets, dtype=np.float64)
            spread = targets.std()
            if spread > 0:
                targets = (targets - targets.mean()) / spread
            num_outputs, is_regression = 1, True
        else:
            targets = np.asarray(raw_targets, dtype=np.int64)
            num_outputs, is_regression = 2, False

        split = self.train_count
        return TaskData(
            kind=self.kind,
            train_tokens=tokens[:split],
            train_targets=targets[:split],
            eval_tokens=tokens[split:],
            eval_targets=targets[split:],
            num_outputs=num_outputs,
            is_regression=is_regression,
        )

    def _sample(self, rng: Rng, index: int) -> tuple[np.ndarray, float]:
        n, v = self.seq_len, self.vocab_size
        if self.kind == "token_majority":
            # Markers 0 and 1; the label alternates so both splits stay balanced.
            label = index % 2
            win = int(rng.integers(2, n // 2 + 1))
            lose = int(rng.integers(0, win - 1))
            row = rng.integers(2, v, size=n)
            slots = rng.permutation(n)
            row[slots[:win]] = label
            row[slots[win : win + lose]] = 1 - label
            return row, float(label)
        if self.kind == "parity_markers":
            # Marker 0 appears 0..3 times; label is the count's parity.
            label = index % 2
            count = int(rng.integers(0, 2)) * 2 + label
            row = rng.integers(1, v, size=n)
            slots = rng.permutation(n)
            row[slots[:count]] = 0
            return row, float(label)
        # linear_probe: weight table fixed by the seed, shared across samples.
        row = rng.integers(0, v, size=n)
        weights = self._probe_weights()
        return row, float(weights[row].mean())

    def _probe_weights(self) -> np.ndarray:
        return Rng(self.seed).child("probe").normal((self.vocab_size,))
