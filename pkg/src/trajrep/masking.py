"""Masked-position sampling for pretraining.

Two span strategies share the same budget machinery:

* RUN_AWARE (default): candidate spans whose endpoints both lie strictly
  inside the same repeated-cell run are rejected, so a span can never mask
  only the interior of a constant-cell block (which would be trivially
  recoverable from its visible endpoints).
* NAIVE: identical sampling without the rejection rule.

The mask budget is ``floor(ratio * L)`` and is always met: after at most
``10 * budget`` candidate draws any shortfall is filled from non-interior
tokens (first or last position of their run) and then from arbitrary
unmasked tokens.

All randomness comes from a counter-based Philox generator keyed by
``(seed, stream)``, so sampling is bit-reproducible regardless of thread
count or sampling order; derive per-trajectory streams with
``derive_stream``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import TokenSequence

RUN_AWARE = "RUN_AWARE"
NAIVE = "NAIVE"

_FALLBACK_ATTEMPT_FACTOR = 10


@dataclass(frozen=True)
class MaskSpec:
    """Masking hyperparameters: ratio in (0,1), average span length >= 2."""

    ratio: float = 0.3
    avg_span: int = 6
    strategy: str = RUN_AWARE
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"mask ratio must be in (0, 1), got {self.ratio}")
        if self.avg_span < 2:
            raise ValueError(f"avg_span must be >= 2, got {self.avg_span}")
        if self.strategy not in (RUN_AWARE, NAIVE):
            raise ValueError(f"unknown masking strategy {self.strategy!r}")


@dataclass
class MaskDiagnostics:
    """Bookkeeping from one sampling call (consumed by mask-stats)."""

    attempts: int = 0
    rejected: int = 0
    accepted_spans: list[tuple[int, int]] = field(default_factory=list)
    fallback_non_interior: int = 0
    fallback_arbitrary: int = 0


def token_ids(seq) -> np.ndarray:
    if isinstance(seq, TokenSequence):
        return seq.token_ids()
    return np.asarray(seq, dtype=np.int64)


def runs(seq) -> list[tuple[int, int, int]]:
    """Maximal segments of equal token id as (start, end, token_id), 0-based
    inclusive, covering the sequence disjointly."""
    ids = token_ids(seq)
    if len(ids) == 0:
        raise ValueError("empty sequence has no runs")
    out = []
    start = 0
    for i in range(1, len(ids)):
        if ids[i] != ids[start]:
            out.append((start, i - 1, int(ids[start])))
            start = i
    out.append((start, len(ids) - 1, int(ids[start])))
    return out


def derive_stream(traj_index: int, step: int = 0) -> int:
    """Per-item Philox stream id: trajectory index in the high word, step in
    the low word. Keeps parallel sampling reproducible."""
    traj_index = int(traj_index)
    step = int(step)
    if not 0 <= traj_index < (1 << 32) or not 0 <= step < (1 << 32):
        raise ValueError("traj_index and step must fit in 32 bits")
    return (traj_index << 32) | step


def _rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array(
        [int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))


def sample_mask(seq, spec: MaskSpec, stream: int = 0) -> np.ndarray:
    """Sorted masked positions (0-based) for ``seq`` under ``spec``."""
    mask, _ = sample_mask_with_diagnostics(seq, spec, stream)
    return mask


def sample_mask_with_diagnostics(
    seq, spec: MaskSpec, stream: int = 0
) -> tuple[np.ndarray, MaskDiagnostics]:
    ids = token_ids(seq)
    length = len(ids)
    if length == 0:
        raise ValueError("cannot mask an empty sequence")
    budget = math.floor(spec.ratio * length)
    diag = MaskDiagnostics()
    if budget == 0:
        return np.empty(0, dtype=np.int64), diag

    run_list = runs(ids)
    run_id = np.empty(length, dtype=np.int64)
    run_start = np.empty(length, dtype=np.int64)
    run_end = np.empty(length, dtype=np.int64)
    for k, (s, e, _) in enumerate(run_list):
        run_id[s : e + 1] = k
        run_start[s : e + 1] = s
        run_end[s : e + 1] = e

    rng = _rng(spec.seed, stream)
    masked = np.zeros(length, dtype=bool)
    remaining = budget
    cap = _FALLBACK_ATTEMPT_FACTOR * budget
    while remaining > 0 and diag.attempts < cap:
        diag.attempts += 1
        span_len = min(spec.avg_span - 1 + int(rng.integers(0, 3)), length)
        start = int(rng.integers(0, length - span_len + 1))
        end = start + span_len - 1
        if (
            spec.strategy == RUN_AWARE
            and run_id[start] == run_id[end]
            and start > run_start[start]
            and end < run_end[end]
        ):
            diag.rejected += 1
            continue
        diag.accepted_spans.append((start, end))
        for pos in range(start, end + 1):
            if not masked[pos]:
                masked[pos] = True
                remaining -= 1
                if remaining == 0:
                    break

    if remaining > 0:
        # Budget shortfall: fill first from run-boundary tokens, then anywhere.
        boundary = (np.arange(length) == run_start) | (np.arange(length) == run_end)
        for pool_mask, counter in ((boundary, "fallback_non_interior"), (~boundary, "fallback_arbitrary")):
            pool = np.flatnonzero(pool_mask & ~masked)
            rng.shuffle(pool)
            take = pool[: min(remaining, len(pool))]
            masked[take] = True
            remaining -= len(take)
            setattr(diag, counter, getattr(diag, counter) + len(take))
            if remaining == 0:
                break

    return np.flatnonzero(masked).astype(np.int64), diag


def sample_mask_run_aware(seq, spec: MaskSpec, stream: int = 0) -> np.ndarray:
    if spec.strategy != RUN_AWARE:
        spec = MaskSpec(spec.ratio, spec.avg_span, RUN_AWARE, spec.seed)
    return sample_mask(seq, spec, stream)


def sample_mask_naive(seq, spec: MaskSpec, stream: int = 0) -> np.ndarray:
    if spec.strategy != NAIVE:
        spec = MaskSpec(spec.ratio, spec.avg_span, NAIVE, spec.seed)
    return sample_mask(seq, spec, stream)
