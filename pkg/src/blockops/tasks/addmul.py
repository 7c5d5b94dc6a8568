"""Single-pair modular add/multiply task with a two-stage data schedule.

The preparation stage trains multiplication only on the limited pair set and
addition on all pairs; the interference stage inverts which operation is
limited.  Preparation-data accuracy after interference is measured on the
pairs that were trained only during the preparation stage.
"""

from __future__ import annotations

import numpy as np

from .batches import TaskBatch, one_hot, indicator_block

__all__ = [
    "OPS",
    "STAGES",
    "addmul_oracle",
    "limited_pairs",
    "full_pairs",
    "addmul_distribution",
    "preparation_only_pairs",
    "stage_training_set",
    "encode_addmul",
    "gen_addmul_batch",
]

OPS = ("add", "mul")
STAGES = ("preparation", "interference")
BLOCK_SIZE = 10


def addmul_oracle(a: int, b: int, op: str) -> int:
    if not (0 <= a < 10 and 0 <= b < 10):
        raise ValueError(f"digits must be in [0, 10), got {a}, {b}")
    if op == "add":
        return (a + b) % 10
    if op == "mul":
        return (a * b) % 10
    raise ValueError(f"unknown op {op!r}")


def full_pairs() -> list[tuple[int, int]]:
    return [(a, b) for a in range(10) for b in range(10)]


def limited_pairs(alternate_split: bool = False) -> list[tuple[int, int]]:
    """Pairs with one fixed-position low digit (0-4) and one high digit (5-9).

    The default orientation puts the low digit first; alternate_split swaps
    which position carries the low digits.
    """
    if alternate_split:
        return [(a, b) for a in range(5, 10) for b in range(0, 5)]
    return [(a, b) for a in range(0, 5) for b in range(5, 10)]


def addmul_distribution(stage: str, op: str, alternate_split: bool = False):
    """Allowed (a, b) pairs for one operation in one stage."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}")
    limited_op = "mul" if stage == "preparation" else "add"
    if op == limited_op:
        return limited_pairs(alternate_split)
    return full_pairs()


def preparation_only_pairs(alternate_split: bool = False) -> list[tuple[int, int]]:
    """Addition pairs trained in preparation but excluded during interference."""
    kept = set(limited_pairs(alternate_split))
    return [p for p in full_pairs() if p not in kept]


def stage_training_set(stage: str, alternate_split: bool = False):
    """Every (a, b, op) triple the stage trains on."""
    out = []
    for op in OPS:
        for a, b in addmul_distribution(stage, op, alternate_split):
            out.append((a, b, op))
    return out


def encode_addmul(a, b, op_ids) -> np.ndarray:
    """Blocks [batch, 3, 10]: digit a, digit b, operation indicator."""
    a = np.asarray(a, dtype=np.int64)
    blocks = np.stack([
        one_hot(a, BLOCK_SIZE),
        one_hot(np.asarray(b, dtype=np.int64), BLOCK_SIZE),
        indicator_block(np.asarray(op_ids, dtype=np.int64), len(OPS), BLOCK_SIZE),
    ], axis=1)
    return blocks


def _as_batch(triples) -> TaskBatch:
    a = np.array([t[0] for t in triples], dtype=np.int64)
    b = np.array([t[1] for t in triples], dtype=np.int64)
    op_ids = np.array([OPS.index(t[2]) for t in triples], dtype=np.int64)
    targets = np.array([[addmul_oracle(*t)] for t in triples], dtype=np.int64)
    return TaskBatch(encode_addmul(a, b, op_ids), targets,
                     metadata={"a": a, "b": b, "op": op_ids})


def exhaustive_batch(triples) -> TaskBatch:
    """Deterministic batch over an explicit list of (a, b, op) triples."""
    return _as_batch(list(triples))


def gen_addmul_batch(stage: str, batch_size: int, rng: np.random.Generator,
                     alternate_split: bool = False) -> TaskBatch:
    """Uniform over each operation's allowed pairs, operations equiprobable."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    pools = {op: addmul_distribution(stage, op, alternate_split) for op in OPS}
    op_ids = rng.integers(0, len(OPS), size=batch_size)
    triples = []
    for oi in op_ids:
        op = OPS[oi]
        a, b = pools[op][rng.integers(0, len(pools[op]))]
        triples.append((a, b, op))
    return _as_batch(triples)
