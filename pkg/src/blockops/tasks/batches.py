"""Shared batch containers and block encoders for the experiment tasks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TaskBatch", "one_hot", "indicator_block"]


@dataclass
class TaskBatch:
    """Inputs as a block tensor [batch, blocks, block_size], integer targets
    [batch, target_blocks], and free-form metadata (pair values, permutation
    ids and the like) for oracles and inspection."""

    inputs: np.ndarray
    targets: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be [batch, blocks, block_size], got {self.inputs.shape}")
        if self.targets.ndim != 2 or self.targets.shape[0] != self.inputs.shape[0]:
            raise ValueError(f"targets must be [batch, target_blocks], got {self.targets.shape}")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def one_hot(values, num_classes: int, dtype=np.float64) -> np.ndarray:
    """One-hot encode an integer array along a trailing new axis."""
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() >= num_classes):
        raise ValueError(f"values out of range [0, {num_classes})")
    out = np.zeros(values.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, values[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def indicator_block(ids, num_ids: int, block_size: int, dtype=np.float64) -> np.ndarray:
    """One-hot over ``num_ids`` zero-padded (never truncated) to block size."""
    if num_ids > block_size:
        raise ValueError(f"cannot fit {num_ids} indicator states in a block of {block_size}")
    hot = one_hot(ids, num_ids, dtype=dtype)
    pad = np.zeros(hot.shape[:-1] + (block_size - num_ids,), dtype=dtype)
    return np.concatenate([hot, pad], axis=-1)
