"""Iterated conditional-update task over five digit variables.

Each of the five rules is a cyclic rotation of the same role assignment: the
slot playing role E receives (A+1) mod 10 when the C-role value exceeds the
D-role value and (B+1) mod 10 otherwise; the other four slots are unchanged.
Training always applies the rule exactly twice; evaluation unrolls the same
network for 1 through 9 applications.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batches import TaskBatch, one_hot, indicator_block

__all__ = [
    "NUM_VARS",
    "NUM_RULES",
    "rule_slots",
    "algo_apply_rule",
    "encode_algo_state",
    "gen_algo_episode",
    "draw_neuron_permutation",
    "AlgoEpisode",
]

NUM_VARS = 5
NUM_RULES = 5
BLOCK_SIZE = 10
# 5 variable blocks + 1 rule indicator block, flattened
INPUT_NEURONS = (NUM_VARS + 1) * BLOCK_SIZE


def rule_slots(rule_id: int) -> list[int]:
    """Slot index for each role (A, B, C, D, E) under the rotated assignment."""
    if not 0 <= rule_id < NUM_RULES:
        raise ValueError(f"rule_id must be in [0, {NUM_RULES}), got {rule_id}")
    return [(role + rule_id) % NUM_VARS for role in range(NUM_VARS)]


def algo_apply_rule(variables, rule_id: int) -> np.ndarray:
    """Apply one rule to [.., 5] variable arrays; touches exactly the E slot."""
    v = np.asarray(variables, dtype=np.int64)
    if v.shape[-1] != NUM_VARS:
        raise ValueError(f"expected trailing axis of {NUM_VARS} variables, got {v.shape}")
    if v.size and (v.min() < 0 or v.max() >= 10):
        raise ValueError("variables must be digits in [0, 10)")
    sa, sb, sc, sd, se = rule_slots(rule_id)
    out = v.copy()
    cond = v[..., sc] > v[..., sd]
    out[..., se] = np.where(cond, (v[..., sa] + 1) % 10, (v[..., sb] + 1) % 10)
    return out


def encode_algo_state(variables, rule_ids, neuron_permutation=None) -> np.ndarray:
    """Blocks [batch, 6, 10]: five digit blocks plus the rule indicator.

    When a fixed neuron permutation is given it scrambles the flattened
    60-value input, which is then reshaped back into blocks.
    """
    v = np.asarray(variables, dtype=np.int64)
    blocks = [one_hot(v[:, i], BLOCK_SIZE) for i in range(NUM_VARS)]
    blocks.append(indicator_block(np.asarray(rule_ids, dtype=np.int64), NUM_RULES, BLOCK_SIZE))
    out = np.stack(blocks, axis=1)
    if neuron_permutation is not None:
        perm = np.asarray(neuron_permutation)
        if sorted(perm.tolist()) != list(range(INPUT_NEURONS)):
            raise ValueError(f"neuron permutation must cover [0, {INPUT_NEURONS})")
        flat = out.reshape(out.shape[0], INPUT_NEURONS)
        out = flat[:, perm].reshape(out.shape)
    return out


def scramble_blocks(blocks, neuron_permutation) -> np.ndarray:
    """Apply the fixed neuron permutation to already-encoded [batch, 6, 10]."""
    flat = np.asarray(blocks).reshape(len(blocks), INPUT_NEURONS)
    return flat[:, np.asarray(neuron_permutation)].reshape(len(blocks), NUM_VARS + 1, BLOCK_SIZE)


def draw_neuron_permutation(rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(INPUT_NEURONS)


@dataclass
class AlgoEpisode:
    """Ground-truth trajectory: states [batch, T+1, 5], rules [batch, T]."""

    states: np.ndarray
    rule_ids: np.ndarray
    neuron_permutation: np.ndarray | None = None

    @property
    def initial(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def num_iterations(self) -> int:
        return self.rule_ids.shape[1]

    def step_batch(self, t: int) -> TaskBatch:
        """Teacher-forced batch for iteration t (ground-truth state in)."""
        inputs = encode_algo_state(self.states[:, t], self.rule_ids[:, t],
                                   self.neuron_permutation)
        return TaskBatch(inputs, self.states[:, t + 1].astype(np.int64),
                         metadata={"rule": self.rule_ids[:, t]})


def gen_algo_episode(batch_size: int, num_iterations: int, rng: np.random.Generator,
                     neuron_permutation=None) -> AlgoEpisode:
    if num_iterations < 1:
        raise ValueError(f"num_iterations must be >= 1, got {num_iterations}")
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    states = np.empty((batch_size, num_iterations + 1, NUM_VARS), dtype=np.int64)
    states[:, 0] = rng.integers(0, 10, size=(batch_size, NUM_VARS))
    rule_ids = rng.integers(0, NUM_RULES, size=(batch_size, num_iterations))
    for t in range(num_iterations):
        # rules differ per example, apply each rule id to its own subset
        cur = states[:, t]
        nxt = cur.copy()
        for rid in range(NUM_RULES):
            mask = rule_ids[:, t] == rid
            if mask.any():
                nxt[mask] = algo_apply_rule(cur[mask], rid)
        states[:, t + 1] = nxt
    return AlgoEpisode(states, rule_ids,
                       None if neuron_permutation is None else np.asarray(neuron_permutation))
