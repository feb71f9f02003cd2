"""Poisoning behaviors for a configurable fraction of clients."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .client import ClientUpdate
from .data import Dataset
from .errors import AttackInapplicableError, InvalidArgumentError

ATTACK_KINDS = ("none", "label_flip", "omniscient")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    rate: float = 0.0  # fraction of clients that are malicious

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidArgumentError(f"unknown attack kind {self.kind!r}")
        if not (0.0 <= self.rate < 1.0):
            raise InvalidArgumentError("attack rate must lie in [0, 1)")


def select_malicious(spec: AttackSpec, num_clients: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed-for-the-run malicious set: floor(rate * M) ids, seeded draw."""
    if spec.kind == "none":
        return np.empty(0, dtype=np.int64)
    k = int(spec.rate * num_clients)
    return np.sort(rng.choice(num_clients, size=k, replace=False)).astype(np.int64)


def flip_labels(shard: Dataset, num_classes: int) -> Dataset:
    """Data poisoning: every label c becomes (c + 1) mod num_classes."""
    return Dataset(shard.inputs, (shard.labels + 1) % num_classes, shard.num_classes)


def omniscient_updates(
    benign: list[ClientUpdate],
    global_params: np.ndarray,
    n_malicious: int,
    malicious_ids=None,
) -> list[ClientUpdate]:
    """Model poisoning that cancels the round's benign progress.

    Each malicious client submits global - d, where d is the
    sample-weighted mean of the benign updates (w_m - global) observed
    this round; the attacker is assumed to see all of them. Reported
    sample counts mimic an average benign client (mean count, rounded up).
    """
    if len(benign) == 0:
        raise AttackInapplicableError("omniscient attack needs at least one benign update")
    g = np.asarray(global_params, dtype=np.float64)
    weights = np.array([c.sample_count for c in benign], dtype=np.float64)
    deltas = np.stack([c.params - g for c in benign])
    mean_delta = (weights / weights.sum()) @ deltas
    params = g - mean_delta
    claimed = math.ceil(float(np.mean([c.sample_count for c in benign])))
    ids = list(malicious_ids) if malicious_ids is not None else [-1] * n_malicious
    return [
        ClientUpdate(params=params.copy(), sample_count=claimed, client_id=int(ids[i]))
        for i in range(n_malicious)
    ]
