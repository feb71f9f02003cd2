"""Client-side local training and prediction ensembling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InvalidArgumentError
from .models import Batch, ModelSpec, ce_loss_and_grad, forward, softmax
from .optim import make_optimizer


@dataclass(frozen=True)
class LocalConfig:
    """Hyperparameters for one client's local training pass."""

    epochs: int = 1
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    prox_mu: float = 0.0  # proximal pull toward the global model; 0 disables

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be positive")
        if self.lr < 0.0:
            raise InvalidArgumentError("lr must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise InvalidArgumentError("adam betas must lie in [0, 1)")
        if self.prox_mu < 0.0:
            raise InvalidArgumentError("prox_mu must be non-negative")


@dataclass
class ClientUpdate:
    """One client's trained parameters and its claimed sample count."""

    params: np.ndarray
    sample_count: int
    client_id: int = 0


def local_update(
    spec: ModelSpec,
    global_params: np.ndarray,
    shard,
    cfg: LocalConfig,
    rng: np.random.Generator,
    client_id: int = 0,
) -> ClientUpdate:
    """Train a copy of the global model on one client's shard.

    Runs cfg.epochs passes of seeded-shuffle minibatch optimization with
    a fresh optimizer state. The trailing partial batch is kept (shards
    under extreme non-IID splits can be smaller than batch_size). With
    prox_mu > 0 the per-batch loss gains (prox_mu/2) * ||w - global||^2.
    Deterministic given (global_params, shard, cfg, rng state).
    """
    n = len(shard)
    if n == 0:
        raise InvalidArgumentError("client shard is empty")
    anchor = np.asarray(global_params, dtype=np.float64)
    w = anchor.copy()
    opt = make_optimizer(cfg.optimizer, w.size, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            batch = Batch(inputs=shard.inputs[sel], labels=shard.labels[sel])
            loss, grad = ce_loss_and_grad(spec, w, batch)
            if cfg.prox_mu > 0.0:
                drift = w - anchor
                loss += 0.5 * cfg.prox_mu * float(drift @ drift)
                grad = grad + cfg.prox_mu * drift
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite local loss on client {client_id}", step=step
                )
            w = opt.step(w, grad)
            step += 1
    return ClientUpdate(params=w, sample_count=n, client_id=client_id)


def ensemble_logits(clients: list[ClientUpdate], spec: ModelSpec, batch) -> np.ndarray:
    """Average of the clients' softmax outputs; rows sum to 1.

    Used as the pseudo-label targets when the server proxy set is
    unlabeled.
    """
    if len(clients) == 0:
        raise InvalidArgumentError("ensemble needs at least one client")
    acc = np.zeros_like(softmax(forward(spec, clients[0].params, batch)))
    for c in clients:
        acc += softmax(forward(spec, c.params, batch))
    return acc / len(clients)
