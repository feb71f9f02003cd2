"""Server-side aggregation strategies.

The coefficient-optimizing strategies (smartfl, smartfl_u) run projected
minibatch gradient descent over the simplex of client-combination
weights, then pick the best of {optimized point, the sample-weighted
initialization, every client vertex} by full-proxy loss. That final
selection makes the per-round descent guarantee (aggregate loss never
above the best client's loss) an invariant rather than a hope.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .client import ClientUpdate, ensemble_logits
from .core_math import coefficient_gradient, convex_combine, project_simplex
from .errors import ConfigurationError, DivergenceError, InvalidArgumentError
from .models import Batch, ModelSpec, ce_loss_and_grad, evaluate, kl_loss_and_grad
from .optim import Adam

STRATEGIES = (
    "fedavg",
    "smartfl",
    "smartfl_u",
    "finetune",
    "abavg",
    "krum",
    "coord_median",
    "trimmed_mean",
)

_PROXY_STRATEGIES = ("smartfl", "smartfl_u", "finetune", "abavg")


@dataclass(frozen=True)
class AggregationConfig:
    strategy: str = "fedavg"
    server_epochs: int = 20
    server_lr: float = 1e-2
    server_batch: int = 32
    trim_beta: float = 0.2
    krum_f: int = 0
    finetune_epochs: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"unknown strategy {self.strategy!r}", field="aggregation.strategy"
            )
        if self.server_epochs < 1 or self.server_batch < 1 or self.finetune_epochs < 1:
            raise ConfigurationError(
                "server_epochs, server_batch, finetune_epochs must be positive",
                field="aggregation",
            )
        if self.server_lr < 0.0:
            raise ConfigurationError("server_lr must be non-negative", field="aggregation.server_lr")
        if not (0.0 <= self.trim_beta < 0.5):
            raise ConfigurationError("trim_beta must lie in [0, 0.5)", field="aggregation.trim_beta")
        if self.krum_f < 0:
            raise ConfigurationError("krum_f must be non-negative", field="aggregation.krum_f")


@dataclass
class AggregationResult:
    global_params: np.ndarray
    coefficients: np.ndarray | None = None
    proxy_loss_before: float | None = None
    proxy_loss_after: float | None = None


def _params_of(clients: list[ClientUpdate]) -> list[np.ndarray]:
    if len(clients) == 0:
        raise InvalidArgumentError("aggregation needs at least one client update")
    return [c.params for c in clients]


def _fedavg_weights(clients: list[ClientUpdate]) -> np.ndarray:
    counts = np.array([c.sample_count for c in clients], dtype=np.float64)
    total = counts.sum()
    if total <= 0.0:
        raise InvalidArgumentError("total sample count must be positive")
    return counts / total


def fedavg(clients: list[ClientUpdate]) -> AggregationResult:
    """Sample-count-weighted average of the client models."""
    models = _params_of(clients)
    p = _fedavg_weights(clients)
    return AggregationResult(global_params=convex_combine(models, p), coefficients=p)


def _check_proxy(proxy, labeled: bool):
    if proxy is None or len(proxy) == 0:
        raise InvalidArgumentError("this strategy requires a non-empty proxy set")
    if labeled and getattr(proxy, "labels", None) is None:
        raise InvalidArgumentError("this strategy requires a labeled proxy set")


def _optimize_coefficients(models, p_init, n_proxy, batch_loss_grad, cfg, rng):
    """Projected minibatch gradient descent on the combination weights."""
    p = p_init.copy()
    for _ in range(cfg.server_epochs):
        order = rng.permutation(n_proxy)
        for start in range(0, n_proxy, cfg.server_batch):
            sel = order[start : start + cfg.server_batch]
            w = convex_combine(models, p)
            loss, wgrad = batch_loss_grad(w, sel)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite proxy loss during coefficient descent")
            p = project_simplex(p - cfg.server_lr * coefficient_gradient(models, wgrad))
    return p


def _select_descent_candidate(models, p_init, p_opt, full_loss):
    """Best of {init, optimized, vertices} by full-proxy loss.

    Candidate order resolves exact ties: the initialization wins over the
    optimized point, and vertex ties go to the lowest client index. The
    chosen loss is therefore never above the best client vertex, which is
    the per-round descent invariant the convergence argument needs.
    """
    candidates = [p_init, p_opt]
    for m in range(len(models)):
        vertex = np.zeros(len(models))
        vertex[m] = 1.0
        candidates.append(vertex)
    losses = [full_loss(convex_combine(models, c)) for c in candidates]
    best = int(np.argmin(losses))
    return candidates[best], losses[0], losses[best]


def smartfl(
    clients: list[ClientUpdate], proxy, spec: ModelSpec, cfg: AggregationConfig, rng
) -> AggregationResult:
    """Optimize the aggregate within the hull of client models on labeled proxy data.

    Coefficients start at the sample-weighted (fedavg) point, take
    cfg.server_epochs epochs of projected minibatch gradient steps on the
    proxy cross-entropy, and pass through the descent candidate selection.
    """
    _check_proxy(proxy, labeled=True)
    models = _params_of(clients)
    p_init = _fedavg_weights(clients)

    def batch_loss_grad(w, sel):
        return ce_loss_and_grad(spec, w, Batch(proxy.inputs[sel], proxy.labels[sel]))

    p_opt = _optimize_coefficients(models, p_init, len(proxy), batch_loss_grad, cfg, rng)

    def full_loss(w):
        return evaluate(spec, w, proxy).mean_loss

    p_star, before, after = _select_descent_candidate(models, p_init, p_opt, full_loss)
    if not np.isfinite(after):
        raise DivergenceError("non-finite proxy loss after coefficient optimization")
    return AggregationResult(
        global_params=convex_combine(models, p_star),
        coefficients=p_star,
        proxy_loss_before=before,
        proxy_loss_after=after,
    )


def smartfl_u(
    clients: list[ClientUpdate], proxy_inputs, spec: ModelSpec, cfg: AggregationConfig, rng
) -> AggregationResult:
    """Unlabeled-proxy variant: distill toward the client ensemble.

    Pseudo-label targets are the averaged client softmax outputs,
    computed once per round; the coefficient descent and the candidate
    selection then use the KL loss against those targets.
    """
    x = np.asarray(getattr(proxy_inputs, "inputs", proxy_inputs), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidArgumentError("smartfl_u requires a non-empty proxy input matrix")
    models = _params_of(clients)
    p_init = _fedavg_weights(clients)
    targets = ensemble_logits(clients, spec, x)

    def batch_loss_grad(w, sel):
        return kl_loss_and_grad(spec, w, Batch(x[sel], target_probs=targets[sel]))

    p_opt = _optimize_coefficients(models, p_init, x.shape[0], batch_loss_grad, cfg, rng)

    def full_loss(w):
        return kl_loss_and_grad(spec, w, Batch(x, target_probs=targets))[0]

    p_star, before, after = _select_descent_candidate(models, p_init, p_opt, full_loss)
    if not np.isfinite(after):
        raise DivergenceError("non-finite proxy loss after coefficient optimization")
    return AggregationResult(
        global_params=convex_combine(models, p_star),
        coefficients=p_star,
        proxy_loss_before=before,
        proxy_loss_after=after,
    )


def finetune_fullspace(
    clients: list[ClientUpdate], proxy, spec: ModelSpec, cfg: AggregationConfig, rng
) -> AggregationResult:
    """Adam finetuning of every parameter on the proxy set, from the fedavg point."""
    _check_proxy(proxy, labeled=True)
    w = fedavg(clients).global_params
    before = evaluate(spec, w, proxy).mean_loss
    opt = Adam(w.size, cfg.server_lr)
    n = len(proxy)
    for _ in range(cfg.finetune_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.server_batch):
            sel = order[start : start + cfg.server_batch]
            loss, grad = ce_loss_and_grad(spec, w, Batch(proxy.inputs[sel], proxy.labels[sel]))
            if not np.isfinite(loss):
                raise DivergenceError("non-finite proxy loss during finetuning")
            w = opt.step(w, grad)
    return AggregationResult(
        global_params=w,
        proxy_loss_before=before,
        proxy_loss_after=evaluate(spec, w, proxy).mean_loss,
    )


def abavg(clients: list[ClientUpdate], proxy, spec: ModelSpec) -> AggregationResult:
    """Weights proportional to each client's proxy accuracy (uniform if all zero)."""
    _check_proxy(proxy, labeled=True)
    models = _params_of(clients)
    accs = np.array([evaluate(spec, m, proxy).accuracy for m in models])
    if accs.sum() == 0.0:
        p = np.full(len(models), 1.0 / len(models))
    else:
        p = accs / accs.sum()
    return AggregationResult(global_params=convex_combine(models, p), coefficients=p)


def krum(clients: list[ClientUpdate], f: int) -> AggregationResult:
    """Select the client whose n-f-2 nearest neighbors are closest overall."""
    n = len(clients)
    if n < 2 * f + 3:
        raise ConfigurationError(
            f"krum needs at least 2f+3 = {2 * f + 3} clients, got {n}", field="aggregation.krum_f"
        )
    stacked = np.stack(_params_of(clients))
    diff = stacked[:, None, :] - stacked[None, :, :]
    sq_dist = np.einsum("ijk,ijk->ij", diff, diff)
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(sq_dist[i], i)
        others.sort()
        scores[i] = others[: n - f - 2].sum()
    chosen = int(np.argmin(scores))  # ties -> lowest index
    p = np.zeros(n)
    p[chosen] = 1.0
    return AggregationResult(global_params=convex_combine(_params_of(clients), p), coefficients=p)


def coord_median(clients: list[ClientUpdate]) -> AggregationResult:
    """Coordinate-wise median (mean of the two middle values for even n)."""
    stacked = np.stack(_params_of(clients))
    return AggregationResult(global_params=np.median(stacked, axis=0))


def trimmed_mean(clients: list[ClientUpdate], beta: float) -> AggregationResult:
    """Per-coordinate mean after dropping the floor(beta*n) extremes each side."""
    stacked = np.stack(_params_of(clients))
    n = stacked.shape[0]
    k = int(beta * n)
    if n - 2 * k < 1:
        raise InvalidArgumentError(f"trimming {k} per side leaves no values out of {n}")
    ordered = np.sort(stacked, axis=0)
    kept = ordered[k : n - k] if k else ordered
    return AggregationResult(global_params=kept.mean(axis=0))


def aggregate(
    clients: list[ClientUpdate],
    cfg: AggregationConfig,
    spec: ModelSpec,
    proxy=None,
    rng=None,
) -> AggregationResult:
    """Dispatch to the configured strategy."""
    s = cfg.strategy
    if s == "fedavg":
        return fedavg(clients)
    if s == "smartfl":
        return smartfl(clients, proxy, spec, cfg, rng)
    if s == "smartfl_u":
        return smartfl_u(clients, proxy, spec, cfg, rng)
    if s == "finetune":
        return finetune_fullspace(clients, proxy, spec, cfg, rng)
    if s == "abavg":
        return abavg(clients, proxy, spec)
    if s == "krum":
        return krum(clients, cfg.krum_f)
    if s == "coord_median":
        return coord_median(clients)
    if s == "trimmed_mean":
        return trimmed_mean(clients, cfg.trim_beta)
    raise ConfigurationError(f"unknown strategy {s!r}", field="aggregation.strategy")
