"""Executable invariant suite behind the `check` CLI subcommand.

Each check is independent, seeded, and fast; together they cover the
numerical contracts the simulator depends on: exact simplex projection,
analytic gradients, the per-round descent property of coefficient
optimization, hull membership, robust-aggregation containment, and
bit-level reproducibility of whole runs.
"""
from __future__ import annotations

import itertools
import os
import tempfile

import numpy as np

from . import experiment as exp
from .aggregation import AggregationConfig, coord_median, fedavg, krum, smartfl, trimmed_mean
from .attacks import AttackSpec
from .client import ClientUpdate, LocalConfig, local_update
from .core_math import convex_combine, coefficient_gradient, make_rng, project_simplex
from .data import ImbalanceSpec, dirichlet_partition, generate_synthetic, sample_proxy
from .models import Batch, ModelSpec, ce_loss_and_grad, evaluate, init_params, kl_loss_and_grad, softmax, forward


def grid_simplex_oracle(v: np.ndarray, step: float) -> np.ndarray:
    """Brute-force nearest simplex point on a regular grid (dims 1..3)."""
    n = v.size
    if n == 1:
        return np.array([1.0])
    ticks = np.arange(0.0, 1.0 + step / 2, step)
    best, best_d = None, np.inf
    if n == 2:
        for a in ticks:
            cand = np.array([a, 1.0 - a])
            d = float(((cand - v) ** 2).sum())
            if d < best_d:
                best, best_d = cand, d
        return best
    for a in ticks:
        for b in np.arange(0.0, 1.0 - a + step / 2, step):
            cand = np.array([a, b, 1.0 - a - b])
            d = float(((cand - v) ** 2).sum())
            if d < best_d:
                best, best_d = cand, d
    return best


def check_simplex_projection() -> tuple[bool, str]:
    rng = make_rng(20240101)
    cases = [np.array([1.2, -0.2]), np.array([0.5, 0.5]), np.array([3.0, -1.0, 0.2])]
    for _ in range(20):
        dim = int(rng.integers(1, 4))
        cases.append(rng.normal(scale=2.0, size=dim))
    for v in cases:
        p = project_simplex(v)
        if not (np.all(p >= 0.0) and abs(p.sum() - 1.0) <= 1e-9):
            return False, f"projection of {v} off the simplex"
        again = project_simplex(p)
        if not np.array_equal(again, p):
            return False, f"projection not idempotent for {v}"
        step = 1e-4 if v.size <= 2 else 2e-3
        oracle = grid_simplex_oracle(v, step)
        if np.max(np.abs(p - oracle)) > 2 * step:
            return False, f"projection of {v} disagrees with grid oracle"
    return True, f"{len(cases)} vectors vs grid oracle, idempotence exact"


def _random_instance(rng):
    kind = "logistic" if rng.random() < 0.5 else "mlp"
    d = int(rng.integers(2, 6))
    c = int(rng.integers(2, 5))
    h = int(rng.integers(2, 5)) if kind == "mlp" else 0
    act = "relu" if rng.random() < 0.5 else "tanh"
    spec = ModelSpec(kind=kind, input_dim=d, num_classes=c, hidden_dim=h, activation=act)
    params = rng.normal(scale=0.8, size=spec.param_count())
    n = int(rng.integers(1, 5))
    x = rng.uniform(0.0, 1.0, size=(n, d))
    y = rng.integers(0, c, size=n)
    return spec, params, x, y


def _fd_grad(loss_fn, params, step=1e-5):
    g = np.empty_like(params)
    for i in range(params.size):
        hi = params.copy()
        lo = params.copy()
        hi[i] += step
        lo[i] -= step
        g[i] = (loss_fn(hi) - loss_fn(lo)) / (2 * step)
    return g


def _rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def check_model_gradients() -> tuple[bool, str]:
    rng = make_rng(20240102)
    worst = 0.0
    for i in range(110):
        spec, params, x, y = _random_instance(rng)
        batch = Batch(inputs=x, labels=y)
        _, g = ce_loss_and_grad(spec, params, batch)
        fd = _fd_grad(lambda p: ce_loss_and_grad(spec, p, batch)[0], params)
        err = _rel_err(g, fd)
        t = softmax(rng.normal(size=(x.shape[0], spec.num_classes)))
        kb = Batch(inputs=x, target_probs=t)
        _, gk = kl_loss_and_grad(spec, params, kb)
        fdk = _fd_grad(lambda p: kl_loss_and_grad(spec, p, kb)[0], params)
        err = max(err, _rel_err(gk, fdk))
        worst = max(worst, err)
        if err >= 1e-4:
            return False, f"instance {i}: relative error {err:.2e}"
    return True, f"110 instances, worst relative error {worst:.2e}"


def check_coefficient_gradient() -> tuple[bool, str]:
    rng = make_rng(20240103)
    worst = 0.0
    for i in range(100):
        spec, _, x, y = _random_instance(rng)
        n_models = int(rng.integers(2, 6))
        models = [rng.normal(scale=0.8, size=spec.param_count()) for _ in range(n_models)]
        p = rng.dirichlet(np.ones(n_models))
        batch = Batch(inputs=x, labels=y)
        stacked = np.stack(models)

        def loss_at(q):
            return ce_loss_and_grad(spec, q @ stacked, batch)[0]

        _, wgrad = ce_loss_and_grad(spec, p @ stacked, batch)
        g = coefficient_gradient(models, wgrad)
        fd = _fd_grad(loss_at, p)
        err = _rel_err(g, fd)
        worst = max(worst, err)
        if err >= 1e-4:
            return False, f"instance {i}: relative error {err:.2e}"
    return True, f"100 instances, worst relative error {worst:.2e}"


def _descent_fixture():
    spec = ModelSpec(kind="logistic", input_dim=8, num_classes=4)
    rng = make_rng(20240104)
    train = generate_synthetic(4, 60, 8, 0.6, make_rng(20240104, 1))
    proxy_idx, remainder = sample_proxy(train, ImbalanceSpec(size=32), make_rng(20240104, 2))
    part = dirichlet_partition(train, 6, 0.1, make_rng(20240104, 3), indices=remainder)
    proxy = train.subset(proxy_idx)
    shards = [train.subset(ix) for ix in part.client_indices]
    return spec, rng, proxy, shards


def check_smartfl_descent() -> tuple[bool, str]:
    spec, rng, proxy, shards = _descent_fixture()
    local = LocalConfig(epochs=1, batch_size=16)
    cfg = AggregationConfig(strategy="smartfl", server_epochs=5, server_lr=1e-2, server_batch=16)
    params = init_params(spec, make_rng(20240104, 4))
    for t in range(1, 31):
        sampled = np.sort(rng.choice(len(shards), size=3, replace=False))
        updates = [
            local_update(spec, params, shards[m], local, make_rng(20240104, 5, t, int(m)), client_id=int(m))
            for m in sampled
        ]
        result = smartfl(updates, proxy, spec, cfg, make_rng(20240104, 6, t))
        vertex_losses = [evaluate(spec, u.params, proxy).mean_loss for u in updates]
        bound = min(result.proxy_loss_before, min(vertex_losses))
        if result.proxy_loss_after > bound:
            return False, f"round {t}: loss {result.proxy_loss_after} above bound {bound}"
        params = result.global_params
    return True, "descent bound held on all 30 rounds"


def check_hull_membership() -> tuple[bool, str]:
    rng = make_rng(20240105)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        d = int(rng.integers(1, 30))
        models = [rng.normal(scale=float(rng.uniform(0.1, 100.0)), size=d) for _ in range(n)]
        p = project_simplex(rng.normal(size=n))
        combo = convex_combine(models, p)
        stacked = np.stack(models)
        if np.any(combo < stacked.min(axis=0)) or np.any(combo > stacked.max(axis=0)):
            return False, "combination escaped the coordinate envelope"
    return True, "200 random combinations stayed in the envelope"


def check_krum_vertex() -> tuple[bool, str]:
    rng = make_rng(20240106)
    for _ in range(50):
        n = int(rng.integers(3, 9))
        f = int(rng.integers(0, (n - 3) // 2 + 1))
        ups = [ClientUpdate(rng.normal(size=12), sample_count=1, client_id=i) for i in range(n)]
        res = krum(ups, f)
        if not any(np.array_equal(res.global_params, u.params) for u in ups):
            return False, "krum output is not one of the input models"
    return True, "50 random krum selections returned exact input vertices"


def check_robust_range() -> tuple[bool, str]:
    rng = make_rng(20240107)
    for _ in range(50):
        d = int(rng.integers(1, 20))
        benign = [ClientUpdate(rng.normal(size=d), 1, i) for i in range(4)]
        lo = np.min([b.params for b in benign], axis=0)
        hi = np.max([b.params for b in benign], axis=0)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        outlier = ClientUpdate(np.full(d, sign * 1e6), 1, 4)
        med = coord_median(benign + [outlier]).global_params
        if np.any(med < lo) or np.any(med > hi):
            return False, "median escaped the benign range"
        # one outlier <= floor(0.2 * 5) = 1 trimmed per side
        tm = trimmed_mean(benign + [outlier], 0.2).global_params
        if np.any(tm < lo) or np.any(tm > hi):
            return False, "trimmed mean escaped the benign range"
    return True, "median and trimmed mean stayed in the benign range with 1e6 outliers"


def _tiny_config(strategy="fedavg", clients=4, rounds=3, seed=7) -> exp.ExperimentConfig:
    return exp.config_from_dict(
        {
            "model": {"kind": "logistic", "input_dim": 6, "num_classes": 3},
            "data": {
                "source": "synthetic",
                "num_classes": 3,
                "input_dim": 6,
                "train_per_class": 40,
                "test_per_class": 20,
                "separation": 0.6,
            },
            "clients": clients,
            "participation": 1.0,
            "alpha": 0.5,
            "proxy": {"size": 12},
            "local": {"epochs": 1, "batch_size": 16},
            "aggregation": {"strategy": strategy, "server_epochs": 3, "server_batch": 16},
            "attack": {"kind": "none"},
            "rounds": rounds,
            "master_seed": seed,
        }
    )


def check_fedavg_centralized_equivalence() -> tuple[bool, str]:
    cfg = _tiny_config(clients=1, rounds=4, seed=11)
    result = exp.run(cfg)
    train, _ = exp._load_datasets(cfg)
    _, remainder = sample_proxy(
        train, ImbalanceSpec(size=cfg.proxy.size, degree=cfg.proxy.degree),
        make_rng(cfg.master_seed, exp.STREAM_PROXY),
    )
    part = dirichlet_partition(
        train, 1, cfg.alpha, make_rng(cfg.master_seed, exp.STREAM_PARTITION), indices=remainder
    )
    shard = train.subset(part.client_indices[0])
    params = init_params(cfg.model, make_rng(cfg.master_seed, exp.STREAM_INIT))
    for t in range(1, cfg.rounds + 1):
        params = local_update(
            cfg.model, params, shard, cfg.local, exp.client_rng(cfg.master_seed, t, 0), client_id=0
        ).params
    if not np.array_equal(params, result.final_params):
        return False, "single-client run differs from direct local training"
    return True, "bit-exact match with direct local training over 4 rounds"


def check_run_determinism() -> tuple[bool, str]:
    cfg = _tiny_config(strategy="smartfl", rounds=3, seed=13)
    with tempfile.TemporaryDirectory() as tmp:
        paths = [os.path.join(tmp, f"run{i}.csv") for i in (0, 1)]
        blobs = []
        for p in paths:
            res = exp.run(cfg)
            exp.write_metrics(res.records, p)
            with open(p, "rb") as f:
                blobs.append(f.read())
    if blobs[0] != blobs[1]:
        return False, "repeated runs wrote different CSV bytes"
    return True, "two identical runs produced byte-identical CSVs"


CHECKS = (
    ("simplex projection vs grid oracle", check_simplex_projection),
    ("model gradients vs finite differences", check_model_gradients),
    ("coefficient gradient vs finite differences", check_coefficient_gradient),
    ("coefficient descent bound over 30 rounds", check_smartfl_descent),
    ("convex hull membership", check_hull_membership),
    ("krum returns an input vertex", check_krum_vertex),
    ("median/trimmed mean containment", check_robust_range),
    ("single-client fedavg equals centralized", check_fedavg_centralized_equivalence),
    ("full-run determinism", check_run_determinism),
)


def run_all(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        passed, detail = fn()
        ok = ok and passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return ok
