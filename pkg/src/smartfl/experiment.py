"""Experiment orchestration: config parsing, the round loop, and metrics.

Every random decision draws from its own named stream of the master
seed (see the STREAM_* constants), so a run is a pure function of
(config, master_seed) and any piece of it can be reproduced in
isolation, e.g. a single client's training pass.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import aggregation as agg
from .attacks import AttackSpec, flip_labels, omniscient_updates, select_malicious
from .client import ClientUpdate, LocalConfig, local_update
from .core_math import make_rng
from .data import Dataset, ImbalanceSpec, Partition, dirichlet_partition, generate_synthetic, load_idx, sample_proxy
from .errors import ConfigurationError, DivergenceError
from .models import ModelSpec, evaluate, init_params

logger = logging.getLogger(__name__)

# RNG stream ids; client streams are keyed (STREAM_CLIENT, round, client_id).
STREAM_INIT = 0
STREAM_TRAIN_DATA = 1
STREAM_TEST_DATA = 2
STREAM_PROXY = 3
STREAM_PARTITION = 4
STREAM_MALICIOUS = 5
STREAM_SAMPLE = 6
STREAM_CLIENT = 7
STREAM_SERVER = 8

CSV_COLUMNS = (
    "round",
    "client_id",
    "coefficient",
    "is_malicious",
    "test_acc",
    "test_loss",
    "proxy_loss_before",
    "proxy_loss_after",
)


@dataclass(frozen=True)
class SyntheticSource:
    num_classes: int = 10
    input_dim: int = 32
    train_per_class: int = 200
    test_per_class: int = 100
    separation: float = 0.5


@dataclass(frozen=True)
class IdxSource:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    max_train: int = 0  # 0 = use everything
    max_test: int = 0


@dataclass(frozen=True)
class ProxyConfig:
    size: int = 64
    degree: float = 1.0
    labeled: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    data: SyntheticSource | IdxSource
    clients: int
    participation: float
    alpha: float
    proxy: ProxyConfig
    local: LocalConfig
    aggregation: agg.AggregationConfig
    attack: AttackSpec
    rounds: int
    master_seed: int
    output: str = "metrics.csv"
    eval_stride: int = 1

    def sampled_per_round(self) -> int:
        return math.ceil(self.participation * self.clients)


@dataclass
class RoundRecord:
    """Per-round metrics; coefficients align index-wise with sampled_ids."""

    round_index: int
    sampled_ids: list[int]
    coefficients: list[float] | None
    malicious_flags: list[bool]
    test_accuracy: float | None
    test_loss: float | None
    proxy_loss_before: float | None
    proxy_loss_after: float | None
    wall_millis: int


@dataclass
class RunResult:
    records: list[RoundRecord]
    final_params: np.ndarray
    partition: Partition
    malicious_ids: np.ndarray


# ---------------------------------------------------------------- config


def _section(raw: dict, key: str) -> dict:
    sub = raw.get(key, {})
    if not isinstance(sub, dict):
        raise ConfigurationError("expected a nested object", field=key)
    return sub


def _build(cls, raw: dict, key: str, **overrides):
    try:
        return cls(**{**_section(raw, key), **overrides})
    except TypeError as e:
        raise ConfigurationError(str(e), field=key) from e
    except (ValueError, KeyError) as e:
        raise ConfigurationError(str(e), field=key) from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed config mapping and build the typed config."""
    model_raw = _section(raw, "model")
    try:
        model = ModelSpec(**model_raw)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(str(e), field="model") from e

    data_raw = dict(_section(raw, "data"))
    source = data_raw.pop("source", "synthetic")
    if source == "synthetic":
        data = _build(SyntheticSource, {"data": data_raw}, "data")
        if data.input_dim != model.input_dim or data.num_classes != model.num_classes:
            raise ConfigurationError(
                "synthetic data dims must match the model spec", field="data"
            )
    elif source == "idx":
        data = _build(IdxSource, {"data": data_raw}, "data")
    else:
        raise ConfigurationError(f"unknown data source {source!r}", field="data.source")

    proxy = _build(ProxyConfig, raw, "proxy")
    local = _build(LocalConfig, raw, "local")
    local = replace(local, adam_betas=tuple(local.adam_betas))
    aggregation = _build(agg.AggregationConfig, raw, "aggregation")
    attack = _build(AttackSpec, raw, "attack")

    try:
        clients = int(raw["clients"])
        participation = float(raw["participation"])
        alpha = float(raw["alpha"])
        rounds = int(raw["rounds"])
        master_seed = int(raw.get("master_seed", 0))
    except KeyError as e:
        raise ConfigurationError("missing required key", field=str(e.args[0])) from e
    except (TypeError, ValueError) as e:
        raise ConfigurationError(str(e)) from e

    cfg = ExperimentConfig(
        model=model,
        data=data,
        clients=clients,
        participation=participation,
        alpha=alpha,
        proxy=proxy,
        local=local,
        aggregation=aggregation,
        attack=attack,
        rounds=rounds,
        master_seed=master_seed,
        output=str(raw.get("output", "metrics.csv")),
        eval_stride=int(raw.get("eval_stride", 1)),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    if cfg.clients < 1:
        raise ConfigurationError("need at least one client", field="clients")
    if not (0.0 < cfg.participation <= 1.0):
        raise ConfigurationError("participation must lie in (0, 1]", field="participation")
    if cfg.sampled_per_round() < 1:
        raise ConfigurationError("participation * clients must reach 1", field="participation")
    if cfg.alpha <= 0.0:
        raise ConfigurationError("alpha must be positive", field="alpha")
    if cfg.rounds < 0:
        raise ConfigurationError("rounds must be non-negative", field="rounds")
    if cfg.eval_stride < 1:
        raise ConfigurationError("eval_stride must be positive", field="eval_stride")
    strategy = cfg.aggregation.strategy
    if strategy in ("smartfl", "finetune", "abavg") and not cfg.proxy.labeled:
        raise ConfigurationError(f"{strategy} requires a labeled proxy set", field="proxy.labeled")
    if strategy == "smartfl_u" and cfg.proxy.labeled:
        raise ConfigurationError("smartfl_u expects an unlabeled proxy set", field="proxy.labeled")
    n = cfg.sampled_per_round()
    if strategy == "krum" and n < 2 * cfg.aggregation.krum_f + 3:
        raise ConfigurationError(
            f"krum with f={cfg.aggregation.krum_f} needs {2 * cfg.aggregation.krum_f + 3} "
            f"sampled clients, round samples {n}",
            field="aggregation.krum_f",
        )
    if strategy == "trimmed_mean" and n - 2 * int(cfg.aggregation.trim_beta * n) < 1:
        raise ConfigurationError("trim_beta removes every value", field="aggregation.trim_beta")


def load_config(path: str) -> ExperimentConfig:
    """Parse a JSON experiment config; errors carry line/field diagnostics."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(
                f"invalid JSON in {path}: {e.msg} (line {e.lineno}, column {e.colno})"
            ) from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config root in {path} must be an object")
    return config_from_dict(raw)


def override_config_value(raw: dict, dotted_key: str, value):
    """Set a nested key ('aggregation.server_lr') in a raw config mapping."""
    node = raw
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


# ---------------------------------------------------------------- run loop


def _load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if isinstance(d, SyntheticSource):
        # one draw for both splits so they share the same class mixture
        per_class = d.train_per_class + d.test_per_class
        full = generate_synthetic(
            d.num_classes, per_class, d.input_dim, d.separation,
            make_rng(cfg.master_seed, STREAM_TRAIN_DATA),
        )
        blocks = np.arange(len(full)).reshape(d.num_classes, per_class)
        train = full.subset(blocks[:, : d.train_per_class].ravel())
        test = full.subset(blocks[:, d.train_per_class :].ravel())
        return train, test
    train = load_idx(d.train_images, d.train_labels)
    test = load_idx(d.test_images, d.test_labels)
    if d.max_train:
        train = train.subset(np.arange(min(d.max_train, len(train))))
    if d.max_test:
        test = test.subset(np.arange(min(d.max_test, len(test))))
    for name, ds in (("train", train), ("test", test)):
        if ds.input_dim != cfg.model.input_dim:
            raise ConfigurationError(
                f"{name} input dim {ds.input_dim} does not match model "
                f"input_dim {cfg.model.input_dim}",
                field="model.input_dim",
            )
    return train, test


def client_rng(master_seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """The exact RNG stream run() hands to one client's local_update."""
    return make_rng(master_seed, STREAM_CLIENT, round_index, client_id)


def run(cfg: ExperimentConfig, on_round=None) -> RunResult:
    """Execute the federated loop and return per-round records.

    Round t samples ceil(participation * clients) ids without
    replacement, trains the sampled benign clients (label-flip clients
    train honestly on their poisoned shards), fabricates omniscient
    updates after all benign results are in, aggregates, and evaluates
    the new global model on the test set. `on_round(t, params)` runs
    after each round for callers that want extra instrumentation.
    """
    seed = cfg.master_seed
    train, test = _load_datasets(cfg)
    proxy_idx, remainder = sample_proxy(
        train, ImbalanceSpec(size=cfg.proxy.size, degree=cfg.proxy.degree),
        make_rng(seed, STREAM_PROXY),
    )
    partition = dirichlet_partition(
        train, cfg.clients, cfg.alpha, make_rng(seed, STREAM_PARTITION), indices=remainder
    )
    partition.proxy_indices = proxy_idx
    proxy_ds = train.subset(proxy_idx)
    malicious = select_malicious(cfg.attack, cfg.clients, make_rng(seed, STREAM_MALICIOUS))
    mal_set = set(int(m) for m in malicious)

    shards = []
    for m in range(cfg.clients):
        shard = train.subset(partition.client_indices[m])
        if cfg.attack.kind == "label_flip" and m in mal_set:
            shard = flip_labels(shard, train.num_classes)
        shards.append(shard)

    params = init_params(cfg.model, make_rng(seed, STREAM_INIT))
    report = evaluate(cfg.model, params, test)
    records = [
        RoundRecord(
            round_index=0,
            sampled_ids=[],
            coefficients=None,
            malicious_flags=[],
            test_accuracy=report.accuracy,
            test_loss=report.mean_loss,
            proxy_loss_before=None,
            proxy_loss_after=None,
            wall_millis=0,
        )
    ]

    k = cfg.sampled_per_round()
    for t in range(1, cfg.rounds + 1):
        t_start = time.perf_counter()
        sampled = np.sort(make_rng(seed, STREAM_SAMPLE, t).choice(cfg.clients, size=k, replace=False))
        sampled_ids = [int(m) for m in sampled]
        flags = [m in mal_set for m in sampled_ids]

        updates: list[ClientUpdate] = []
        for m in sampled_ids:
            if cfg.attack.kind == "omniscient" and m in mal_set:
                continue
            try:
                updates.append(
                    local_update(cfg.model, params, shards[m], cfg.local, client_rng(seed, t, m), client_id=m)
                )
            except DivergenceError as e:
                raise DivergenceError(str(e), round_index=t, step=e.step) from e

        if cfg.attack.kind == "omniscient":
            mal_sampled = [m for m in sampled_ids if m in mal_set]
            if mal_sampled and not updates:
                logger.warning("round %d: no benign clients sampled, skipping aggregation", t)
                records.append(
                    RoundRecord(
                        round_index=t,
                        sampled_ids=sampled_ids,
                        coefficients=None,
                        malicious_flags=flags,
                        test_accuracy=records[-1].test_accuracy,
                        test_loss=records[-1].test_loss,
                        proxy_loss_before=None,
                        proxy_loss_after=None,
                        wall_millis=int((time.perf_counter() - t_start) * 1000),
                    )
                )
                continue
            if mal_sampled:
                updates.extend(omniscient_updates(updates, params, len(mal_sampled), mal_sampled))
                updates.sort(key=lambda u: u.client_id)

        proxy_arg = proxy_ds if cfg.proxy.labeled else proxy_ds.inputs
        try:
            result = agg.aggregate(
                updates, cfg.aggregation, cfg.model, proxy=proxy_arg,
                rng=make_rng(seed, STREAM_SERVER, t),
            )
        except DivergenceError as e:
            raise DivergenceError(str(e), round_index=t, step=e.step) from e
        params = result.global_params

        if t % cfg.eval_stride == 0 or t == cfg.rounds:
            report = evaluate(cfg.model, params, test)
            acc, loss = report.accuracy, report.mean_loss
        else:
            acc, loss = None, None
        records.append(
            RoundRecord(
                round_index=t,
                sampled_ids=sampled_ids,
                coefficients=None if result.coefficients is None else [float(c) for c in result.coefficients],
                malicious_flags=flags,
                test_accuracy=acc,
                test_loss=loss,
                proxy_loss_before=result.proxy_loss_before,
                proxy_loss_after=result.proxy_loss_after,
                wall_millis=int((time.perf_counter() - t_start) * 1000),
            )
        )
        if on_round is not None:
            on_round(t, params)
    return RunResult(records=records, final_params=params, partition=partition, malicious_ids=malicious)


# ---------------------------------------------------------------- metrics


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    return repr(value) if isinstance(value, float) else str(value)


def write_metrics(records: list[RoundRecord], path: str, fmt: str = "csv") -> None:
    """Write records as long-format CSV (one row per sampled client) or JSON."""
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump([asdict(r) for r in records], f, indent=1)
            f.write("\n")
        return
    if fmt != "csv":
        raise ValueError(f"unknown metrics format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            shared = (
                _cell(r.test_accuracy),
                _cell(r.test_loss),
                _cell(r.proxy_loss_before),
                _cell(r.proxy_loss_after),
            )
            if not r.sampled_ids:
                writer.writerow((r.round_index, "", "", "") + shared)
                continue
            for i, m in enumerate(r.sampled_ids):
                coef = "" if r.coefficients is None else _cell(r.coefficients[i])
                writer.writerow((r.round_index, m, coef, _cell(r.malicious_flags[i])) + shared)


def records_from_json(path: str) -> list[RoundRecord]:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    return [RoundRecord(**item) for item in raw]


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Inverse of config_from_dict (modulo the data 'source' discriminator)."""
    raw = {
        "model": asdict(cfg.model),
        "data": asdict(cfg.data),
        "clients": cfg.clients,
        "participation": cfg.participation,
        "alpha": cfg.alpha,
        "proxy": asdict(cfg.proxy),
        "local": asdict(cfg.local),
        "aggregation": asdict(cfg.aggregation),
        "attack": asdict(cfg.attack),
        "rounds": cfg.rounds,
        "master_seed": cfg.master_seed,
        "output": cfg.output,
        "eval_stride": cfg.eval_stride,
    }
    raw["data"]["source"] = "synthetic" if isinstance(cfg.data, SyntheticSource) else "idx"
    raw["local"]["adam_betas"] = list(cfg.local.adam_betas)
    return copy.deepcopy(raw)
