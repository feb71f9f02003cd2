"""Deterministic federated-learning simulator with aggregation optimized
over the convex hull of client models, plus robust baselines and
poisoning attacks for studying their behavior at desk scale."""

from .aggregation import (
    AggregationConfig,
    AggregationResult,
    abavg,
    aggregate,
    coord_median,
    fedavg,
    finetune_fullspace,
    krum,
    smartfl,
    smartfl_u,
    trimmed_mean,
)
from .attacks import AttackSpec, flip_labels, omniscient_updates, select_malicious
from .client import ClientUpdate, LocalConfig, ensemble_logits, local_update
from .core_math import (
    coefficient_gradient,
    convex_combine,
    is_simplex_point,
    make_rng,
    project_simplex,
)
from .data import (
    Dataset,
    ImbalanceSpec,
    Partition,
    dirichlet_partition,
    generate_synthetic,
    load_idx,
    sample_proxy,
)
from .errors import (
    AttackInapplicableError,
    ConfigurationError,
    DivergenceError,
    FormatError,
    InvalidArgumentError,
)
from .experiment import (
    ExperimentConfig,
    RoundRecord,
    RunResult,
    config_from_dict,
    load_config,
    run,
    write_metrics,
)
from .models import (
    Batch,
    EvalReport,
    ModelSpec,
    ce_loss_and_grad,
    evaluate,
    forward,
    init_params,
    kl_loss_and_grad,
    softmax,
)

__version__ = "0.1.0"
