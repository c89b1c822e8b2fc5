"""Deterministic federated-learning simulator and stability laboratory.

FedAvg, SCAFFOLD and FedProx on synthetic label-skewed federations, coupled
twin trainings on neighboring datasets, and closed-form divergence bounds
evaluated from estimated constants.
"""

from fedstab.data import (
    ClientDataset,
    DataGenSpec,
    FederatedDataset,
    HeterogeneityProfile,
    NeighborSpec,
    Sample,
    draw_oracle_set,
    generate_federation,
    load_idx,
    make_neighbor,
    total_variation_labels,
)
from fedstab.fedalgo import (
    AlgoConfig,
    RandomTape,
    StepSchedule,
    TrajectoryRecord,
    aggregate,
    run_training,
)
from fedstab.models import (
    LeastSquares,
    LogisticMulticlass,
    MLP,
    ConstantEstimates,
    estimate_constants,
    prox_solve,
    smoothness_constant,
)

__version__ = "0.1.0"

__all__ = [
    "AlgoConfig",
    "ClientDataset",
    "ConstantEstimates",
    "DataGenSpec",
    "FederatedDataset",
    "HeterogeneityProfile",
    "LeastSquares",
    "LogisticMulticlass",
    "MLP",
    "NeighborSpec",
    "RandomTape",
    "Sample",
    "StepSchedule",
    "TrajectoryRecord",
    "aggregate",
    "draw_oracle_set",
    "estimate_constants",
    "generate_federation",
    "load_idx",
    "make_neighbor",
    "prox_solve",
    "run_training",
    "smoothness_constant",
    "total_variation_labels",
]
