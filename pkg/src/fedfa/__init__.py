"""Discrete-event simulator for asynchronous federated learning with
sliding-window (FedFa) aggregation and FedAvg / FedAsync / FedBuff baselines."""

from .data import Dataset, PartitionPlan, dirichlet_partition, iid_partition, load_csv, synth_classification
from .errors import ConfigError, DivergenceError
from .params import LocalTrainConfig, ModelSpec, evaluate_gradient, evaluate_loss, local_train, vec_axpy, vec_mean
from .runlog import RunLog
from .simulator import DelayModel, SimConfig, run_simulation, sample_replacement, server_wait_accounting
from .strategies import (
    ClientUpdate,
    ServerState,
    SlidingBuffer,
    StalenessFn,
    fedasync_step,
    fedavg_aggregate,
    fedbuff_step,
    fedfa_delta_step,
    fedfa_param_step,
    staleness_of,
)

__version__ = "0.1.0"
