"""KalmanNet: Kalman filtering with a learned gain, trainable without state labels.

Modules:

- ``ssm``: linear and Lorenz state-space models, trajectory simulation, datasets
- ``filters``: Kalman filter and extended Kalman filter
- ``nn``: tape autodiff, FC/GRU layers, Adam, checkpoints
- ``knet``: the KalmanNet recursion
- ``training``: losses, offline and online training
- ``harness``: experiment drivers and the command-line interface
"""
from kalmannet.errors import (
    DimensionError,
    DivergenceError,
    InvalidArgumentError,
    KalmanNetError,
    MalformedFileError,
    NumericalError,
)
from kalmannet.filters import ekf_filter, ekf_filter_batch, kf_filter, kf_filter_batch, riccati_steady_state
from kalmannet.io import load_dataset, save_dataset
from kalmannet.knet import knet_filter, knet_filter_batch, knet_step
from kalmannet.metrics import mse_db, mse_linear
from kalmannet.nn import GainNetworkParams, load_checkpoint, save_checkpoint
from kalmannet.ssm import (
    Dataset,
    LinearModel,
    LorenzModel,
    NoiseSpec,
    Trajectory,
    canonical_linear_model,
    generate_dataset,
)
from kalmannet.training import OnlineConfig, TrainingConfig, train_offline, train_online

__version__ = "0.1.0"
