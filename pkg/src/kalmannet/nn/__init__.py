"""Small differentiable core: tape autodiff, FC/GRU layers, Adam, checkpoints."""
from kalmannet.nn.checkpoint import load_checkpoint, save_checkpoint
from kalmannet.nn.layers import PARAM_NAMES, GainNetworkParams, fc_forward, gru_forward, network_dims
from kalmannet.nn.optim import OptimizerState, optimizer_step
from kalmannet.nn.tape import Node, Tape, TapeError, backward

__all__ = [
    "GainNetworkParams", "PARAM_NAMES", "network_dims", "fc_forward", "gru_forward",
    "OptimizerState", "optimizer_step", "Tape", "Node", "TapeError", "backward",
    "save_checkpoint", "load_checkpoint",
]
