"""Residual adapters: one frozen ResNet shared by many image domains."""
from .adapters import fuse_parallel, fuse_series, parallel_forward, series_forward, unfuse_parallel, unfuse_series
from .compression import compress_network, compression_ratio, joint_factorize, svd
from .data_io import Dataset, SyntheticDomainSpec, generate_domain, load_network, save_network
from .errors import ConfigError, DigestError, FormatError, NumericError, ResAdaptError
from .network import Network, NetworkConfig, PlacementConfig, count_params, partition_params
from .trainer import TrainConfig, evaluate, finetune_gammas, train_base, train_domain

__version__ = "0.1.0"
