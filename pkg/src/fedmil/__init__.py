"""Federated multiple-instance learning with quality-aware DPP client selection."""

from .datasets import Bag, BagDataset, SyntheticSpec, generate_synthetic, load_bags, load_mnist, save_bags
from .federation import FederationConfig, run_federation
from .model import LookaheadConfig, ModelConfig, ModelParams, init_params, train_local
from .partition import (DirichletConfig, PowerLawConfig, UtilizationConfig, apply_utilization,
                        partition_type1, partition_type2)
from .selection import build_kernel, sample_k_dpp, select_clients

__version__ = "0.1.0"
