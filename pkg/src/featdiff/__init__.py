"""Reward-guided latent diffusion over tabular feature transformations."""

from .expr import (
    FeatureExpr,
    FeatureSet,
    OPERATORS,
    evaluate,
    parse,
    random_feature_set,
    serialize,
)
from .tabular import RAW, Dataset, downstream_score, load_csv
from .collector import CollectorConfig, TrainingRecord, collect
from .vae import FeatureSetVAE, VaeConfig, train_vae
from .condition import ConditionNet, build_graph
from .diffusion import Denoiser, DenoiserConfig, linear_schedule, train_ldm
from .sampler import SamplerConfig, continuous_search_latent, ddim_sample
from .pipeline import ConfigError, RunConfig

__all__ = [
    "FeatureExpr",
    "FeatureSet",
    "OPERATORS",
    "evaluate",
    "parse",
    "serialize",
    "random_feature_set",
    "RAW",
    "Dataset",
    "downstream_score",
    "load_csv",
    "CollectorConfig",
    "TrainingRecord",
    "collect",
    "FeatureSetVAE",
    "VaeConfig",
    "train_vae",
    "ConditionNet",
    "build_graph",
    "Denoiser",
    "DenoiserConfig",
    "linear_schedule",
    "train_ldm",
    "SamplerConfig",
    "ddim_sample",
    "continuous_search_latent",
    "ConfigError",
    "RunConfig",
]

__version__ = "0.1.0"
