"""Diffusion-driven limit order book market simulation toolkit."""

from .book import LobSnapshot, Order, OrderBook, OrderKind, Side, Trade, derived_metrics
from .data import FeatureScaler, NormStats, WindowDataset, filter_events, parse_message_file
from .diffusion import NoiseSchedule, cosine_schedule, ddim_generate, ddpm_generate
from .model import ModelBundle, ModelConfig, OrderFlowDenoiser
from .sim import POVAgent, POVConfig, SimConfig, SimOutput, run_simulation
from .training import TrainConfig, train

__all__ = [
    "LobSnapshot", "Order", "OrderBook", "OrderKind", "Side", "Trade", "derived_metrics",
    "FeatureScaler", "NormStats", "WindowDataset", "filter_events", "parse_message_file",
    "NoiseSchedule", "cosine_schedule", "ddim_generate", "ddpm_generate",
    "ModelBundle", "ModelConfig", "OrderFlowDenoiser",
    "POVAgent", "POVConfig", "SimConfig", "SimOutput", "run_simulation",
    "TrainConfig", "train",
]
