"""Streaming audio-visual speech enhancement with a causal, 40 ms latency pipeline."""

from .pipeline import (
    PRESETS,
    LatencyReport,
    MixSpec,
    Model,
    ModelConfig,
    count_params,
    enhance_offline,
    latency_graph,
    measure_processing_latency,
    mix,
    naive_online,
    preset,
    session_new,
    session_step,
    weights_init,
)
from .causal import algorithm_latency, latency_ledger
from .tensor import ShapeError
from .weights import WeightError, WeightFileError, WeightStore, load as weights_load, save as weights_save

__version__ = "0.1.0"
