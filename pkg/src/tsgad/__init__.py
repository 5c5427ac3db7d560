"""Two-headed anomaly detection for multivariate time series.

A shared Bi-LSTM/self-attention encoder feeds a graph-attention forecasting
head and a variational reconstruction head; the two training losses are
balanced per step by a closed-form two-task gradient combination, and
detection scores come from robustly normalized per-sensor deviations.
"""

__version__ = "0.1.0"

from .data import TimeSeriesDataset, load_csv, make_windows, normalize, synth_generate
from .model import Detector, ModelConfig

__all__ = [
    "Detector",
    "ModelConfig",
    "TimeSeriesDataset",
    "load_csv",
    "make_windows",
    "normalize",
    "synth_generate",
    "__version__",
]
