"""Text reinforcement for multimodal time series forecasting.

Serialize a lookback window to text, generate candidate reinforced texts,
score them with a forecast-accuracy and keyword-relevance reward, build
preference pairs, refine the generator with DPO and retrain a small
patch/cross-attention forecaster on the winning texts.
"""

from ter_tsf.errors import BackendError, ConfigError, DataError, TerError

__version__ = "0.1.0"

__all__ = ["BackendError", "ConfigError", "DataError", "TerError", "__version__"]
