"""Physics-incorporated recurrent networks for source identification and forecasting."""

__version__ = "0.1.0"
