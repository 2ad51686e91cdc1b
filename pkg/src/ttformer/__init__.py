"""Traffic forecasting with tweet-derived features and a time-encoded transformer."""

__version__ = "0.1.0"
