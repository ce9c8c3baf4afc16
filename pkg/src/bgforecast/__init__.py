"""Multimodal Bi-GRU blood glucose forecasting with personalization."""

__version__ = "0.1.0"
