"""Mortality prediction from sequential clinical notes with LSTM and neural topic layers."""

__version__ = "0.1.0"
