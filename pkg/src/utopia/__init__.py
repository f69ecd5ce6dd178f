"""Unlearnable tabular data by decoupled shortcut embedding."""
__version__ = "0.1.0"
