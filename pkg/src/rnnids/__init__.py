"""Recurrent flow-based intrusion detection with adversarial attacks, robustness scoring and explanations."""

__version__ = "0.1.0"
