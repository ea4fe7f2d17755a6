"""Federated resource discovery: ontology-indexed topic brokers behind a three-role agent layer."""

__version__ = "0.1.0"
